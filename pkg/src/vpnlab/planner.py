"""
d-step lookahead over a learned core model.

Q^1(s, o)  = r + g * V(s')
Q^d(s, o)  = r + g * V^d(s'),   d > 1
V^1(s)     = V(s)
V^d(s)     = V(s) / d + (d - 1) / d * max over b-best o' of Q^{d-1}(s, o')

Trees are expanded one level at a time so every level is a single batched
core call. Nodes below the root keep only the schedule's b best options,
ranked by their one-step Q values.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from vpnlab.errors import InputError
from vpnlab.netcore.tensor import Array

DEFAULT_WIDTHS: tuple[int, ...] = (4, 4, 4, 1)


class CoreBatchLike(Protocol):
    reward: Array
    discount: Array
    value: Array
    next_state: Array


class CoreModel(Protocol):
    @property
    def n_options(self) -> int: ...

    def core_all(self, states: Array) -> CoreBatchLike: ...

    def state_value(self, states: Array) -> Array: ...


@dataclass
class PlanNode:
    """
    A state reached by `option` from its parent. value is V(state); depth is
    the d of the V^d computed here; q is the parent's Q^depth for `option`.
    """

    option: int | None
    reward: float
    discount: float
    value: float
    depth: int
    level: int
    children: list["PlanNode"] = field(default_factory=list)
    backed_up_value: float = 0.0
    chosen: int | None = None
    state: Array | None = field(default=None, repr=False)

    @property
    def q(self) -> float:
        return self.reward + self.discount * self.backed_up_value

    def best_path(self) -> list["PlanNode"]:
        path: list[PlanNode] = []
        node = self
        while node.chosen is not None:
            node = node.children[node.chosen]
            path.append(node)
        return path

    def to_dict(self) -> dict[str, Any]:
        return {
            "option": self.option,
            "reward": self.reward,
            "discount": self.discount,
            "value": self.value,
            "depth": self.depth,
            "q": self.q,
            "backed_up_value": self.backed_up_value,
            "chosen": self.chosen,
            "children": [child.to_dict() for child in self.children],
        }


@dataclass
class PlanResult:
    best_option: int
    q_values: Array
    trace: PlanNode


def schedule_width(widths: Sequence[int], level: int, n_options: int) -> int:
    """
    Branching at a tree level: widths[level], with the last width repeating.

    widths[0] is the root's entry. The root expands every option whatever it
    holds, so it only has to lie in range like the rest of the schedule.
    """
    if level == 0 or not widths:
        return n_options
    width = widths[min(level, len(widths) - 1)]
    return max(1, min(width, n_options))


def validate_widths(widths: Sequence[int], n_options: int) -> None:
    for width in widths:
        if not 1 <= width <= n_options:
            raise InputError(f"branch widths must lie in [1, {n_options}], got {list(widths)}")


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i, value in enumerate(values):
        if value > values[best]:
            best = i
    return best


def _expand(model: CoreModel, roots: list[PlanNode], widths: Sequence[int]) -> None:
    frontier = [node for node in roots if node.depth > 1]
    while frontier:
        states = np.stack([node.state for node in frontier if node.state is not None])
        batch = model.core_all(states)
        q_one = batch.reward + batch.discount * batch.value
        next_frontier: list[PlanNode] = []
        for i, node in enumerate(frontier):
            width = schedule_width(widths, node.level, model.n_options)
            ranked = np.argsort(-q_one[i], kind="stable")[:width]
            for option in sorted(int(o) for o in ranked):
                child = PlanNode(
                    option=option,
                    reward=float(batch.reward[i, option]),
                    discount=float(batch.discount[i, option]),
                    value=float(batch.value[i, option]),
                    depth=node.depth - 1,
                    level=node.level + 1,
                    state=batch.next_state[i, option] if node.depth > 2 else None,  # noqa: PLR2004
                )
                node.children.append(child)
                if child.depth > 1:
                    next_frontier.append(child)
            node.state = None
        frontier = next_frontier


def _backup(node: PlanNode) -> float:
    if node.depth == 1 or not node.children:
        node.backed_up_value = node.value
        return node.backed_up_value
    for child in node.children:
        _backup(child)
    child_q = [child.q for child in node.children]
    node.chosen = _argmax_first(child_q)
    depth = node.depth
    node.backed_up_value = node.value / depth + (depth - 1) / depth * child_q[node.chosen]
    return node.backed_up_value


def plan_batch(
    states: Array, d: int, model: CoreModel, widths: Sequence[int] = DEFAULT_WIDTHS
) -> list[PlanResult]:
    """Plan from every state in the batch; the trees share their core calls level by level."""
    if d < 1:
        raise InputError(f"planning depth must be >= 1, got {d}")
    validate_widths(widths, model.n_options)
    root_values = model.state_value(states)
    roots = [
        PlanNode(
            option=None,
            reward=0.0,
            discount=1.0,
            value=float(root_values[b]),
            depth=d + 1,
            level=0,
            state=states[b],
        )
        for b in range(states.shape[0])
    ]
    _expand(model, roots, widths)
    results = []
    for root in roots:
        _backup(root)
        q_values = np.array([child.q for child in root.children])
        results.append(PlanResult(int(root.chosen or 0), q_values, root))
    return results


def plan(
    state: Array, d: int, model: CoreModel, widths: Sequence[int] = DEFAULT_WIDTHS
) -> PlanResult:
    """Best root option by Q^d, with every root option evaluated; ties go to the lowest option."""
    return plan_batch(state[np.newaxis], d, model, widths)[0]


def q_plan(
    state: Array, option: int, d: int, model: CoreModel, widths: Sequence[int] = DEFAULT_WIDTHS
) -> tuple[float, PlanNode]:
    if not 0 <= option < model.n_options:
        raise InputError(f"option {option} out of range")
    result = plan(state, d, model, widths)
    node = result.trace.children[option]
    return node.q, node


def path_returns(node: PlanNode) -> list[float]:
    """The depth-many return estimates along the best path from node."""
    returns = [node.value]
    if node.depth == 1 or node.chosen is None:
        return returns
    child = node.children[node.chosen]
    returns.extend(child.reward + child.discount * g for g in path_returns(child))
    return returns


def uniform_average_check(node: PlanNode) -> float:
    """V^d at node recomputed as the plain mean of the return estimates on its best path."""
    returns = path_returns(node)
    return float(sum(returns) / len(returns))


@dataclass
class TabularCore:
    """A lookup-table core model over integer states."""

    reward: Array
    discount: Array
    next_state: Array
    values: Array

    @property
    def n_options(self) -> int:
        return int(self.reward.shape[1])

    @classmethod
    def random(cls, n_states: int, n_options: int, rng: np.random.Generator) -> "TabularCore":
        return cls(
            reward=rng.normal(size=(n_states, n_options)),
            discount=rng.uniform(0.5, 1.0, size=(n_states, n_options)),
            next_state=rng.integers(n_states, size=(n_states, n_options)),
            values=rng.normal(size=n_states),
        )

    def core_all(self, states: Array) -> "TabularBatch":
        index = np.asarray(states, dtype=np.intp)
        successors = self.next_state[index]
        return TabularBatch(
            reward=self.reward[index],
            discount=self.discount[index],
            value=self.values[successors],
            next_state=successors,
        )

    def state_value(self, states: Array) -> Array:
        return self.values[np.asarray(states, dtype=np.intp)]


@dataclass
class TabularBatch:
    reward: Array
    discount: Array
    value: Array
    next_state: Array
