"""
Reference policies for Collect: greedy nearest-goal and deterministic shortest path.

Both plan over the option graph: for every stop cell and option, the cells a
deterministic option run passes through. Goals are tracked as a bitmask over
the episode's goal list.
"""

import heapq
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import BudgetExceededError
from vpnlab.gridworld import (
    Cell,
    EpisodeResult,
    GridConfig,
    GridState,
    Option,
    is_terminal,
    option_path,
    play_episode,
)

logger: VpnlabLogger = vpnlab_logger.init(__name__)

DEFAULT_NODE_BUDGET: int = 2_000_000


@dataclass(frozen=True)
class Plan:
    options: tuple[Option, ...]
    predicted_return: float


@dataclass(frozen=True)
class OptionRun:
    """Deterministic effect of one option: cells entered, steps used, goals collected."""

    cells: tuple[Cell, ...]
    steps: int
    collected: int
    mask: int


class OptionGraph:
    def __init__(self, state: GridState, config: GridConfig) -> None:
        self._state = state
        self._config = config
        self.goals: tuple[Cell, ...] = tuple(sorted(state.goals))
        self._goal_bit = {goal: 1 << i for i, goal in enumerate(self.goals)}

    @property
    def full_mask(self) -> int:
        return (1 << len(self.goals)) - 1

    def path(self, cell: Cell, option: Option) -> tuple[Cell, ...]:
        return option_path(self._state, cell, option)

    def run(self, cell: Cell, option: Option, mask: int, steps: int) -> OptionRun:
        """Apply one option under deterministic dynamics with steps primitive steps left."""
        path = self.path(cell, option)
        if not path:
            return OptionRun((), 1, 0, mask)
        entered: list[Cell] = []
        collected = 0
        for target in path[:steps]:
            entered.append(target)
            bit = self._goal_bit.get(target, 0)
            if mask & bit:
                mask &= ~bit
                collected += 1
                if self._config.end_on_clear and mask == 0:
                    break
        return OptionRun(tuple(entered), len(entered), collected, mask)

    def run_return(self, run: OptionRun) -> float:
        return run.collected * self._config.goal_reward - run.steps * self._config.step_penalty


def greedy_path(state: GridState, config: GridConfig) -> tuple[tuple[Option, ...], int] | None:
    """
    Option sequence reaching the goal collected after the fewest primitive steps.

    Candidates compare by (steps, options), so ties fall to Up < Down < Left < Right.
    """
    if not state.goals:
        return None
    graph = OptionGraph(state, config)
    best: tuple[int, tuple[Option, ...]] | None = None
    settled: set[Cell] = set()
    queue: list[tuple[int, tuple[Option, ...], Cell]] = [(0, (), state.agent)]
    while queue:
        cost, options, cell = heapq.heappop(queue)
        if best is not None and cost >= best[0]:
            break
        if cell in settled:
            continue
        settled.add(cell)
        for option in Option:
            path = graph.path(cell, option)
            for i, target in enumerate(path):
                if target in state.goals:
                    candidate = (cost + i + 1, (*options, option))
                    if best is None or candidate < best:
                        best = candidate
                    break
            if path and path[-1] not in settled:
                heapq.heappush(queue, (cost + len(path), (*options, option), path[-1]))
    if best is None:
        return None
    return best[1], best[0]


def greedy_option(state: GridState, config: GridConfig) -> Option:
    found = greedy_path(state, config)
    if found is not None:
        return found[0][0]
    for option in Option:
        if option_path(state, state.agent, option):
            return option
    return Option.UP


def _greedy_policy(config: GridConfig) -> Callable[[GridState], Option | None]:
    def choose(state: GridState) -> Option | None:
        found = greedy_path(state, config)
        if found is None or found[1] > state.steps_remaining:
            return None
        return found[0][0]

    return choose


def shortest_path_plan(
    state: GridState, config: GridConfig, node_budget: int = DEFAULT_NODE_BUDGET
) -> Plan:
    """
    Best deterministic episode return over all option sequences that fit the
    remaining steps. Stopping early is allowed and wins ties.
    """
    graph = OptionGraph(state, config)
    memo: dict[tuple[Cell, int, int], tuple[float, Option | None]] = {}
    expanded = 0

    def search(cell: Cell, mask: int, steps: int) -> float:
        nonlocal expanded
        if steps <= 0 or (config.end_on_clear and mask == 0):
            return 0.0
        key = (cell, mask, steps)
        if key in memo:
            return memo[key][0]
        expanded += 1
        if expanded > node_budget:
            raise BudgetExceededError(f"shortest-path search exceeded {node_budget} nodes")
        best_value, best_option = 0.0, None
        for option in Option:
            run = graph.run(cell, option, mask, steps)
            end = run.cells[-1] if run.cells else cell
            value = graph.run_return(run) + search(end, run.mask, steps - run.steps)
            if value > best_value:
                best_value, best_option = value, option
        memo[key] = (best_value, best_option)
        return best_value

    total = search(state.agent, graph.full_mask, state.steps_remaining)

    options: list[Option] = []
    cell, mask, steps = state.agent, graph.full_mask, state.steps_remaining
    while (cell, mask, steps) in memo:
        option = memo[(cell, mask, steps)][1]
        if option is None:
            break
        options.append(option)
        run = graph.run(cell, option, mask, steps)
        cell = run.cells[-1] if run.cells else cell
        mask, steps = run.mask, steps - run.steps
    logger.debug(f"shortest path: {expanded} nodes, return {total:.2f}")
    return Plan(tuple(options), total)


def _shortest_policy(
    config: GridConfig, node_budget: int
) -> Callable[[GridState], Option | None]:
    pending: list[Option] = []

    def choose(state: GridState) -> Option | None:
        if config.stochastic or not pending:
            pending[:] = shortest_path_plan(state, config, node_budget).options
        if not pending:
            return None
        return pending.pop(0)

    return choose


def run_oracle_episode(
    kind: str,
    state: GridState,
    config: GridConfig,
    rng: np.random.Generator | None = None,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> EpisodeResult:
    """
    Play one episode with the greedy or shortest oracle. In stochastic mode the
    oracle replans before every option; an empty plan ends the episode.
    """
    if kind == "greedy":
        policy = _greedy_policy(config)
    elif kind == "shortest":
        policy = _shortest_policy(config, node_budget)
    else:
        raise ValueError(f"unknown oracle `{kind}`")
    if is_terminal(state, config):
        return EpisodeResult(0.0, 0, 0, ())
    return play_episode(state, config, policy, rng)
