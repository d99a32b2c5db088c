"""ASCII renderings of Collect states and plan traces."""

from collections.abc import Mapping
from dataclasses import replace
from typing import Any

import numpy as np
import yaml

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import InputError
from vpnlab.gridworld import GLYPH_EMPTY, GridState, Option, format_state, option_path, parse_state
from vpnlab.planner import PlanNode, PlanResult

logger: VpnlabLogger = vpnlab_logger.init(__name__)

TRACE_FORMAT_VERSION: int = 1
_STEP_MARKS = "123456789abcdefghijklmnopqrstuvwxyz"


def step_mark(index: int) -> str:
    """Glyph for the cell reached by the index-th planned option (1-based)."""
    if not 1 <= index <= len(_STEP_MARKS):
        raise InputError(f"cannot mark plan step {index}")
    return _STEP_MARKS[index - 1]


def render_state(state: GridState) -> str:
    return format_state(state)


def _glyph_rows(state: GridState) -> list[list[str]]:
    return [list(line) for line in format_state(state).splitlines()[: state.height]]


def overlay_path(state: GridState, options: list[int]) -> list[list[str]]:
    """
    Lay the planned options over the grid. Cells passed through show the
    option's arrow and the cell where the i-th option stops shows its step
    mark. Goals and time are ignored, as the option geometry only depends on
    the walls.
    """
    rows = _glyph_rows(state)
    cell = state.agent
    for index, option in enumerate(options, start=1):
        path = option_path(state, cell, Option(option))
        for row, col in path[:-1]:
            if rows[row][col] == GLYPH_EMPTY:
                rows[row][col] = Option(option).arrow
        if path:
            cell = path[-1]
            rows[cell[0]][cell[1]] = step_mark(index)
    return rows


def _annotation(node: PlanNode, index: int) -> str:
    arrow = Option(node.option).arrow if node.option is not None else "-"
    return (
        f"{step_mark(index)} {arrow}  r={node.reward:+.3f}  gamma={node.discount:.3f}  "
        f"V={node.value:+.3f}  Q={node.q:+.3f}"
    )


def render_plan(state: GridState, trace: PlanNode) -> str:
    """The grid with the best path drawn on it, root Q-values and one line per planned step."""
    best = trace.best_path()
    rows = overlay_path(state, [node.option for node in best if node.option is not None])
    lines = ["".join(row) for row in rows]
    lines.append(f"steps: {state.steps_remaining}")
    q_cells = []
    for child in trace.children:
        if child.option is None:
            continue
        chosen = "*" if trace.chosen is not None and trace.children[trace.chosen] is child else " "
        q_cells.append(f"{Option(child.option).arrow}{chosen}{child.q:+.3f}")
    lines.append("Q: " + "  ".join(q_cells))
    lines.extend(_annotation(node, index) for index, node in enumerate(best, start=1))
    return "\n".join(lines) + "\n"


def with_steps(state: GridState, steps: int | None) -> GridState:
    """The same layout under a different remaining-time budget."""
    if steps is None:
        return state
    if steps < 1:
        raise InputError(f"remaining steps must be >= 1, got {steps}")
    return replace(state, steps_remaining=steps)


def plan_node_from_dict(values: Mapping[str, Any], level: int = 0) -> PlanNode:
    node = PlanNode(
        option=values.get("option"),
        reward=float(values["reward"]),
        discount=float(values["discount"]),
        value=float(values["value"]),
        depth=int(values["depth"]),
        level=level,
        backed_up_value=float(values.get("backed_up_value", 0.0)),
        chosen=values.get("chosen"),
    )
    node.children = [plan_node_from_dict(child, level + 1) for child in values.get("children", [])]
    return node


def trace_document(state: GridState, result: PlanResult, d: int) -> dict[str, Any]:
    return {
        "format_version": TRACE_FORMAT_VERSION,
        "depth": d,
        "state": format_state(state),
        "best_option": Option(result.best_option).name,
        "q_values": [float(q) for q in np.asarray(result.q_values)],
        "trace": result.trace.to_dict(),
    }


def dump_trace(state: GridState, result: PlanResult, d: int) -> str:
    return yaml.safe_dump(trace_document(state, result, d), sort_keys=True)


def load_render_input(text: str) -> tuple[GridState, PlanNode | None]:
    """A plain layout, or a trace document written by dump_trace."""
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError:
        document = None
    if isinstance(document, dict) and "trace" in document:
        logger.debug("render input is a plan trace")
        return parse_state(document["state"]), plan_node_from_dict(document["trace"])
    return parse_state(text), None
