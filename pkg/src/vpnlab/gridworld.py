"""
The Collect domain.

The agent moves with four directional options. An option keeps stepping in
its direction until the agent reaches a crossing branch or the end of a
corridor. Each primitive step costs the step penalty; entering a goal's cell
collects it. In stochastic mode goals wander and options may repeat.
"""

import math
from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import GenerationError, InputError, UsageError

logger: VpnlabLogger = vpnlab_logger.init(__name__)

Cell = tuple[int, int]

GLYPH_EMPTY = "."
GLYPH_WALL = "#"
GLYPH_AGENT = "A"
GLYPH_GOAL = "G"
GLYPH_AGENT_ON_GOAL = "@"


class Option(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]

    @property
    def arrow(self) -> str:
        return "^v<>"[self]


_DELTAS: dict[int, Cell] = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}
N_OPTIONS: int = len(Option)


@dataclass(frozen=True)
class GridConfig:
    width: int = 10
    height: int = 10
    n_goals: int = 8
    n_walls: int = 12
    time_limit: int = 20
    goal_reward: float = 2.0
    step_penalty: float = 0.2
    stochastic: bool = False
    goal_move_prob: float = 0.3
    option_repeat_prob: float = 0.3
    discount: float = 0.98
    end_on_clear: bool = True
    max_layout_attempts: int = 1000

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InputError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.n_goals < 0 or self.n_walls < 0:
            raise InputError("goal and wall counts must be non-negative")
        if self.n_goals + self.n_walls + 1 > self.width * self.height:
            raise InputError(
                f"{self.n_goals} goals + {self.n_walls} walls + agent do not fit a "
                f"{self.height}x{self.width} grid"
            )
        if self.time_limit <= 0:
            raise InputError(f"time limit must be positive, got {self.time_limit}")
        for name in ("goal_move_prob", "option_repeat_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.discount <= 1.0:
            raise InputError(f"discount must lie in (0, 1], got {self.discount}")


ENV_VARIANTS: dict[str, dict[str, int]] = {
    "original": {"n_goals": 8, "n_walls": 12},
    "fewer_goals": {"n_goals": 5, "n_walls": 12},
    "more_walls": {"n_goals": 8, "n_walls": 18},
}


def variant_config(base: GridConfig, variant: str, stochastic: bool) -> GridConfig:
    if variant not in ENV_VARIANTS:
        raise InputError(f"unknown environment variant `{variant}`")
    return replace(base, stochastic=stochastic, **ENV_VARIANTS[variant])


@dataclass(frozen=True)
class GridState:
    height: int
    width: int
    agent: Cell
    goals: frozenset[Cell]
    walls: frozenset[Cell]
    steps_remaining: int

    @property
    def wall_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros((self.height, self.width), dtype=bool)
        for row, col in self.walls:
            mask[row, col] = True
        return mask

    def is_open(self, cell: Cell) -> bool:
        row, col = cell
        return 0 <= row < self.height and 0 <= col < self.width and cell not in self.walls


@dataclass(frozen=True)
class Observation:
    grid: NDArray[np.uint8]
    time: float


@dataclass(frozen=True)
class OptionOutcome:
    reward: float
    steps: int
    discount: float
    next_state: GridState
    terminal: bool
    per_step_rewards: tuple[float, ...] = field(default=())
    goals_collected: int = 0


def is_terminal(state: GridState, config: GridConfig) -> bool:
    if state.steps_remaining <= 0:
        return True
    return config.end_on_clear and not state.goals


def _step(cell: Cell, option: Option) -> Cell:
    d_row, d_col = option.delta
    return cell[0] + d_row, cell[1] + d_col


def _perpendicular(option: Option) -> tuple[Option, Option]:
    if option in (Option.UP, Option.DOWN):
        return Option.LEFT, Option.RIGHT
    return Option.UP, Option.DOWN


def should_stop(state: GridState, cell: Cell, option: Option) -> bool:
    """Stop at a crossing branch or when the corridor ends."""
    if not state.is_open(_step(cell, option)):
        return True
    return any(state.is_open(_step(cell, side)) for side in _perpendicular(option))


@lru_cache(maxsize=65536)
def _cached_path(
    height: int, width: int, walls: frozenset[Cell], start: Cell, option: Option
) -> tuple[Cell, ...]:
    scratch = GridState(height, width, start, frozenset(), walls, 1)
    cell = start
    path: list[Cell] = []
    while scratch.is_open(_step(cell, option)):
        cell = _step(cell, option)
        path.append(cell)
        if should_stop(scratch, cell, option):
            break
    return tuple(path)


def option_path(state: GridState, start: Cell, option: Option) -> tuple[Cell, ...]:
    """Cells entered by one deterministic run of option from start, ignoring goals and time."""
    return _cached_path(state.height, state.width, state.walls, start, option)


def reachable_cells(state: GridState) -> set[Cell]:
    """Every cell some sequence of option runs passes through."""
    seen_stops = {state.agent}
    covered = {state.agent}
    frontier = deque([state.agent])
    while frontier:
        cell = frontier.popleft()
        for option in Option:
            path = option_path(state, cell, option)
            covered.update(path)
            if path and path[-1] not in seen_stops:
                seen_stops.add(path[-1])
                frontier.append(path[-1])
    return covered


def generate_episode(config: GridConfig, rng: np.random.Generator) -> GridState:
    config.validate()
    n_cells = config.width * config.height
    for attempt in range(config.max_layout_attempts):
        order = rng.permutation(n_cells)
        cells = [(int(i) // config.width, int(i) % config.width) for i in order]
        walls = frozenset(cells[: config.n_walls])
        agent = cells[config.n_walls]
        goals = frozenset(cells[config.n_walls + 1 : config.n_walls + 1 + config.n_goals])
        state = GridState(config.height, config.width, agent, goals, walls, config.time_limit)
        if goals <= reachable_cells(state):
            if attempt:
                logger.debug(f"layout accepted after {attempt} rejections")
            return state
    raise GenerationError(
        f"no layout with every goal reachable after {config.max_layout_attempts} attempts"
    )


def observe(state: GridState, config: GridConfig) -> Observation:
    """Channel 0 agent, channel 1 goals, channel 2 walls; time normalized to [0, 1]."""
    grid = np.zeros((3, state.height, state.width), dtype=np.uint8)
    grid[0, state.agent[0], state.agent[1]] = 1
    for row, col in state.goals:
        grid[1, row, col] = 1
    for row, col in state.walls:
        grid[2, row, col] = 1
    return Observation(grid, state.steps_remaining / config.time_limit)


def _move_goals(
    state: GridState, goals: set[Cell], config: GridConfig, rng: np.random.Generator
) -> set[Cell]:
    moved = set(goals)
    for goal in sorted(goals):
        if rng.random() >= config.goal_move_prob:
            continue
        candidates = [
            cell
            for option in Option
            if state.is_open(cell := _step(goal, option)) and cell not in moved
        ]
        if candidates:
            moved.remove(goal)
            moved.add(candidates[int(rng.integers(len(candidates)))])
    return moved


def execute_option(
    state: GridState,
    option: Option,
    config: GridConfig,
    rng: np.random.Generator | None = None,
) -> OptionOutcome:
    if is_terminal(state, config):
        raise UsageError("execute_option called on a terminal state")
    if config.stochastic and rng is None:
        raise UsageError("stochastic dynamics need an rng")
    option = Option(option)

    agent = state.agent
    goals = set(state.goals)
    remaining = state.steps_remaining
    rewards: list[float] = []
    collected = 0

    def finished() -> bool:
        return remaining == 0 or (config.end_on_clear and not goals)

    while True:
        while True:
            reward = -config.step_penalty
            # a goal that wandered onto the agent is picked up before the move
            if agent in goals:
                goals.remove(agent)
                reward += config.goal_reward
                collected += 1
            target = _step(agent, option)
            blocked = not state.is_open(target)
            if not blocked:
                agent = target
                if agent in goals:
                    goals.remove(agent)
                    reward += config.goal_reward
                    collected += 1
            if config.stochastic and rng is not None:
                goals = _move_goals(state, goals, config, rng)
            remaining -= 1
            rewards.append(reward)
            if blocked or finished() or should_stop(state, agent, option):
                break
        if finished() or not config.stochastic or rng is None:
            break
        if rng.random() >= config.option_repeat_prob:
            break

    next_state = replace(state, agent=agent, goals=frozenset(goals), steps_remaining=remaining)
    steps = len(rewards)
    return OptionOutcome(
        reward=discounted_sum(rewards, config.discount),
        steps=steps,
        discount=config.discount**steps,
        next_state=next_state,
        terminal=is_terminal(next_state, config),
        per_step_rewards=tuple(rewards),
        goals_collected=collected,
    )


def discounted_sum(rewards: Iterable[float], discount: float) -> float:
    total = 0.0
    for i, reward in enumerate(rewards):
        total += discount**i * reward
    return total


def episode_return(outcomes: Iterable[OptionOutcome]) -> float:
    """Undiscounted sum of every primitive-step reward in the episode."""
    return math.fsum(reward for outcome in outcomes for reward in outcome.per_step_rewards)


@dataclass(frozen=True)
class EpisodeResult:
    total_return: float
    goals_collected: int
    steps_used: int
    options: tuple[Option, ...]


def play_episode(
    state: GridState,
    config: GridConfig,
    choose: Callable[[GridState], Option | None],
    rng: np.random.Generator | None = None,
) -> EpisodeResult:
    """Run a policy to the end of the episode; a policy returning None stops early."""
    outcomes: list[OptionOutcome] = []
    options: list[Option] = []
    while not is_terminal(state, config):
        option = choose(state)
        if option is None:
            break
        outcome = execute_option(state, option, config, rng)
        outcomes.append(outcome)
        options.append(Option(option))
        state = outcome.next_state
    return EpisodeResult(
        total_return=episode_return(outcomes),
        goals_collected=sum(outcome.goals_collected for outcome in outcomes),
        steps_used=sum(outcome.steps for outcome in outcomes),
        options=tuple(options),
    )


def format_state(state: GridState) -> str:
    rows = []
    for row in range(state.height):
        glyphs = []
        for col in range(state.width):
            cell = (row, col)
            if cell == state.agent:
                glyphs.append(GLYPH_AGENT_ON_GOAL if cell in state.goals else GLYPH_AGENT)
            elif cell in state.walls:
                glyphs.append(GLYPH_WALL)
            elif cell in state.goals:
                glyphs.append(GLYPH_GOAL)
            else:
                glyphs.append(GLYPH_EMPTY)
        rows.append("".join(glyphs))
    rows.append(f"steps: {state.steps_remaining}")
    return "\n".join(rows) + "\n"


def parse_state(text: str) -> GridState:
    lines = [line.rstrip() for line in text.strip().splitlines() if line.strip()]
    if len(lines) < 2 or not lines[-1].startswith("steps:"):  # noqa: PLR2004
        raise InputError("layout text needs grid rows followed by a `steps: N` line")
    try:
        steps = int(lines[-1].split(":", 1)[1])
    except ValueError as ex:
        raise InputError(f"bad steps line {lines[-1]!r}") from ex
    grid = lines[:-1]
    width = len(grid[0])
    if any(len(row) != width for row in grid):
        raise InputError("layout rows differ in width")

    agent: Cell | None = None
    goals: set[Cell] = set()
    walls: set[Cell] = set()
    for row, line in enumerate(grid):
        for col, glyph in enumerate(line):
            cell = (row, col)
            if glyph in (GLYPH_AGENT, GLYPH_AGENT_ON_GOAL):
                if agent is not None:
                    raise InputError("layout has more than one agent")
                agent = cell
                if glyph == GLYPH_AGENT_ON_GOAL:
                    goals.add(cell)
            elif glyph == GLYPH_GOAL:
                goals.add(cell)
            elif glyph == GLYPH_WALL:
                walls.add(cell)
            elif glyph != GLYPH_EMPTY:
                raise InputError(f"unknown glyph {glyph!r} at {cell}")
    if agent is None:
        raise InputError("layout has no agent")
    return GridState(len(grid), width, agent, frozenset(goals), frozenset(walls), steps)
