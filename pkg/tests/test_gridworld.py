import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpnlab.errors import GenerationError, InputError, UsageError
from vpnlab.gridworld import (
    GridConfig,
    GridState,
    Option,
    discounted_sum,
    execute_option,
    format_state,
    generate_episode,
    is_terminal,
    observe,
    parse_state,
    play_episode,
    reachable_cells,
    variant_config,
)

CORRIDOR = """\
#####G
A....G
#####.
steps: 10
"""

BRANCH = """\
###.##
A....G
######
steps: 10
"""


def test_corridor_option_runs_to_the_end() -> None:
    state = parse_state(CORRIDOR)
    config = GridConfig(width=6, height=3)
    outcome = execute_option(state, Option.RIGHT, config)
    assert outcome.next_state.agent == (1, 5)
    assert outcome.steps == 5
    assert outcome.per_step_rewards == pytest.approx((-0.2, -0.2, -0.2, -0.2, 1.8))
    assert outcome.reward == pytest.approx(discounted_sum(outcome.per_step_rewards, 0.98))
    assert outcome.discount == pytest.approx(0.98**5)
    assert outcome.goals_collected == 1
    assert outcome.next_state.steps_remaining == 5
    assert not outcome.terminal


def test_option_stops_at_crossing_branch() -> None:
    outcome = execute_option(parse_state(BRANCH), Option.RIGHT, GridConfig(width=6, height=3))
    assert outcome.next_state.agent == (1, 3)
    assert outcome.steps == 3


def test_option_is_cut_by_time_limit() -> None:
    state = parse_state(CORRIDOR.replace("steps: 10", "steps: 3"))
    outcome = execute_option(state, Option.RIGHT, GridConfig(width=6, height=3))
    assert outcome.next_state.agent == (1, 3)
    assert outcome.steps == 3
    assert outcome.terminal


def test_blocked_option_costs_one_step() -> None:
    state = parse_state(CORRIDOR)
    outcome = execute_option(state, Option.LEFT, GridConfig(width=6, height=3))
    assert outcome.next_state.agent == state.agent
    assert outcome.steps == 1
    assert outcome.reward == pytest.approx(-0.2)


def test_clearing_the_last_goal_ends_the_episode() -> None:
    state = parse_state(CORRIDOR.replace("#####G", "######"))
    config = GridConfig(width=6, height=3)
    outcome = execute_option(state, Option.RIGHT, config)
    assert outcome.terminal
    assert not outcome.next_state.goals
    keep_going = GridConfig(width=6, height=3, end_on_clear=False)
    assert not execute_option(state, Option.RIGHT, keep_going).terminal


@settings(max_examples=60, deadline=None)
@given(row=st.integers(0, 5), col=st.integers(0, 5), option=st.sampled_from(list(Option)))
def test_open_grid_options_move_one_cell(row: int, col: int, option: Option) -> None:
    state = GridState(6, 6, (row, col), frozenset({(5, 5) if (row, col) != (5, 5) else (0, 0)}), frozenset(), 8)
    outcome = execute_option(state, option, GridConfig(width=6, height=6))
    d_row, d_col = option.delta
    target = (row + d_row, col + d_col)
    expected = target if state.is_open(target) else (row, col)
    assert outcome.next_state.agent == expected
    assert outcome.steps == 1


def test_execute_on_terminal_state_fails(open_state: GridState) -> None:
    config = GridConfig(width=6, height=6)
    finished = GridState(6, 6, open_state.agent, open_state.goals, open_state.walls, 0)
    with pytest.raises(UsageError):
        execute_option(finished, Option.UP, config)


def test_stochastic_dynamics_need_rng(open_state: GridState) -> None:
    with pytest.raises(UsageError):
        execute_option(open_state, Option.UP, GridConfig(width=6, height=6, stochastic=True))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_stochastic_outcome_identities(seed: int) -> None:
    config = GridConfig(stochastic=True)
    rng = np.random.default_rng(seed)
    state = generate_episode(config, rng)
    option = Option(int(rng.integers(4)))
    outcome = execute_option(state, option, config, rng)
    assert outcome.steps == len(outcome.per_step_rewards)
    assert 1 <= outcome.steps <= state.steps_remaining
    assert outcome.next_state.steps_remaining == state.steps_remaining - outcome.steps
    assert len(outcome.next_state.goals) == len(state.goals) - outcome.goals_collected
    assert outcome.reward == pytest.approx(discounted_sum(outcome.per_step_rewards, config.discount))
    assert outcome.terminal == is_terminal(outcome.next_state, config)


def test_stochastic_outcome_is_reproducible() -> None:
    config = GridConfig(stochastic=True)
    state = generate_episode(config, np.random.default_rng(4))
    first = execute_option(state, Option.DOWN, config, np.random.default_rng(9))
    second = execute_option(state, Option.DOWN, config, np.random.default_rng(9))
    assert first == second


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), variant=st.sampled_from(["original", "fewer_goals", "more_walls"]))
def test_generated_layouts_are_valid(seed: int, variant: str) -> None:
    config = variant_config(GridConfig(), variant, stochastic=False)
    state = generate_episode(config, np.random.default_rng(seed))
    assert len(state.goals) == config.n_goals
    assert len(state.walls) == config.n_walls
    assert state.agent not in state.walls | state.goals
    assert not state.goals & state.walls
    assert state.goals <= reachable_cells(state)
    assert state.steps_remaining == config.time_limit
    assert parse_state(format_state(state)) == state


def test_generation_is_seeded() -> None:
    config = GridConfig()
    assert generate_episode(config, np.random.default_rng(7)) == generate_episode(config, np.random.default_rng(7))


def test_generation_gives_up_after_max_attempts() -> None:
    with pytest.raises(GenerationError):
        generate_episode(GridConfig(max_layout_attempts=0), np.random.default_rng(0))


def test_observation_channels(open_state: GridState) -> None:
    obs = observe(open_state, GridConfig(width=6, height=6, time_limit=16))
    assert obs.grid.shape == (3, 6, 6)
    assert obs.grid[0, 2, 2] == 1
    assert obs.grid[0].sum() == 1
    assert obs.grid[1, 4, 4] == 1
    assert obs.grid[2].sum() == 0
    assert obs.time == pytest.approx(0.5)


def test_play_episode_return_is_undiscounted_sum() -> None:
    config = GridConfig()
    state = generate_episode(config, np.random.default_rng(11))
    result = play_episode(state, config, lambda _: Option.RIGHT)
    assert result.steps_used <= config.time_limit
    assert result.total_return == pytest.approx(2.0 * result.goals_collected - 0.2 * result.steps_used)


def test_policy_returning_none_stops(open_state: GridState) -> None:
    result = play_episode(open_state, GridConfig(width=6, height=6), lambda _: None)
    assert result.total_return == 0.0
    assert result.options == ()


@pytest.mark.parametrize(
    "text",
    [
        "A..\n...\n",
        "A.A\n...\nsteps: 3\n",
        "A.x\n...\nsteps: 3\n",
        "...\n...\nsteps: 3\n",
        "A..\n..\nsteps: 3\n",
        "A..\nsteps: many\n",
    ],
)
def test_parse_rejects_bad_layouts(text: str) -> None:
    with pytest.raises(InputError):
        parse_state(text)


def test_agent_on_goal_glyph_round_trips() -> None:
    state = parse_state("@.G\n...\nsteps: 4\n")
    assert state.agent in state.goals
    assert format_state(state) == "@.G\n...\nsteps: 4\n"


def test_config_validation() -> None:
    with pytest.raises(InputError):
        GridConfig(width=3, height=3, n_goals=5, n_walls=4).validate()
    with pytest.raises(InputError):
        GridConfig(discount=0.0).validate()
    with pytest.raises(InputError):
        variant_config(GridConfig(), "crowded", stochastic=False)
    assert variant_config(GridConfig(), "more_walls", stochastic=True).n_walls == 18
