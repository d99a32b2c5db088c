import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpnlab.errors import BudgetExceededError
from vpnlab.gridworld import GridConfig, GridState, Option, generate_episode, parse_state
from vpnlab.oracles import OptionGraph, greedy_option, greedy_path, run_oracle_episode, shortest_path_plan
from vpnlab.utils.verify import bellman_ford_first_goal, enumerate_best_return

SMALL = GridConfig(width=6, height=6, n_goals=3, n_walls=4, time_limit=8)

CORRIDOR = """\
#####G
A....G
#####.
steps: 10
"""


def test_greedy_path_through_corridor() -> None:
    state = parse_state(CORRIDOR)
    assert greedy_path(state, GridConfig(width=6, height=3)) == ((Option.RIGHT,), 5)


def test_greedy_ties_fall_to_lowest_option(open_state: GridState) -> None:
    found = greedy_path(open_state, SMALL)
    assert found is not None
    options, steps = found
    assert steps == 4
    assert options == (Option.DOWN, Option.DOWN, Option.RIGHT, Option.RIGHT)
    assert greedy_option(open_state, SMALL) == Option.DOWN


def test_greedy_without_goals(open_state: GridState) -> None:
    empty = GridState(6, 6, open_state.agent, frozenset(), frozenset(), 8)
    assert greedy_path(empty, SMALL) is None
    assert greedy_option(empty, SMALL) == Option.UP


def test_oracles_on_open_grid(open_state: GridState) -> None:
    plan = shortest_path_plan(open_state, SMALL)
    assert plan.predicted_return == pytest.approx(1.2)
    assert len(plan.options) == 4
    for kind in ("greedy", "shortest"):
        result = run_oracle_episode(kind, open_state, SMALL)
        assert result.total_return == pytest.approx(1.2)
        assert result.goals_collected == 1


def test_unreachable_in_time_means_doing_nothing(open_state: GridState) -> None:
    short = GridState(6, 6, open_state.agent, open_state.goals, open_state.walls, 3)
    assert shortest_path_plan(short, SMALL).options == ()
    for kind in ("greedy", "shortest"):
        assert run_oracle_episode(kind, short, SMALL).total_return == 0.0


def test_search_budget(open_state: GridState) -> None:
    with pytest.raises(BudgetExceededError):
        shortest_path_plan(open_state, SMALL, node_budget=1)


def test_unknown_oracle(open_state: GridState) -> None:
    with pytest.raises(ValueError, match="unknown oracle"):
        run_oracle_episode("random", open_state, SMALL)


def test_blocked_run_costs_one_step() -> None:
    state = parse_state(CORRIDOR)
    graph = OptionGraph(state, GridConfig(width=6, height=3))
    run = graph.run(state.agent, Option.UP, graph.full_mask, 10)
    assert run.steps == 1
    assert run.cells == ()
    assert graph.run_return(run) == pytest.approx(-0.2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_greedy_matches_bellman_ford(seed: int) -> None:
    state = generate_episode(GridConfig(), np.random.default_rng(seed))
    found = greedy_path(state, GridConfig())
    expected = bellman_ford_first_goal(state, GridConfig())
    assert found is not None
    assert found[1] == expected


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_search_matches_enumeration(seed: int) -> None:
    config = GridConfig(width=6, height=6, n_goals=2, n_walls=5, time_limit=5)
    state = generate_episode(config, np.random.default_rng(seed))
    assert shortest_path_plan(state, config).predicted_return == pytest.approx(enumerate_best_return(state, config))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_shortest_never_loses_to_greedy_when_deterministic(seed: int) -> None:
    state = generate_episode(SMALL, np.random.default_rng(seed))
    greedy = run_oracle_episode("greedy", state, SMALL).total_return
    shortest = run_oracle_episode("shortest", state, SMALL)
    assert shortest.total_return >= greedy - 1e-9
    assert shortest.total_return == pytest.approx(shortest_path_plan(state, SMALL).predicted_return)


def test_stochastic_oracles_are_seeded() -> None:
    config = GridConfig(width=6, height=6, n_goals=3, n_walls=4, time_limit=8, stochastic=True)
    state = generate_episode(config, np.random.default_rng(3))
    for kind in ("greedy", "shortest"):
        first = run_oracle_episode(kind, state, config, np.random.default_rng(8))
        second = run_oracle_episode(kind, state, config, np.random.default_rng(8))
        assert first == second
