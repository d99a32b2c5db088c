import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpnlab.errors import InputError
from vpnlab.planner import (
    TabularCore,
    path_returns,
    plan,
    plan_batch,
    q_plan,
    schedule_width,
    uniform_average_check,
)
from vpnlab.utils.verify import recursive_q


def random_core(seed: int, n_states: int = 6) -> TabularCore:
    return TabularCore.random(n_states, 4, np.random.default_rng(seed))


def walk(node):  # type: ignore[no-untyped-def]
    yield node
    for child in node.children:
        yield from walk(child)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), d=st.integers(1, 5), state=st.integers(0, 5))
def test_full_width_plan_matches_recursion(seed: int, d: int, state: int) -> None:
    core = random_core(seed)
    result = plan(np.array(state), d, core, widths=(4,))
    expected = [recursive_q(core, state, option, d) for option in range(4)]
    np.testing.assert_allclose(result.q_values, expected, rtol=0, atol=1e-9)
    assert result.best_option == int(np.argmax(expected))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), d=st.integers(1, 5))
def test_backed_up_value_is_path_average(seed: int, d: int) -> None:
    core = random_core(seed)
    result = plan(np.array(0), d, core)
    for node in walk(result.trace):
        returns = path_returns(node)
        assert len(returns) == (node.depth if node.depth > 1 else 1)
        assert uniform_average_check(node) == pytest.approx(node.backed_up_value, abs=1e-9)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_best_path_has_d_nodes(d: int) -> None:
    result = plan(np.array(1), d, random_core(3))
    assert result.trace.depth == d + 1
    path = result.trace.best_path()
    assert len(path) == d
    assert path[0].option == result.best_option
    assert [node.depth for node in path] == list(range(d, 0, -1))


def test_widths_prune_below_root() -> None:
    result = plan(np.array(2), 3, random_core(5), widths=(4, 1))
    assert len(result.trace.children) == 4
    for child in result.trace.children:
        assert len(child.children) == 1
        grandchild = child.children[0]
        assert len(grandchild.children) == 1
        assert grandchild.children[0].children == []


def test_pruned_child_is_the_best_one_step_option() -> None:
    core = random_core(9)
    result = plan(np.array(0), 2, core, widths=(4, 1))
    for child in result.trace.children:
        successor = int(core.next_state[0, child.option])
        one_step = core.reward[successor] + core.discount[successor] * core.values[core.next_state[successor]]
        assert child.children[0].option == int(np.argmax(one_step))


def test_schedule_repeats_last_width() -> None:
    widths = (4, 2, 1)
    assert schedule_width(widths, 0, 4) == 4
    assert schedule_width(widths, 1, 4) == 2
    assert schedule_width(widths, 2, 4) == 1
    assert schedule_width(widths, 7, 4) == 1
    assert schedule_width((), 3, 4) == 4


def test_root_entry_of_the_schedule_is_ignored() -> None:
    core = random_core(11)
    assert schedule_width((1, 2), 0, 4) == 4
    narrow_root = plan(np.array(2), 3, core, widths=(1, 4))
    full = plan(np.array(2), 3, core, widths=(4,))
    np.testing.assert_array_equal(narrow_root.q_values, full.q_values)
    assert len(narrow_root.trace.children) == 4


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_uniform_model_closed_form(d: int) -> None:
    uniform = TabularCore(
        reward=np.ones((3, 4)),
        discount=np.full((3, 4), 0.5),
        next_state=np.array([[1, 2, 0, 1]] * 3, dtype=np.intp),
        values=np.full(3, 2.0),
    )
    result = plan(np.array(0), d, uniform)
    np.testing.assert_allclose(result.q_values, 2.0, rtol=0, atol=1e-12)
    assert result.trace.backed_up_value == pytest.approx(2.0, abs=1e-12)
    q, _ = q_plan(np.array(0), 3, d, uniform)
    assert q == pytest.approx(2.0, abs=1e-12)


def test_ties_go_to_lowest_option() -> None:
    flat = TabularCore(
        reward=np.zeros((2, 4)),
        discount=np.full((2, 4), 0.9),
        next_state=np.zeros((2, 4), dtype=np.intp),
        values=np.zeros(2),
    )
    result = plan(np.array(1), 3, flat)
    assert result.best_option == 0
    assert result.trace.best_path()[0].option == 0


def test_batch_plans_match_single_plans() -> None:
    core = random_core(12)
    states = np.arange(6)
    batch = plan_batch(states, 3, core)
    for state, result in zip(states, batch, strict=True):
        single = plan(np.array(state), 3, core)
        np.testing.assert_allclose(result.q_values, single.q_values)
        assert result.best_option == single.best_option


def test_q_plan_reads_root_child() -> None:
    core = random_core(4)
    q, node = q_plan(np.array(3), 2, 2, core, widths=(4,))
    assert node.option == 2
    assert q == pytest.approx(recursive_q(core, 3, 2, 2))


@pytest.mark.parametrize(
    ("d", "widths", "option"),
    [(0, (4,), 0), (2, (5,), 0), (2, (0, 1), 0), (2, (4,), 4)],
)
def test_bad_planner_arguments(d: int, widths: tuple[int, ...], option: int) -> None:
    with pytest.raises(InputError):
        q_plan(np.array(0), option, d, random_core(0), widths)


def test_trace_serializes_to_plain_values() -> None:
    document = plan(np.array(0), 2, random_core(1)).trace.to_dict()
    assert document["option"] is None
    assert document["depth"] == 3
    assert len(document["children"]) == 4
    assert set(document["children"][0]) >= {"option", "reward", "discount", "value", "q", "children"}
