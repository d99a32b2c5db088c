"""
Property suite behind `vpnlab verify`.

Each check compares a production routine against an independent slow
reference (nested loops, finite differences, plain recursion, primitive-step
simulation, exhaustive enumeration) and reports the largest error it saw.
"""

import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, replace

import numpy as np

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.baselines import build_model
from vpnlab.config import vpnlab_precision
from vpnlab.gridworld import (
    ENV_VARIANTS,
    Cell,
    GridConfig,
    GridState,
    Option,
    execute_option,
    generate_episode,
    is_terminal,
    variant_config,
)
from vpnlab.netcore.gradcheck import FULL_LOSS_ATOL, FULL_LOSS_STEP, check_gradients
from vpnlab.netcore.layers import (
    Conv2d,
    ConvTranspose2d,
    Linear,
    OptionConv2d,
    conv2d,
    conv_padding,
    conv_transpose2d,
    deconv_output_size,
    fully_connected,
    option_conv2d,
)
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import (
    Array,
    Tensor,
    add,
    concat,
    constant,
    elu,
    mul,
    reshape,
    sigmoid,
    square,
    sub,
    sum_all,
    take,
)
from vpnlab.oracles import OptionGraph, greedy_path, shortest_path_plan
from vpnlab.planner import PlanNode, TabularCore, plan, uniform_average_check
from vpnlab.utils.vpnlab_types import VerifyRow
from vpnlab.vpn_model import tiny_model_config

logger: VpnlabLogger = vpnlab_logger.init(__name__)

GRADIENT_TOLERANCE: float = 1e-6
PLANNER_TOLERANCE: float = 1e-9
SEARCH_TOLERANCE: float = 1e-9


@dataclass(frozen=True)
class VerifyScale:
    grad_seeds: int
    grad_samples: int
    planner_models: int
    planner_max_depth: int
    env_states: int
    search_instances: int


FULL_SCALE = VerifyScale(
    grad_seeds=20,
    grad_samples=3,
    planner_models=1000,
    planner_max_depth=5,
    env_states=10_000,
    search_instances=500,
)
QUICK_SCALE = VerifyScale(
    grad_seeds=2,
    grad_samples=2,
    planner_models=50,
    planner_max_depth=4,
    env_states=300,
    search_instances=20,
)
SCALES: dict[str, VerifyScale] = {"full": FULL_SCALE, "quick": QUICK_SCALE}


def _row(check: str, max_error: float, tolerance: float, detail: str) -> VerifyRow:
    return VerifyRow(check=check, passed=bool(max_error <= tolerance), max_error=float(max_error), detail=detail)


# reference layers


def naive_conv2d(x: Array, weights: Array, bias: Array, stride: int) -> Array:
    n, _, h, w = x.shape
    filters, _, kernel, _ = weights.shape
    low, high = conv_padding(kernel, stride)
    padded = np.pad(x, ((0, 0), (0, 0), (low, high), (low, high)))
    out_h = (h + low + high - kernel) // stride + 1
    out_w = (w + low + high - kernel) // stride + 1
    out = np.zeros((n, filters, out_h, out_w))
    for b in range(n):
        for f in range(filters):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[b, :, i * stride : i * stride + kernel, j * stride : j * stride + kernel]
                    out[b, f, i, j] = float(np.sum(patch * weights[f])) + bias[f]
    return out


def naive_conv_transpose2d(x: Array, weights: Array, bias: Array, stride: int) -> Array:
    n, in_channels, h, w = x.shape
    _, filters, kernel, _ = weights.shape
    full = np.zeros((n, filters, (h - 1) * stride + kernel, (w - 1) * stride + kernel))
    for b in range(n):
        for c in range(in_channels):
            for i in range(h):
                for j in range(w):
                    for f in range(filters):
                        full[b, f, i * stride : i * stride + kernel, j * stride : j * stride + kernel] += (
                            x[b, c, i, j] * weights[c, f]
                        )
    low, _ = conv_padding(kernel, stride)
    out_h = deconv_output_size(h, kernel, stride)
    out_w = deconv_output_size(w, kernel, stride)
    return full[:, :, low : low + out_h, low : low + out_w] + bias[None, :, None, None]


def naive_fully_connected(x: Array, weights: Array, bias: Array) -> Array:
    out = np.zeros((x.shape[0], weights.shape[1]))
    for b in range(x.shape[0]):
        for m in range(weights.shape[1]):
            out[b, m] = sum(x[b, d] * weights[d, m] for d in range(weights.shape[0])) + bias[m]
    return out


def _max_scaled_error(actual: Array, expected: Array) -> float:
    return float(np.max(np.abs(actual - expected)) / (1.0 + np.max(np.abs(expected))))


def check_layer_forward(seeds: int) -> VerifyRow:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 100])
        for stride, kernel, size in ((1, 3, 5), (2, 4, 6)):
            x = rng.normal(size=(2, 3, size, size))
            w = rng.normal(size=(4, 3, kernel, kernel))
            b = rng.normal(size=4)
            got = conv2d(constant(x), constant(w), constant(b), stride).data
            worst = max(worst, _max_scaled_error(got, naive_conv2d(x, w, b, stride)))

            bank = rng.normal(size=(4, 4, 3, kernel, kernel))
            bias_bank = rng.normal(size=(4, 4))
            options = rng.integers(4, size=2)
            got = option_conv2d(constant(x), constant(bank), constant(bias_bank), options, stride).data
            expected = np.concatenate(
                [naive_conv2d(x[i : i + 1], bank[o], bias_bank[o], stride) for i, o in enumerate(options)]
            )
            worst = max(worst, _max_scaled_error(got, expected))

            small = rng.normal(size=(2, 3, 3, 3))
            wt = rng.normal(size=(3, 4, kernel, kernel))
            got = conv_transpose2d(constant(small), constant(wt), constant(b), stride).data
            worst = max(worst, _max_scaled_error(got, naive_conv_transpose2d(small, wt, b, stride)))

        flat = rng.normal(size=(3, 5))
        wf = rng.normal(size=(5, 2))
        bf = rng.normal(size=2)
        got = fully_connected(constant(flat), constant(wf), constant(bf)).data
        worst = max(worst, _max_scaled_error(got, naive_fully_connected(flat, wf, bf)))
    return _row("layer forward vs nested loops", worst, 1e-10, f"{seeds} seeds")


# gradient checks


def _layer_losses(rng: np.random.Generator) -> Iterator[tuple[str, ParamStore, Callable[[], Tensor]]]:
    def make(name: str, input_shape: tuple[int, ...]) -> tuple[ParamStore, Tensor]:
        store = ParamStore(np.dtype(np.float64))
        return store, store.add(f"{name}.input", input_shape, fan_in=1, rng=rng)

    store, x = make("ops", (3, 4))
    y = store.add("ops.other", (3, 4), fan_in=1, rng=rng)
    weights = constant(rng.normal(size=(6, 4)))

    def ops_loss() -> Tensor:
        mixed = mul(elu(sub(x, y)), sigmoid(add(x, y)))
        stacked = concat([mixed, take(y, [2, 0, 2])], axis=0)
        return sum_all(mul(square(reshape(stacked, (6, 4))), weights))

    yield "tensor ops", store, ops_loss

    for stride, kernel in ((1, 3), (2, 4)):
        store, x_conv = make("conv", (2, 3, 6, 6))
        conv = Conv2d(store, "conv", 3, 4, kernel, stride, rng)
        r_conv = rng.normal(size=(2, 4, *([6] * 2 if stride == 1 else [2] * 2)))
        yield f"conv2d stride {stride}", store, lambda c=conv, v=x_conv, r=r_conv: sum_all(mul(square(c(v)), constant(r)))

        store, x_opt = make("option_conv", (3, 3, 6, 6))
        option_layer = OptionConv2d(store, "option_conv", 4, 3, 2, kernel, stride, rng)
        options = rng.integers(4, size=3)
        yield (
            f"option_conv2d stride {stride}",
            store,
            lambda c=option_layer, v=x_opt, o=options: sum_all(square(c(v, o))),
        )

        store, x_deconv = make("deconv", (2, 3, 3, 3))
        deconv = ConvTranspose2d(store, "deconv", 3, 2, kernel, stride, rng)
        yield f"conv_transpose2d stride {stride}", store, lambda c=deconv, v=x_deconv: sum_all(square(c(v)))

    store, x_fc = make("fc", (4, 5))
    linear = Linear(store, "fc", 5, 3, rng)
    yield "fully_connected", store, lambda: sum_all(square(linear(x_fc)))


def _segment(rng: np.random.Generator, length: int, size: int) -> dict[str, Array]:
    return {
        "grids": rng.integers(0, 2, size=(length + 1, 3, size, size)).astype(np.float64),
        "times": rng.uniform(0.1, 1.0, size=length + 1),
        "options": rng.integers(4, size=length),
        "returns": rng.normal(size=length + 1),
        "rewards": rng.normal(size=length),
        "steps": rng.integers(1, 4, size=length).astype(np.float64),
    }


def _model_losses(rng: np.random.Generator) -> Iterator[tuple[str, ParamStore, Callable[[], Tensor]]]:
    config = tiny_model_config()
    for kind, k in (("vpn", 2), ("dqn", 1), ("opn", 1)):
        model = build_model(replace(config, kind=kind), rng, check_param_count=False)
        seg = _segment(rng, 3, config.height)

        def segment_loss(m=model, s=seg, depth=k) -> Tensor:  # type: ignore[no-untyped-def]
            return m.segment_loss(
                s["grids"], s["times"], s["options"], s["returns"], s["rewards"], s["steps"], depth
            ).total

        yield f"{kind} segment loss", model.params, segment_loss
        if model.has_outcome_model:

            def replay_loss(m=model, s=seg) -> Tensor:  # type: ignore[no-untyped-def]
                return m.replay_loss(s["grids"][:3], s["times"][:3], s["options"], s["rewards"], s["steps"]).total

            yield f"{kind} replay loss", model.params, replay_loss


def check_gradient_suite(seeds: int, samples: int) -> list[VerifyRow]:
    """Central finite differences against backward for every layer and every model loss."""
    worst: dict[str, float] = {}
    with vpnlab_precision(64):
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 200])
            for source, h, atol in ((_layer_losses, 1e-5, 0.0), (_model_losses, FULL_LOSS_STEP, FULL_LOSS_ATOL)):
                for name, store, loss_fn in source(rng):
                    result = check_gradients(loss_fn, store, h=h, samples=samples, rng=rng, atol=atol)
                    worst[name] = max(worst.get(name, 0.0), result.max_error)
    return [
        _row(f"gradient: {name}", error, GRADIENT_TOLERANCE, f"{seeds} seeds, {samples} entries per parameter")
        for name, error in worst.items()
    ]


# planner


def recursive_value(core: TabularCore, state: int, d: int) -> float:
    """V^d by direct recursion over every option."""
    if d == 1:
        return float(core.values[state])
    best = max(recursive_q(core, state, option, d - 1) for option in range(core.n_options))
    return float(core.values[state]) / d + (d - 1) / d * best


def recursive_q(core: TabularCore, state: int, option: int, d: int) -> float:
    successor = int(core.next_state[state, option])
    return float(core.reward[state, option] + core.discount[state, option] * recursive_value(core, successor, d))


def _walk(node: PlanNode) -> Iterator[PlanNode]:
    yield node
    for child in node.children:
        yield from _walk(child)


def check_planner(models: int, max_depth: int) -> list[VerifyRow]:
    q_error = 0.0
    average_error = 0.0
    for seed in range(models):
        rng = np.random.default_rng([seed, 300])
        core = TabularCore.random(6, 4, rng)
        d = int(rng.integers(1, max_depth + 1))
        state = np.array(int(rng.integers(6)))
        result = plan(state, d, core, widths=(core.n_options,))
        for option in range(core.n_options):
            expected = recursive_q(core, int(state), option, d)
            q_error = max(q_error, abs(float(result.q_values[option]) - expected))
        for node in _walk(result.trace):
            average_error = max(average_error, abs(uniform_average_check(node) - node.backed_up_value))
    detail = f"{models} random tabular models, d <= {max_depth}"
    return [
        _row("planner vs recursive Q^d", q_error, PLANNER_TOLERANCE, detail),
        _row("planner uniform path average", average_error, PLANNER_TOLERANCE, detail),
    ]


# environment


def _open(state: GridState, cell: Cell) -> bool:
    row, col = cell
    return 0 <= row < state.height and 0 <= col < state.width and cell not in state.walls


def brute_force_option(state: GridState, option: Option, config: GridConfig) -> tuple[Cell, int, float]:
    """Deterministic option run, one primitive step at a time."""
    d_row, d_col = {Option.UP: (-1, 0), Option.DOWN: (1, 0), Option.LEFT: (0, -1), Option.RIGHT: (0, 1)}[option]
    cell = state.agent
    goals = set(state.goals)
    remaining = state.steps_remaining
    rewards: list[float] = []
    while True:
        reward = -config.step_penalty
        if cell in goals:
            goals.discard(cell)
            reward += config.goal_reward
        ahead = (cell[0] + d_row, cell[1] + d_col)
        if not _open(state, ahead):
            rewards.append(reward)
            break
        cell = ahead
        if cell in goals:
            goals.discard(cell)
            reward += config.goal_reward
        rewards.append(reward)
        remaining -= 1
        if remaining == 0 or (config.end_on_clear and not goals):
            break
        beyond = (cell[0] + d_row, cell[1] + d_col)
        sides = ((cell[0] + d_col, cell[1] + d_row), (cell[0] - d_col, cell[1] - d_row))
        if not _open(state, beyond) or any(_open(state, side) for side in sides):
            break
    total = 0.0
    for i, reward in enumerate(rewards):
        total += config.discount**i * reward
    return cell, len(rewards), total


def _random_state(rng: np.random.Generator, stochastic: bool) -> tuple[GridState, GridConfig]:
    variant = list(ENV_VARIANTS)[int(rng.integers(len(ENV_VARIANTS)))]
    config = variant_config(GridConfig(), variant, stochastic)
    state = generate_episode(config, rng)
    steps = int(rng.integers(1, config.time_limit + 1))
    goals = frozenset(goal for goal in state.goals if rng.random() < 0.7) or state.goals  # noqa: PLR2004
    return replace(state, steps_remaining=steps, goals=goals), config


def check_environment(states: int) -> list[VerifyRow]:
    worst = 0.0
    mismatches = 0
    for seed in range(states):
        rng = np.random.default_rng([seed, 400])
        state, config = _random_state(rng, stochastic=False)
        option = Option(int(rng.integers(4)))
        outcome = execute_option(state, option, config)
        cell, steps, reward = brute_force_option(state, option, config)
        if cell != outcome.next_state.agent or steps != outcome.steps:
            mismatches += 1
        worst = max(worst, abs(reward - outcome.reward))
    rows = [
        _row(
            "execute_option vs primitive steps",
            worst if mismatches == 0 else math.inf,
            0.0,
            f"{states} deterministic states, {mismatches} cell/step mismatches",
        )
    ]

    worst = 0.0
    broken = 0
    for seed in range(states):
        rng = np.random.default_rng([seed, 401])
        state, config = _random_state(rng, stochastic=True)
        outcome = execute_option(state, Option(int(rng.integers(4))), config, rng)
        expected_reward = sum(config.discount**i * r for i, r in enumerate(outcome.per_step_rewards))
        worst = max(
            worst,
            abs(outcome.reward - expected_reward),
            abs(outcome.discount - config.discount**outcome.steps),
        )
        identities = (
            outcome.steps == len(outcome.per_step_rewards),
            1 <= outcome.steps <= state.steps_remaining,
            outcome.next_state.steps_remaining == state.steps_remaining - outcome.steps,
            len(outcome.next_state.goals) == len(state.goals) - outcome.goals_collected,
            outcome.terminal == is_terminal(outcome.next_state, config),
        )
        broken += not all(identities)
    rows.append(
        _row(
            "stochastic outcome identities",
            worst if broken == 0 else math.inf,
            1e-12,
            f"{states} stochastic outcomes, {broken} broken",
        )
    )
    return rows


def bellman_ford_first_goal(state: GridState, config: GridConfig) -> int | None:
    """Fewest primitive steps until some goal is entered, by edge relaxation over option runs."""
    graph = OptionGraph(state, config)
    dist: dict[Cell, int] = {state.agent: 0}
    best: int | None = None
    for _ in range(state.height * state.width + 1):
        changed = False
        for cell, cost in list(dist.items()):
            for option in Option:
                path = graph.path(cell, option)
                for i, target in enumerate(path):
                    if target in state.goals:
                        best = cost + i + 1 if best is None else min(best, cost + i + 1)
                        break
                if path and cost + len(path) < dist.get(path[-1], math.inf):
                    dist[path[-1]] = cost + len(path)
                    changed = True
        if not changed:
            break
    return best


def check_greedy(states: int) -> VerifyRow:
    worst = 0.0
    for seed in range(states):
        rng = np.random.default_rng([seed, 500])
        state, config = _random_state(rng, stochastic=False)
        expected = bellman_ford_first_goal(state, config)
        found = greedy_path(state, config)
        if (expected is None) != (found is None):
            worst = math.inf
        elif expected is not None and found is not None:
            worst = max(worst, abs(found[1] - expected))
    return _row("greedy oracle vs Bellman-Ford", worst, 0.0, f"{states} deterministic states")


def enumerate_best_return(state: GridState, config: GridConfig) -> float:
    """Best undiscounted return over every option sequence, stopping allowed."""
    if is_terminal(state, config):
        return 0.0
    best = 0.0
    for option in Option:
        outcome = execute_option(state, option, config)
        value = math.fsum(outcome.per_step_rewards) + enumerate_best_return(outcome.next_state, config)
        best = max(best, value)
    return best


def check_search(instances: int) -> VerifyRow:
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng([seed, 600])
        config = GridConfig(
            width=6,
            height=6,
            n_goals=int(rng.integers(1, 5)),
            n_walls=int(rng.integers(0, 9)),
            time_limit=int(rng.integers(3, 8)),
        )
        state = generate_episode(config, rng)
        found = shortest_path_plan(state, config)
        worst = max(worst, abs(found.predicted_return - enumerate_best_return(state, config)))
        replayed: list[float] = []
        current = state
        for option in found.options:
            outcome = execute_option(current, option, config)
            replayed.extend(outcome.per_step_rewards)
            current = outcome.next_state
        worst = max(worst, abs(math.fsum(replayed) - found.predicted_return))
    return _row("shortest-path search vs enumeration", worst, SEARCH_TOLERANCE, f"{instances} 6x6 instances")


def run_verify(scale: VerifyScale = FULL_SCALE, progress: Callable[[str], None] | None = None) -> list[VerifyRow]:
    stages: list[tuple[str, Callable[[], list[VerifyRow]]]] = [
        ("layers", lambda: [check_layer_forward(scale.grad_seeds)]),
        ("gradients", lambda: check_gradient_suite(scale.grad_seeds, scale.grad_samples)),
        ("planner", lambda: check_planner(scale.planner_models, scale.planner_max_depth)),
        ("environment", lambda: check_environment(scale.env_states)),
        ("greedy oracle", lambda: [check_greedy(scale.env_states // 10 or 1)]),
        ("search oracle", lambda: [check_search(scale.search_instances)]),
    ]
    rows: list[VerifyRow] = []
    for name, stage in stages:
        if progress is not None:
            progress(name)
        with vpnlab_precision(64):
            stage_rows = stage()
        for row in stage_rows:
            if not row["passed"]:
                logger.warning(f"verify: {row['check']} failed, max error {row['max_error']:.3g}")
        rows.extend(stage_rows)
    return rows

