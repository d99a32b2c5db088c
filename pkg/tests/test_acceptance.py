from collections.abc import Callable
from pathlib import Path

import pytest

from vpnlab.gridworld import GridConfig, variant_config
from vpnlab.oracles import DEFAULT_NODE_BUDGET
from vpnlab.utils.experiments import build_spec, cmd_depth_sweep, cmd_eval, cmd_train, oracle_means
from vpnlab.utils.helpers import SeedStreams

WriteConfig = Callable[..., Path]

EPISODES = 10_000

# the desk procedure from the README, shrunk to a 6x6 grid and a few dozen steps
DESK_SMOKE = (
    "env.width = 6",
    "env.height = 6",
    "env.n_goals = 3",
    "env.n_walls = 4",
    "env.time_limit = 8",
    "model.encoder_channels = 3, 3",
    "model.state_channels = 4",
    "model.outcome_hidden = 5",
    "model.value_hidden = 5",
    "model.decoder_channels = 4, 3, 3",
    "model.dqn_hidden = 8",
    "model.check_param_count = false",
    "train.total_steps = 30",
    "train.depth = 3",
    "train.widths = 4, 4, 1",
    "train.workers = 1",
    "train.n = 3",
    "train.replay_size = 16",
    "train.eval_interval = 1000",
    "train.final_eval_episodes = 2",
    "train.log_interval = 10",
    "eval.episodes = 4",
    "eval.d_min = 1",
    "eval.d_max = 3",
)
SEEDS = (0, 1)


@pytest.mark.slow
@pytest.mark.parametrize(
    ("variant", "stochastic", "greedy", "shortest"),
    [
        ("original", False, 8.61, 9.71),
        ("original", True, 7.58, 7.64),
        ("fewer_goals", False, 5.13, 5.82),
    ],
)
def test_oracle_means_on_full_collect(variant: str, stochastic: bool, greedy: float, shortest: float) -> None:
    env = variant_config(GridConfig(), variant, stochastic)
    greedy_mean, shortest_mean = oracle_means(env, EPISODES, SeedStreams(0), DEFAULT_NODE_BUDGET)
    assert greedy_mean == pytest.approx(greedy, abs=0.15)
    assert shortest_mean == pytest.approx(shortest, abs=0.15)


def test_desk_procedure_runs_end_to_end(tmp_path: Path, write_config: WriteConfig) -> None:
    configs = {
        kind: write_config(*DESK_SMOKE, f"model.kind = {kind}", name=f"{kind}.cfg") for kind in ("vpn", "dqn")
    }
    for kind, config in configs.items():
        reports = cmd_train(build_spec("train", config, SEEDS, tmp_path / kind))
        assert len(reports) == len(SEEDS)
        assert all(report.global_step >= 30 for report in reports)

    lowest, highest = -0.2 * 8, 2.0 * 3
    for seed in SEEDS:
        checkpoints = {kind: tmp_path / kind / f"seed-{seed}" / "checkpoint.ckpt" for kind in configs}
        rows = {
            kind: cmd_eval(build_spec("eval", configs[kind], (seed,)), checkpoints[kind], oracle=True)
            for kind in configs
        }
        assert rows["vpn"]["depth"] == 3
        assert rows["vpn"]["oracle_mean"] == rows["dqn"]["oracle_mean"]
        for row in rows.values():
            assert row["episodes"] == 4
            assert lowest <= row["mean_return"] <= highest

        sweep = cmd_depth_sweep(build_spec("depth-sweep", configs["vpn"], (seed,)), checkpoints["vpn"])
        assert [row["d_test"] for row in sweep] == [1, 2, 3]
        assert sweep[-1]["mean_return"] == rows["vpn"]["mean_return"]
        assert all(lowest <= row["mean_return"] <= highest for row in sweep)
