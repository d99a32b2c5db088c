import threading
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vpnlab.errors import ConfigurationError
from vpnlab.gridworld import GridConfig, Option
from vpnlab.netcore.adam import AdamState
from vpnlab.netcore.tensor import is_grad_enabled, no_grad
from vpnlab.trainer import (
    ReplayBuffer,
    Segment,
    TrainConfig,
    Trainer,
    act,
    compute_targets,
    discounted_targets,
    epsilon_at,
    evaluate,
    fill_replay,
    load_agent,
    replay_outcome_step,
    run_training,
    segment_gradients,
    train_step,
)
from vpnlab.utils.helpers import SeedStreams, read_csv
from vpnlab.vpn_model import ModelConfig, VPNModel


def tiny_train(**overrides: object) -> TrainConfig:
    base = TrainConfig(
        total_steps=12,
        n=3,
        workers=1,
        k=2,
        d_train=2,
        d_test=2,
        widths=(4, 1),
        target_sync=6,
        epsilon_steps=20,
        replay_size=16,
        eval_interval=1_000,
        eval_episodes=0,
        final_eval_episodes=0,
        log_interval=3,
        checkpoint_interval=1_000_000,
        lr=1e-3,
        seed=3,
    )
    return replace(base, **overrides)  # type: ignore[arg-type]


def small_segment(terminal: bool) -> Segment:
    rng = np.random.default_rng(0)
    return Segment(
        grids=rng.integers(0, 2, size=(3, 3, 6, 6)).astype(np.float64),
        times=np.array([1.0, 0.875, 0.75]),
        options=np.array([0, 3]),
        rewards=np.array([-0.2, 1.8]),
        steps=np.array([1, 1]),
        terminal=terminal,
    )


def test_discounted_targets() -> None:
    returns = discounted_targets([1.0, 1.0], [0.98, 1.0], 1.0)
    np.testing.assert_allclose(returns, [2.96, 2.0, 1.0])


def test_epsilon_schedule() -> None:
    config = tiny_train(epsilon_start=1.0, epsilon_end=0.05, epsilon_steps=100)
    assert epsilon_at(0, config) == pytest.approx(1.0)
    assert epsilon_at(50, config) == pytest.approx(0.525)
    assert epsilon_at(100, config) == pytest.approx(0.05)
    assert epsilon_at(10_000, config) == pytest.approx(0.05)


@pytest.mark.parametrize(
    ("overrides", "key"),
    [
        ({"n": 0}, "train.n"),
        ({"workers": 0}, "train.workers"),
        ({"k": 0}, "train.k"),
        ({"epsilon_end": 0.01}, "train.epsilon_end"),
        ({"widths": (4, 5)}, "train.widths"),
        ({"total_steps": -1}, "train.total_steps"),
    ],
)
def test_train_config_validation(overrides: dict[str, object], key: str) -> None:
    with pytest.raises(ConfigurationError) as info:
        tiny_train(**overrides).validate()
    assert info.value.key == key


def test_act_is_greedy_without_exploration(tiny_config: ModelConfig) -> None:
    model = VPNModel(tiny_config, np.random.default_rng(0))
    seg = small_segment(False)
    q = model.q_values(seg.grids[:1], seg.times[:1], 2)[0]
    chosen = act(seg.grids[0], float(seg.times[0]), model, 2, 0.0, np.random.default_rng(1))
    assert chosen == Option(int(np.argmax(q)))
    explored = {act(seg.grids[0], 1.0, model, 2, 1.0, np.random.default_rng(i)) for i in range(80)}
    assert explored == set(Option)


def test_terminal_segment_does_not_bootstrap(tiny_config: ModelConfig) -> None:
    target = VPNModel(tiny_config, np.random.default_rng(0))
    seg = small_segment(True)
    returns = compute_targets(seg, target, 2, 0.98)
    assert returns[-1] == 0.0
    assert returns[0] == pytest.approx(-0.2 + 0.98 * 1.8)


def test_bootstrap_uses_target_planner(tiny_config: ModelConfig) -> None:
    target = VPNModel(tiny_config, np.random.default_rng(0))
    seg = small_segment(False)
    returns = compute_targets(seg, target, 2, 0.98)
    expected = float(np.max(target.q_values(seg.grids[-1:], seg.times[-1:], 2)[0]))
    assert returns[-1] == pytest.approx(expected)


def test_gradients_need_targets(tiny_config: ModelConfig) -> None:
    with pytest.raises(ConfigurationError):
        segment_gradients(small_segment(False), VPNModel(tiny_config, np.random.default_rng(0)), 2)


def test_train_step_lowers_segment_loss(tiny_config: ModelConfig) -> None:
    model = VPNModel(tiny_config, np.random.default_rng(0))
    seg = small_segment(True)
    compute_targets(seg, model, 2, 0.98)
    opt = AdamState(lr=1e-3)
    first = train_step(seg, model, opt, 2)
    for _ in range(30):
        last = train_step(seg, model, opt, 2)
    assert opt.step == 31
    before = first.loss_value + first.loss_reward + first.loss_steps
    after = last.loss_value + last.loss_reward + last.loss_steps
    assert after < before


def test_replay_ring_keeps_newest_entries() -> None:
    buffer = ReplayBuffer(3, (3, 2, 2))
    for i in range(5):
        buffer.add(np.zeros((3, 2, 2)), 1.0, i % 4, float(i), 1)
    assert len(buffer) == 3
    assert sorted(buffer.rewards.tolist()) == [2.0, 3.0, 4.0]
    np.testing.assert_array_equal(buffer.valid_starts(2), [2, 0])
    for seed in range(10):
        index = buffer.sample(2, np.random.default_rng(seed))
        assert buffer.rewards[index[1]] == buffer.rewards[index[0]] + 1.0


def test_zero_capacity_replay_ignores_adds() -> None:
    buffer = ReplayBuffer(0, (3, 2, 2))
    buffer.add(np.zeros((3, 2, 2)), 1.0, 0, 0.0, 1)
    assert len(buffer) == 0


class FixedQ:
    """Planner stand-in with constant Q-values."""

    def q_values(self, grids: np.ndarray, times: object, d: int, widths: object = None) -> np.ndarray:
        return np.tile([0.1, 0.9, 0.3, 0.2], (len(grids), 1))


def test_half_epsilon_mixes_greedy_and_uniform() -> None:
    rng = np.random.default_rng(12)
    draws = 4000
    counts = np.zeros(4)
    for _ in range(draws):
        counts[act(np.zeros((3, 2, 2)), 1.0, FixedQ(), 2, 0.5, rng)] += 1  # type: ignore[arg-type]
    frequencies = counts / draws
    assert frequencies[1] == pytest.approx(0.5 + 0.5 / 4, abs=0.035)
    for option in (0, 2, 3):
        assert frequencies[option] == pytest.approx(0.5 / 4, abs=0.025)


def test_replay_samples_start_positions_uniformly() -> None:
    buffer = ReplayBuffer(8, (3, 2, 2))
    for i in range(8):
        buffer.add(np.zeros((3, 2, 2)), 1.0, i % 4, float(i), 1)
    rng = np.random.default_rng(4)
    draws = 6000
    starts = np.zeros(8)
    for _ in range(draws):
        index = buffer.sample(3, rng)
        np.testing.assert_array_equal(np.diff(buffer.rewards[index]), [1.0, 1.0])
        starts[int(buffer.rewards[index[0]])] += 1
    assert starts[6:].sum() == 0
    np.testing.assert_allclose(starts[:6], draws / 6, atol=150)


def test_fill_and_train_from_replay(small_env: GridConfig, tiny_config: ModelConfig) -> None:
    buffer = ReplayBuffer(10, (3, 6, 6))
    fill_replay(buffer, small_env, 25, np.random.default_rng(0))
    assert len(buffer) == 10
    assert set(np.unique(buffer.steps)) <= set(range(1, small_env.time_limit + 1))
    model = VPNModel(tiny_config, np.random.default_rng(0))
    metrics = replay_outcome_step(buffer, model, AdamState(), 3, np.random.default_rng(1))
    assert metrics is not None
    assert metrics.loss_value == 0.0
    assert replay_outcome_step(ReplayBuffer(4, (3, 6, 6)), model, AdamState(), 3, np.random.default_rng(1)) is None


def test_evaluation_is_seeded(small_env: GridConfig, tiny_config: ModelConfig) -> None:
    model = VPNModel(tiny_config, np.random.default_rng(0))
    first = evaluate(model, small_env, 1, 3, SeedStreams(5), widths=(4, 1))
    second = evaluate(model, small_env, 1, 3, SeedStreams(5), widths=(4, 1))
    assert first.returns == second.returns
    assert first.episodes == 3
    assert first.mean_return == pytest.approx(np.mean(first.returns))


def test_vpn1_pins_depths(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    trainer = Trainer(small_env, replace(tiny_config, kind="vpn1"), tiny_train(), tmp_path)
    assert (trainer.config.k, trainer.config.d_train, trainer.config.d_test) == (1, 1, 1)


def test_zero_steps_only_writes_header_and_checkpoint(
    small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path
) -> None:
    report = run_training(small_env, tiny_config, tiny_train(total_steps=0, final_eval_episodes=5), tmp_path)
    assert report.global_step == 0
    assert report.final_eval is None
    assert read_csv(report.metrics_path) == []
    assert report.checkpoint_path.is_file()


def test_training_writes_rows_and_final_eval(
    small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path
) -> None:
    report = run_training(small_env, tiny_config, tiny_train(final_eval_episodes=2), tmp_path)
    assert report.global_step >= 12
    assert report.final_eval is not None
    assert report.final_eval.episodes == 2
    rows = read_csv(report.metrics_path)
    assert rows
    assert rows[-1]["eval_episodes"] == "2"
    assert all(int(row["global_step"]) <= report.global_step for row in rows)

    model, model_config, header = load_agent(report.checkpoint_path)
    assert model_config == tiny_config
    assert header["trainer"]["global_step"] == report.global_step
    assert isinstance(model, VPNModel)


def test_planning_thread_leaves_gradient_recording_on(tiny_config: ModelConfig) -> None:
    model = VPNModel(tiny_config, np.random.default_rng(0))
    planner = model.clone()
    seg = small_segment(True)
    compute_targets(seg, model, 2, 0.98)
    stop = threading.Event()

    def plan_until_stopped() -> None:
        while not stop.is_set():
            planner.q_values(seg.grids, seg.times, 2)

    thread = threading.Thread(target=plan_until_stopped)
    thread.start()
    try:
        for _ in range(100):
            segment_gradients(seg, model, 2)
            assert any(np.any(grad != 0.0) for grad in model.params.grads().values())
    finally:
        stop.set()
        thread.join()


def test_no_grad_is_per_thread() -> None:
    seen: list[bool] = []
    with no_grad():
        worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
        worker.start()
        worker.join()
        assert not is_grad_enabled()
    assert seen == [True]
    assert is_grad_enabled()


def test_four_workers_train_to_the_budget(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    config = tiny_train(workers=4, total_steps=120, log_interval=20)
    before = VPNModel(tiny_config, SeedStreams(config.seed).generator("init")).params.values()
    report = run_training(small_env, tiny_config, config, tmp_path)
    assert report.global_step >= 120
    rows = read_csv(report.metrics_path)
    assert len(rows) >= 5
    assert all(np.isfinite(float(row["loss_value"])) for row in rows if row["loss_value"])
    trained, _, _ = load_agent(report.checkpoint_path)
    assert any(not np.array_equal(trained.params[name].data, before[name]) for name in before)


def test_resume_continues_the_same_run(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    straight, split = tmp_path / "straight", tmp_path / "split"
    straight.mkdir()
    split.mkdir()
    run_training(small_env, tiny_config, tiny_train(total_steps=18), straight)
    run_training(small_env, tiny_config, tiny_train(total_steps=9), split)
    run_training(small_env, tiny_config, tiny_train(total_steps=18), split, resume=True)

    assert (straight / "metrics.csv").read_text() == (split / "metrics.csv").read_text()
    straight_model, _, _ = load_agent(straight / "checkpoint.ckpt")
    split_model, _, _ = load_agent(split / "checkpoint.ckpt")
    for name in straight_model.params:
        np.testing.assert_array_equal(split_model.params[name].data, straight_model.params[name].data)


def test_resume_refuses_other_model_kind(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    run_training(small_env, tiny_config, tiny_train(total_steps=0), tmp_path)
    with pytest.raises(ConfigurationError):
        run_training(small_env, replace(tiny_config, kind="opn"), tiny_train(), tmp_path, resume=True)


def test_resume_refuses_another_grid_or_model_shape(
    small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path
) -> None:
    run_training(small_env, tiny_config, tiny_train(total_steps=0), tmp_path)
    with pytest.raises(ConfigurationError) as info:
        run_training(replace(small_env, width=7, height=7), tiny_config, tiny_train(), tmp_path, resume=True)
    assert info.value.key == "env.height"
    with pytest.raises(ConfigurationError) as info:
        run_training(small_env, replace(tiny_config, value_hidden=7), tiny_train(), tmp_path, resume=True)
    assert info.value.key == "model.value_hidden"


def test_resuming_a_finished_run_adds_no_rows(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    config = tiny_train(final_eval_episodes=2)
    run_training(small_env, tiny_config, config, tmp_path)
    rows = read_csv(tmp_path / "metrics.csv")
    report = run_training(small_env, tiny_config, config, tmp_path, resume=True)
    assert report.final_eval is None
    assert read_csv(tmp_path / "metrics.csv") == rows


def test_dqn_trains_without_replay(tiny_config: ModelConfig, small_env: GridConfig, tmp_path: Path) -> None:
    trainer = Trainer(small_env, replace(tiny_config, kind="dqn"), tiny_train(), tmp_path, check_param_count=False)
    assert not trainer.uses_replay
    report = trainer.run()
    assert report.global_step >= 12


def test_identical_runs_are_byte_identical(small_env: GridConfig, tiny_config: ModelConfig, tmp_path: Path) -> None:
    first, second = tmp_path / "first", tmp_path / "second"
    first.mkdir()
    second.mkdir()
    run_training(small_env, tiny_config, tiny_train(final_eval_episodes=2), first)
    run_training(small_env, tiny_config, tiny_train(final_eval_episodes=2), second)
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert (first / "checkpoint.ckpt").read_bytes() == (second / "checkpoint.ckpt").read_bytes()
