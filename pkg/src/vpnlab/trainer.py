"""
Asynchronous n-step Q-learning with k-step predictions and d-step planning.

Workers act epsilon-greedily through the planner, cut n-step segments, build
bootstrapped targets with the target network and push gradients into the
shared parameters under a lock. Outcome modules additionally train on
one-step slices of a replay buffer filled by a random policy.
"""

import threading
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.baselines import Agent, build_model
from vpnlab.errors import ConfigurationError, NumericHealthError
from vpnlab.gridworld import (
    N_OPTIONS,
    GridConfig,
    GridState,
    Option,
    execute_option,
    format_state,
    generate_episode,
    is_terminal,
    observe,
    parse_state,
    play_episode,
)
from vpnlab.netcore.adam import AdamState, adam_step
from vpnlab.netcore.checkpoint import (
    load_checkpoint,
    pack_training_state,
    save_checkpoint,
    unpack_training_state,
)
from vpnlab.netcore.tensor import backward
from vpnlab.planner import DEFAULT_WIDTHS
from vpnlab.utils.helpers import SeedStreams, write_csv
from vpnlab.utils.vpnlab_types import METRICS_COLUMNS, MetricsRow
from vpnlab.vpn_model import LossTerms, ModelConfig

logger: VpnlabLogger = vpnlab_logger.init(__name__)

CHECKPOINT_NAME: str = "checkpoint.ckpt"
METRICS_NAME: str = "metrics.csv"


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    n: int = 10
    workers: int = 16
    k: int = 3
    d_train: int = 3
    d_test: int = 3
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    target_sync: int = 10_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_steps: int = 1_000_000
    replay_size: int = 100_000
    replay_ratio: int = 1
    lr: float = 1e-4
    lr_decay: float = 0.95
    decay_interval: int = 1_000_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 50_000
    eval_episodes: int = 200
    final_eval_episodes: int = 1000
    log_interval: int = 10_000
    checkpoint_interval: int = 100_000
    seed: int = 0

    def validate(self) -> None:
        checks: list[tuple[bool, str, str]] = [
            (self.total_steps >= 0, "total_steps must be >= 0", "train.total_steps"),
            (self.n >= 1, "n must be >= 1", "train.n"),
            (self.workers >= 1, "workers must be >= 1", "train.workers"),
            (self.k >= 1, "k must be >= 1", "train.k"),
            (self.d_train >= 1, "d_train must be >= 1", "train.d_train"),
            (self.d_test >= 1, "d_test must be >= 1", "train.d_test"),
            (self.target_sync >= 1, "target_sync must be >= 1", "train.target_sync"),
            (
                0.05 <= self.epsilon_end <= self.epsilon_start <= 1.0,  # noqa: PLR2004
                "epsilon must decrease within [0.05, 1]",
                "train.epsilon_end",
            ),
            (self.epsilon_steps >= 1, "epsilon_steps must be >= 1", "train.epsilon_steps"),
            (self.replay_size >= 0, "replay_size must be >= 0", "train.replay_size"),
            (self.replay_ratio >= 0, "replay_ratio must be >= 0", "train.replay_ratio"),
            (self.eval_interval >= 1, "eval_interval must be >= 1", "train.eval_interval"),
            (self.log_interval >= 1, "log_interval must be >= 1", "train.log_interval"),
            (
                self.checkpoint_interval >= 1,
                "checkpoint_interval must be >= 1",
                "train.checkpoint_interval",
            ),
            (
                all(1 <= width <= N_OPTIONS for width in self.widths),
                "branch widths must lie in [1, 4]",
                "train.widths",
            ),
        ]
        for ok, message, key in checks:
            if not ok:
                raise ConfigurationError(message, key)

    def to_dict(self) -> dict[str, Any]:
        values = dict(self.__dict__)
        values["widths"] = list(self.widths)
        return values

    def adam_state(self) -> AdamState:
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            lr_decay=self.lr_decay,
            decay_interval=self.decay_interval,
        )


def epsilon_at(step: int, config: TrainConfig) -> float:
    """Linear decay from epsilon_start to epsilon_end over epsilon_steps, then flat."""
    fraction = min(max(step, 0) / config.epsilon_steps, 1.0)
    return config.epsilon_start + fraction * (config.epsilon_end - config.epsilon_start)


@dataclass
class Segment:
    """
    Up to n consecutive option steps. grids/times hold x_0 .. x_T (the last
    one is the bootstrap observation); options, rewards and steps hold T entries.
    """

    grids: np.ndarray
    times: np.ndarray
    options: np.ndarray
    rewards: np.ndarray
    steps: np.ndarray
    terminal: bool
    returns: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.options)

    def discounts(self, discount: float) -> np.ndarray:
        return np.power(discount, self.steps.astype(np.float64))


def discounted_targets(rewards: ArrayLike, discounts: ArrayLike, bootstrap: float) -> np.ndarray:
    """R_T = bootstrap, R_t = r_t + g_t * R_{t+1}; returns R_0 .. R_T."""
    reward_array = np.asarray(rewards, dtype=np.float64)
    discount_array = np.asarray(discounts, dtype=np.float64)
    returns = np.empty(len(reward_array) + 1, dtype=np.float64)
    returns[-1] = bootstrap
    for t in range(len(reward_array) - 1, -1, -1):
        returns[t] = reward_array[t] + discount_array[t] * returns[t + 1]
    return returns


def act(
    grid: ArrayLike,
    time: float,
    model: Agent,
    d: int,
    epsilon: float,
    rng: np.random.Generator,
    widths: Sequence[int] = DEFAULT_WIDTHS,
) -> Option:
    """Uniform random option with probability epsilon, else the planner's argmax."""
    if rng.random() < epsilon:
        return Option(int(rng.integers(N_OPTIONS)))
    q = model.q_values(np.asarray(grid)[np.newaxis], [time], d, widths)[0]
    return Option(int(np.argmax(q)))


def compute_targets(
    segment: Segment,
    target_model: Agent,
    d: int,
    discount: float,
    widths: Sequence[int] = DEFAULT_WIDTHS,
) -> np.ndarray:
    if segment.terminal:
        bootstrap = 0.0
    else:
        q = target_model.q_values(segment.grids[-1:], segment.times[-1:], d, widths)[0]
        bootstrap = float(np.max(q))
    segment.returns = discounted_targets(segment.rewards, segment.discounts(discount), bootstrap)
    return segment.returns


@dataclass
class StepMetrics:
    loss_value: float
    loss_reward: float
    loss_steps: float
    loss_observation: float = 0.0


def _checked_backward(terms: LossTerms, where: str) -> StepMetrics:
    if not np.isfinite(terms.total.item()):
        raise NumericHealthError(
            f"non-finite loss in {where}",
            {"value": terms.value, "reward": terms.reward, "steps": terms.steps},
        )
    backward(terms.total)
    return StepMetrics(terms.value, terms.reward, terms.steps, terms.observation)


def segment_gradients(segment: Segment, model: Agent, k: int) -> StepMetrics:
    """Accumulate the gradient of the segment loss into model.params."""
    if segment.returns is None:
        raise ConfigurationError("segment targets must be computed before training")
    model.params.zero_grad()
    terms = model.segment_loss(
        segment.grids,
        segment.times,
        segment.options,
        segment.returns,
        segment.rewards,
        segment.steps,
        k,
    )
    return _checked_backward(terms, "segment update")


def train_step(
    segment: Segment, model: Agent, opt: AdamState, k: int, global_step: int | None = None
) -> StepMetrics:
    metrics = segment_gradients(segment, model, k)
    adam_step(model.params, opt, global_step)
    logger.debug(
        f"update: value {metrics.loss_value:.4f} reward {metrics.loss_reward:.4f} "
        f"steps {metrics.loss_steps:.4f}"
    )
    return metrics


class ReplayBuffer:
    """Ring of random-policy transitions; samples contiguous slices."""

    def __init__(self, capacity: int, grid_shape: tuple[int, int, int]) -> None:
        self.capacity = capacity
        self.grids = np.zeros((capacity, *grid_shape), dtype=np.uint8)
        self.times = np.zeros(capacity, dtype=np.float64)
        self.options = np.zeros(capacity, dtype=np.intp)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(  # noqa: PLR0913
        self,
        grid: np.ndarray,
        time: float,
        option: int,
        reward: float,
        steps: int,
    ) -> None:
        if self.capacity == 0:
            return
        i = self._head
        self.grids[i] = grid
        self.times[i] = time
        self.options[i] = option
        self.rewards[i] = reward
        self.steps[i] = steps
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def valid_starts(self, length: int) -> np.ndarray:
        """Ring positions whose next `length` entries are stored contiguously in write order."""
        length = min(length, self._size)
        oldest = 0 if self._size < self.capacity else self._head
        offsets = np.arange(self._size - length + 1)
        return (oldest + offsets) % max(self.capacity, 1)

    def sample(self, length: int, rng: np.random.Generator) -> np.ndarray:
        starts = self.valid_starts(length)
        start = int(starts[int(rng.integers(len(starts)))])
        return (start + np.arange(min(length, self._size))) % self.capacity


def fill_replay(
    buffer: ReplayBuffer,
    config: GridConfig,
    count: int,
    rng: np.random.Generator,
) -> None:
    """Random-policy transitions until `count` are stored."""
    state = generate_episode(config, rng)
    for _ in range(min(count, buffer.capacity)):
        if is_terminal(state, config):
            state = generate_episode(config, rng)
        option = Option(int(rng.integers(N_OPTIONS)))
        before = observe(state, config)
        outcome = execute_option(state, option, config, rng)
        buffer.add(before.grid, before.time, option, outcome.reward, outcome.steps)
        state = outcome.next_state


def replay_outcome_gradients(
    buffer: ReplayBuffer, model: Agent, n: int, rng: np.random.Generator
) -> StepMetrics | None:
    if len(buffer) == 0:
        logger.warning("replay buffer is empty; skipping outcome update")
        return None
    index = buffer.sample(n, rng)
    model.params.zero_grad()
    terms = model.replay_loss(
        buffer.grids[index],
        buffer.times[index],
        buffer.options[index],
        buffer.rewards[index],
        buffer.steps[index],
    )
    return _checked_backward(terms, "replay update")


def replay_outcome_step(
    buffer: ReplayBuffer,
    model: Agent,
    opt: AdamState,
    n: int,
    rng: np.random.Generator,
    global_step: int | None = None,
) -> StepMetrics | None:
    """One Adam update on reward and step-count errors of a sampled slice."""
    metrics = replay_outcome_gradients(buffer, model, n, rng)
    if metrics is not None:
        adam_step(model.params, opt, global_step)
    return metrics


@dataclass
class EvalSummary:
    mean_return: float
    returns: list[float]

    @property
    def episodes(self) -> int:
        return len(self.returns)


def eval_episode_rngs(streams: SeedStreams, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(layout rng, dynamics rng) of an evaluation episode; shared by every policy."""
    return streams.generator("eval", episode, 0), streams.generator("eval", episode, 1)


def evaluate(  # noqa: PLR0913
    model: Agent,
    env: GridConfig,
    d: int,
    episodes: int,
    streams: SeedStreams,
    widths: Sequence[int] = DEFAULT_WIDTHS,
) -> EvalSummary:
    """Greedy (epsilon = 0) returns on freshly seeded episodes."""

    def choose(state: GridState) -> Option:
        obs = observe(state, env)
        q = model.q_values(obs.grid[np.newaxis], [obs.time], d, widths)[0]
        return Option(int(np.argmax(q)))

    returns = []
    for episode in range(episodes):
        layout_rng, dynamics_rng = eval_episode_rngs(streams, episode)
        state = generate_episode(env, layout_rng)
        returns.append(play_episode(state, env, choose, dynamics_rng).total_return)
    mean = float(np.mean(returns)) if returns else 0.0
    return EvalSummary(mean, returns)


@dataclass
class WorkerState:
    env_rng: np.random.Generator
    epsilon_rng: np.random.Generator
    state: GridState


@dataclass
class TrainingReport:
    global_step: int
    final_eval: EvalSummary | None
    metrics_path: Path
    checkpoint_path: Path


@dataclass
class _Accumulator:
    updates: int = 0
    value: float = 0.0
    reward: float = 0.0
    steps: float = 0.0

    def add(self, metrics: StepMetrics) -> None:
        self.updates += 1
        self.value += metrics.loss_value
        self.reward += metrics.loss_reward
        self.steps += metrics.loss_steps

    def means(self) -> tuple[float | None, float | None, float | None]:
        if self.updates == 0:
            return None, None, None
        return self.value / self.updates, self.reward / self.updates, self.steps / self.updates

    def reset(self) -> None:
        self.updates = 0
        self.value = self.reward = self.steps = 0.0


def _crossed(before: int, after: int, interval: int) -> bool:
    return after // interval > before // interval


class Trainer:
    def __init__(  # noqa: PLR0913
        self,
        env: GridConfig,
        model_config: ModelConfig,
        config: TrainConfig,
        out_dir: Path,
        check_param_count: bool = True,
        progress: Callable[[int], None] | None = None,
    ) -> None:
        config.validate()
        env.validate()
        if model_config.kind == "vpn1":
            config = replace(config, k=1, d_train=1, d_test=1)
        self.env = env
        self.model_config = model_config
        self.config = config
        self.out_dir = out_dir
        self.progress = progress
        self.streams = SeedStreams(config.seed)

        self.model: Agent = build_model(model_config, self.streams.generator("init"), check_param_count)
        self.target: Agent = self.model.clone()
        self.opt = config.adam_state()
        self.global_step = 0
        self.replay_rng = self.streams.generator("replay", 1)
        self.buffer: ReplayBuffer | None = None
        self.workers: list[WorkerState] = []
        for worker in range(config.workers):
            env_rng = self.streams.generator("env", worker)
            self.workers.append(
                WorkerState(env_rng, self.streams.generator("epsilon", worker), generate_episode(env, env_rng))
            )
        self._lock = threading.Lock()
        self._accumulator = _Accumulator()
        self._error: BaseException | None = None

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / METRICS_NAME

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    @property
    def uses_replay(self) -> bool:
        return self.model.has_outcome_model and self.config.replay_ratio > 0 and self.config.replay_size > 0

    def _prepare_replay(self) -> None:
        if not self.uses_replay:
            return
        self.buffer = ReplayBuffer(self.config.replay_size, (3, self.env.height, self.env.width))
        fill_replay(self.buffer, self.env, self.config.replay_size, self.streams.generator("replay", 0))
        logger.info(f"replay buffer filled with {len(self.buffer)} random-policy transitions")

    # checkpointing

    def save(self) -> None:
        header = {
            "kind": self.model_config.kind,
            "env": asdict(self.env),
            "model": self.model_config.to_dict(),
            "train": self.config.to_dict(),
            "adam": self.opt.scalars(),
            "trainer": {
                "global_step": self.global_step,
                "pending": {
                    "updates": self._accumulator.updates,
                    "value": self._accumulator.value,
                    "reward": self._accumulator.reward,
                    "steps": self._accumulator.steps,
                },
            },
            "rng": {
                "replay": self.replay_rng.bit_generator.state,
                "workers": [
                    {
                        "env": worker.env_rng.bit_generator.state,
                        "epsilon": worker.epsilon_rng.bit_generator.state,
                        "state": format_state(worker.state),
                    }
                    for worker in self.workers
                ],
            },
        }
        save_checkpoint(
            self.checkpoint_path, header, pack_training_state(self.model.params, self.opt, self.target.params)
        )

    def restore(self, path: Path) -> None:
        header, records = load_checkpoint(path)
        if header.get("kind") != self.model_config.kind:
            raise ConfigurationError(
                f"checkpoint holds a `{header.get('kind')}` model, config asks for `{self.model_config.kind}`",
                "model.kind",
            )
        saved_env = header.get("env", {})
        for key in ("height", "width"):
            if saved_env.get(key) != getattr(self.env, key):
                raise ConfigurationError(
                    f"checkpoint was trained on a {saved_env.get('height')}x{saved_env.get('width')} grid, "
                    f"config asks for {self.env.height}x{self.env.width}",
                    f"env.{key}",
                )
        saved_model = header["model"]
        for key, value in self.model_config.to_dict().items():
            if saved_model.get(key) != value:
                raise ConfigurationError(
                    f"checkpoint has model.{key} = {saved_model.get(key)}, config asks for {value}", f"model.{key}"
                )
        unpack_training_state(records, self.model.params, self.opt, self.target.params)
        self.opt.step = int(header["adam"]["step"])
        self.global_step = int(header["trainer"]["global_step"])
        pending = header["trainer"]["pending"]
        self._accumulator.updates = int(pending["updates"])
        self._accumulator.value = float(pending["value"])
        self._accumulator.reward = float(pending["reward"])
        self._accumulator.steps = float(pending["steps"])
        self.replay_rng.bit_generator.state = header["rng"]["replay"]
        saved_workers = header["rng"]["workers"]
        if len(saved_workers) != len(self.workers):
            raise ConfigurationError("checkpoint was written with a different worker count", "train.workers")
        for worker, saved in zip(self.workers, saved_workers, strict=True):
            worker.env_rng.bit_generator.state = saved["env"]
            worker.epsilon_rng.bit_generator.state = saved["epsilon"]
            worker.state = parse_state(saved["state"])
        logger.info(f"resumed from {path} at step {self.global_step}")

    # acting

    def collect_segment(self, worker: WorkerState, model: Agent) -> Segment:
        grids, times, options, rewards, steps = [], [], [], [], []
        terminal = False
        epsilon = epsilon_at(self.global_step, self.config)
        for _ in range(self.config.n):
            obs = observe(worker.state, self.env)
            option = act(
                obs.grid, obs.time, model, self.config.d_train, epsilon, worker.epsilon_rng, self.config.widths
            )
            outcome = execute_option(worker.state, option, self.env, worker.env_rng)
            grids.append(obs.grid)
            times.append(obs.time)
            options.append(int(option))
            rewards.append(outcome.reward)
            steps.append(outcome.steps)
            worker.state = outcome.next_state
            if outcome.terminal:
                terminal = True
                break
        last = observe(worker.state, self.env)
        grids.append(last.grid)
        times.append(last.time)
        if terminal:
            worker.state = generate_episode(self.env, worker.env_rng)
        return Segment(
            grids=np.stack(grids),
            times=np.asarray(times, dtype=np.float64),
            options=np.asarray(options, dtype=np.intp),
            rewards=np.asarray(rewards, dtype=np.float64),
            steps=np.asarray(steps, dtype=np.int64),
            terminal=terminal,
        )

    # bookkeeping under the lock

    def _metrics_row(self, eval_summary: EvalSummary | None) -> MetricsRow:
        value, reward, steps = self._accumulator.means()
        return MetricsRow(
            global_step=self.global_step,
            loss_value=value,
            loss_reward=reward,
            loss_steps=steps,
            eval_mean_return=None if eval_summary is None else eval_summary.mean_return,
            eval_episodes=None if eval_summary is None else eval_summary.episodes,
            epsilon=epsilon_at(self.global_step, self.config),
            lr=self.opt.effective_lr(self.global_step),
        )

    def _write_row(self, eval_summary: EvalSummary | None) -> None:
        write_csv(self.metrics_path, METRICS_COLUMNS, [self._metrics_row(eval_summary)], append=True)  # type: ignore[list-item]
        self._accumulator.reset()

    def _after_update(self, before: int) -> None:
        after = self.global_step
        if _crossed(before, after, self.config.target_sync):
            self.target.params.copy_from(self.model.params)
            logger.info(f"target network synced at step {after}")
        evaluated = None
        if _crossed(before, after, self.config.eval_interval) and self.config.eval_episodes > 0:
            evaluated = evaluate(
                self.model, self.env, self.config.d_test, self.config.eval_episodes, self.streams, self.config.widths
            )
            logger.info(f"step {after}: eval mean return {evaluated.mean_return:.3f}")
        if evaluated is not None or _crossed(before, after, self.config.log_interval):
            self._write_row(evaluated)
        if _crossed(before, after, self.config.checkpoint_interval):
            self.save()
        if self.progress is not None:
            self.progress(after - before)

    def _apply(self, local: Agent, metrics: StepMetrics) -> None:
        self.model.params.add_grads_from(local.params)
        adam_step(self.model.params, self.opt, self.global_step)
        self._accumulator.add(metrics)

    # worker loop

    def _work_once(self, worker: WorkerState, local: Agent) -> bool:
        with self._lock:
            if self.global_step >= self.config.total_steps:
                return False
            local.params.copy_from(self.model.params)
            target = self.target
        segment = self.collect_segment(worker, local)
        compute_targets(segment, target, self.config.d_train, self.env.discount, self.config.widths)
        metrics = segment_gradients(segment, local, self.config.k)
        with self._lock:
            before = self.global_step
            self.global_step += segment.length
            self._apply(local, metrics)
            if self.buffer is not None:
                for _ in range(self.config.replay_ratio):
                    replay_outcome_step(
                        self.buffer, self.model, self.opt, self.config.n, self.replay_rng, self.global_step
                    )
            self._after_update(before)
        return True

    def _worker_loop(self, worker: WorkerState) -> None:
        local = self.model.clone()
        try:
            while self._error is None and self._work_once(worker, local):
                pass
        except BaseException as ex:  # noqa: BLE001
            self._error = ex

    def run(self, resume: bool = False) -> TrainingReport:
        self._prepare_replay()
        if resume:
            self.restore(self.checkpoint_path)
        else:
            write_csv(self.metrics_path, METRICS_COLUMNS, [])
        start = self.global_step
        if self.config.workers == 1:
            self._worker_loop(self.workers[0])
        else:
            threads = [
                threading.Thread(target=self._worker_loop, args=(worker,), name=f"worker-{i}")
                for i, worker in enumerate(self.workers)
            ]
            for thread in threads:
                thread.start()
            for thread in threads:
                thread.join()
        if self._error is not None:
            raise self._error

        final = None
        if self.global_step > start and self.config.final_eval_episodes > 0:
            final = evaluate(
                self.model,
                self.env,
                self.config.d_test,
                self.config.final_eval_episodes,
                self.streams,
                self.config.widths,
            )
            self._write_row(final)
        self.save()
        return TrainingReport(self.global_step, final, self.metrics_path, self.checkpoint_path)


def run_training(  # noqa: PLR0913
    env: GridConfig,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Path,
    resume: bool = False,
    check_param_count: bool = True,
    progress: Callable[[int], None] | None = None,
) -> TrainingReport:
    trainer = Trainer(env, model_config, config, out_dir, check_param_count, progress)
    return trainer.run(resume=resume)


def train_baseline(  # noqa: PLR0913
    env: GridConfig,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Path,
    kind: str,
    check_param_count: bool = True,
) -> TrainingReport:
    """The same loop with a baseline model; vpn1 is VPN with k = d_train = d_test = 1."""
    return run_training(env, replace(model_config, kind=kind), config, out_dir, check_param_count=check_param_count)


def load_agent(path: Path) -> tuple[Agent, ModelConfig, dict[str, Any]]:
    """Rebuild a trained model from a checkpoint, without optimizer or target state."""
    header, records = load_checkpoint(path)
    model_config = ModelConfig.from_dict(header["model"])
    model = build_model(model_config, np.random.default_rng(0), check_param_count=False)
    unpack_training_state(records, model.params)
    return model, model_config, header
