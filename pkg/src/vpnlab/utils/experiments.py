"""Bodies of the vpnlab commands; cli.py only parses flags and prints."""

from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.baselines import Agent, OPNModel
from vpnlab.errors import ConfigurationError
from vpnlab.gridworld import ENV_VARIANTS, GridConfig, GridState, generate_episode, observe, variant_config
from vpnlab.oracles import run_oracle_episode
from vpnlab.planner import DEFAULT_WIDTHS, PlanResult, plan
from vpnlab.trainer import TrainConfig, TrainingReport, eval_episode_rngs, evaluate, load_agent, run_training
from vpnlab.utils.config_file import (
    EvalSettings,
    LoadedConfig,
    build_eval_settings,
    build_grid_config,
    build_model_config,
    build_train_config,
    config_snapshot,
    load_config,
    require_keys,
)
from vpnlab.utils.helpers import SeedStreams, prepare_output_dir, write_csv, write_run_manifest
from vpnlab.utils.render import dump_trace, load_render_input, render_plan, render_state, with_steps
from vpnlab.utils.verify import FULL_SCALE, VerifyScale, run_verify
from vpnlab.utils.vpnlab_types import (
    DEPTH_SWEEP_COLUMNS,
    EVAL_COLUMNS,
    ORACLE_COLUMNS,
    VERIFY_COLUMNS,
    DepthSweepRow,
    EvalRow,
    OracleRow,
    VerifyRow,
)
from vpnlab.vpn_model import ModelConfig, VPNModel

logger: VpnlabLogger = vpnlab_logger.init(__name__)

Advance = Callable[[int], None]

COMMANDS: tuple[str, ...] = ("train", "oracles", "eval", "depth-sweep", "render", "verify")


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything one command needs, validated before any compute starts."""

    command: str
    env: GridConfig
    model: ModelConfig | None
    train: TrainConfig | None
    eval: EvalSettings
    out_dir: Path | None
    seeds: tuple[int, ...]
    config: LoadedConfig
    check_param_count: bool = True

    @property
    def has_config_file(self) -> bool:
        return self.config.source is not None


def build_spec(  # noqa: PLR0913
    command: str,
    config_path: Path | None = None,
    seeds: Sequence[int] = (),
    out_dir: Path | None = None,
    episodes: int | None = None,
    workers: int | None = None,
) -> ExperimentSpec:
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command `{command}`")
    config = load_config(config_path)
    if command == "train":
        require_keys(config, "model", "train")
    env = build_grid_config(config)
    model = build_model_config(config, env) if config.has("model.kind") else None
    train = build_train_config(config)
    if workers is not None:
        train = replace(train, workers=workers)
    evaluation = build_eval_settings(config)
    if episodes is not None:
        evaluation = replace(evaluation, episodes=episodes)
        train = replace(train, final_eval_episodes=episodes)
    train.validate()
    evaluation.validate()
    chosen_seeds = tuple(seeds) if seeds else (train.seed,)
    if len(set(chosen_seeds)) != len(chosen_seeds):
        raise ConfigurationError("seeds must be distinct", "train.seed")
    return ExperimentSpec(
        command=command,
        env=env,
        model=model,
        train=train,
        eval=evaluation,
        out_dir=out_dir,
        seeds=chosen_seeds,
        config=config,
        check_param_count=config.get("model.check_param_count"),
    )


def _manifest_settings(experiment: ExperimentSpec, seed: int, **extra: Any) -> dict[str, Any]:
    return {
        "config": config_snapshot(experiment.config),
        "config_file": None if experiment.config.source is None else str(experiment.config.source),
        "env": asdict(experiment.env),
        "seed": seed,
        **extra,
    }


def _output_dir(experiment: ExperimentSpec, resume: bool = False) -> Path | None:
    if experiment.out_dir is None:
        return None
    return prepare_output_dir(experiment.out_dir, resume)


# train


def seed_dir(experiment: ExperimentSpec, seed: int) -> Path:
    if experiment.out_dir is None:
        raise ConfigurationError("train needs an output directory (--out)")
    return experiment.out_dir if len(experiment.seeds) == 1 else experiment.out_dir / f"seed-{seed}"


def cmd_train(experiment: ExperimentSpec, resume: bool = False, progress: Advance | None = None) -> list[TrainingReport]:
    """One training run per seed, each in its own self-describing directory."""
    if experiment.model is None or experiment.train is None:
        raise ConfigurationError("missing required config key `model.kind`", "model.kind")
    dirs = {seed: seed_dir(experiment, seed) for seed in experiment.seeds}
    for out in dirs.values():
        prepare_output_dir(out, resume)
    reports = []
    for seed, out in dirs.items():
        train = replace(experiment.train, seed=seed)
        write_run_manifest(
            out,
            "train",
            _manifest_settings(experiment, seed, model=experiment.model.to_dict(), train=train.to_dict(), resumed=resume),
        )
        logger.info(f"training {experiment.model.kind} seed {seed} into {out}")
        reports.append(
            run_training(
                experiment.env,
                experiment.model,
                train,
                out,
                resume=resume,
                check_param_count=experiment.check_param_count,
                progress=progress,
            )
        )
    return reports


# oracles


def oracle_means(
    env: GridConfig, episodes: int, streams: SeedStreams, node_budget: int, progress: Advance | None = None
) -> tuple[float, float]:
    """Greedy and shortest-path mean returns on the same seeded episodes."""
    greedy, shortest = [], []
    for episode in range(episodes):
        layout_rng, greedy_rng = eval_episode_rngs(streams, episode)
        _, shortest_rng = eval_episode_rngs(streams, episode)
        state = generate_episode(env, layout_rng)
        greedy.append(run_oracle_episode("greedy", state, env, greedy_rng).total_return)
        shortest.append(run_oracle_episode("shortest", state, env, shortest_rng, node_budget).total_return)
        if progress is not None:
            progress(1)
    if not episodes:
        return 0.0, 0.0
    return float(np.mean(greedy)), float(np.mean(shortest))


def cmd_oracles(experiment: ExperimentSpec, progress: Advance | None = None) -> list[OracleRow]:
    out = _output_dir(experiment)
    streams = SeedStreams(experiment.seeds[0])
    rows: list[OracleRow] = []
    for variant in ENV_VARIANTS:
        for stochastic in (False, True):
            env = variant_config(experiment.env, variant, stochastic)
            greedy, shortest = oracle_means(env, experiment.eval.episodes, streams, experiment.eval.node_budget, progress)
            rows.append(
                OracleRow(
                    variant=variant,
                    dynamics="stochastic" if stochastic else "deterministic",
                    episodes=experiment.eval.episodes,
                    greedy_mean=greedy,
                    shortest_mean=shortest,
                )
            )
            logger.info(f"oracles {variant}/{rows[-1]['dynamics']}: greedy {greedy:.3f} shortest {shortest:.3f}")
    if out is not None:
        write_run_manifest(out, "oracles", _manifest_settings(experiment, experiment.seeds[0], episodes=experiment.eval.episodes))
        write_csv(out / "oracles.csv", ORACLE_COLUMNS, rows)  # type: ignore[arg-type]
    return rows


# eval and depth sweep


@dataclass
class LoadedAgent:
    model: Agent
    model_config: ModelConfig
    env: GridConfig
    d_test: int
    widths: tuple[int, ...]


def load_trained(experiment: ExperimentSpec, checkpoint: Path) -> LoadedAgent:
    model, model_config, header = load_agent(checkpoint)
    env = experiment.env if experiment.has_config_file or "env" not in header else GridConfig(**header["env"])
    if (env.height, env.width) != (model_config.height, model_config.width):
        raise ConfigurationError(
            f"checkpoint model is {model_config.height}x{model_config.width}, "
            f"environment is {env.height}x{env.width}",
            "env.height",
        )
    train = header.get("train", {})
    return LoadedAgent(
        model=model,
        model_config=model_config,
        env=env,
        d_test=int(train.get("d_test", 1)),
        widths=tuple(train.get("widths", DEFAULT_WIDTHS)),
    )


def cmd_eval(
    experiment: ExperimentSpec,
    checkpoint: Path,
    d: int | None = None,
    oracle: bool = False,
    progress: Advance | None = None,
) -> EvalRow:
    """Greedy evaluation of a checkpoint; with oracle, the greedy oracle plays the same episodes."""
    out = _output_dir(experiment)
    agent = load_trained(experiment, checkpoint)
    depth = d if d is not None else agent.d_test
    streams = SeedStreams(experiment.seeds[0])
    summary = evaluate(agent.model, agent.env, depth, experiment.eval.episodes, streams, agent.widths)
    if progress is not None:
        progress(experiment.eval.episodes)
    row = EvalRow(
        policy=agent.model_config.kind,
        depth=depth,
        episodes=summary.episodes,
        mean_return=summary.mean_return,
    )
    if oracle:
        returns = []
        for episode in range(experiment.eval.episodes):
            layout_rng, dynamics_rng = eval_episode_rngs(streams, episode)
            state = generate_episode(agent.env, layout_rng)
            returns.append(run_oracle_episode("greedy", state, agent.env, dynamics_rng).total_return)
        row["oracle_mean"] = float(np.mean(returns)) if returns else 0.0
    if out is not None:
        write_run_manifest(
            out, "eval", _manifest_settings(experiment, experiment.seeds[0], checkpoint=str(checkpoint), depth=depth)
        )
        write_csv(out / "eval.csv", EVAL_COLUMNS, [row])  # type: ignore[list-item]
    return row


def cmd_depth_sweep(
    experiment: ExperimentSpec, checkpoint: Path, progress: Advance | None = None
) -> list[DepthSweepRow]:
    """Mean return per evaluation depth; every depth replays the same episode seeds."""
    out = _output_dir(experiment)
    agent = load_trained(experiment, checkpoint)
    streams = SeedStreams(experiment.seeds[0])
    rows: list[DepthSweepRow] = []
    for depth in range(experiment.eval.d_min, experiment.eval.d_max + 1):
        summary = evaluate(agent.model, agent.env, depth, experiment.eval.episodes, streams, agent.widths)
        rows.append(DepthSweepRow(d_test=depth, episodes=summary.episodes, mean_return=summary.mean_return))
        logger.info(f"depth {depth}: mean return {summary.mean_return:.3f}")
        if progress is not None:
            progress(1)
    if out is not None:
        write_run_manifest(
            out,
            "depth-sweep",
            _manifest_settings(experiment, experiment.seeds[0], checkpoint=str(checkpoint), d_min=experiment.eval.d_min, d_max=experiment.eval.d_max),
        )
        write_csv(out / "depth_sweep.csv", DEPTH_SWEEP_COLUMNS, rows)  # type: ignore[arg-type]
    return rows


# render


def agent_plan(model: Agent, state: GridState, env: GridConfig, d: int, widths: Sequence[int]) -> PlanResult | None:
    """The planner's tree from one state; None for models that do not plan."""
    obs = observe(state, env)
    if isinstance(model, VPNModel):
        root = model.encode_states(obs.grid[np.newaxis], [obs.time])[0]
    elif isinstance(model, OPNModel):
        root = OPNModel.pack(obs.grid[np.newaxis], [obs.time])[0]
    else:
        return None
    return plan(root, d, model, widths)


def cmd_render(  # noqa: PLR0913
    experiment: ExperimentSpec,
    layout: Path | None = None,
    checkpoint: Path | None = None,
    d: int | None = None,
    steps: int | None = None,
) -> str:
    """
    Text picture of a state. With a checkpoint the model's plan is drawn over
    it; a trace file is drawn as stored.
    """
    out = _output_dir(experiment)
    trace = None
    if layout is not None:
        state, trace = load_render_input(layout.read_text(encoding="utf-8"))
    else:
        layout_rng, _ = eval_episode_rngs(SeedStreams(experiment.seeds[0]), 0)
        state = generate_episode(experiment.env, layout_rng)
    state = with_steps(state, steps)

    document = None
    if checkpoint is not None:
        agent = load_trained(experiment, checkpoint)
        depth = d if d is not None else agent.d_test
        result = agent_plan(agent.model, state, agent.env, depth, agent.widths)
        if result is None:
            text = render_state(state)
        else:
            text = render_plan(state, result.trace)
            document = dump_trace(state, result, depth)
    elif trace is not None:
        text = render_plan(state, trace)
    else:
        text = render_state(state)

    if out is not None:
        write_run_manifest(out, "render", _manifest_settings(experiment, experiment.seeds[0], steps=steps))
        (out / "render.txt").write_text(text, encoding="utf-8")
        if document is not None:
            (out / "trace.yaml").write_text(document, encoding="utf-8")
    return text


# verify


def cmd_verify(
    out_dir: Path | None = None,
    scale: VerifyScale = FULL_SCALE,
    progress: Callable[[str], None] | None = None,
) -> list[VerifyRow]:
    rows = run_verify(scale, progress)
    if out_dir is not None:
        prepare_output_dir(out_dir)
        write_run_manifest(out_dir, "verify", {"scale": asdict(scale)})
        write_csv(out_dir / "verify.csv", VERIFY_COLUMNS, rows)  # type: ignore[arg-type]
    return rows


def failed_checks(rows: Sequence[VerifyRow]) -> list[str]:
    return [row["check"] for row in rows if not row["passed"]]
