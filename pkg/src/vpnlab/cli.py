#!/usr/bin/env python

"""Frontend CLI for vpnlab experiments."""

import os
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Annotated, Optional

import rich
import typer
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from vpnlab.__about__ import __version__
from vpnlab.__logger__ import vpnlab_logger
from vpnlab.config import set_vpnlab_debug_mode, set_vpnlab_precision
from vpnlab.errors import ConfigurationError, VpnlabError
from vpnlab.utils.helpers import format_cell

EXIT_FAILURE: int = 1
EXIT_CONFIG: int = 2


def version_callback(show_version: bool) -> None:
    if show_version:
        rich.print(f"\n[green]{os.path.basename(os.path.dirname(__file__))}[/green] {__version__}\n")
        raise typer.Exit()


class PrecisionChoices(str, Enum):
    single = "32"
    double = "64"


class OracleChoices(str, Enum):
    none = "none"
    greedy = "greedy"


class ScaleChoices(str, Enum):
    full = "full"
    quick = "quick"


ConfigOption = Annotated[
    Optional[Path],
    typer.Option("--config", "-c", help="Experiment config file (key = value lines).", show_default=False),
]
SeedOption = Annotated[
    Optional[list[int]],
    typer.Option("--seed", "-s", help="Master seed; repeat for several seeds.", show_default=False),
]
OutOption = Annotated[
    Optional[Path],
    typer.Option("--out", "-o", help="Output directory; must be new or empty.", show_default=False),
]
EpisodesOption = Annotated[
    Optional[int],
    typer.Option("--episodes", "-n", help="Evaluation episodes.", show_default=False),
]
WorkersOption = Annotated[
    Optional[int],
    typer.Option("--workers", "-w", help="Asynchronous training workers.", show_default=False),
]
PrecisionOption = Annotated[
    Optional[PrecisionChoices],
    typer.Option("--precision", "-p", help="Float precision in bits.", show_default=False),
]
CheckpointArgument = Annotated[Path, typer.Argument(help="Checkpoint written by `vpnlab train`.")]


app = typer.Typer(
    add_completion=False,
    context_settings={
        "help_option_names": ["-h", "--help"],
    },
    no_args_is_help=True,
)


@contextmanager
def handle_errors() -> Iterator[None]:
    """Map library errors to exit codes: 2 for configuration, 1 for the rest."""
    try:
        yield
    except ConfigurationError as ex:
        key = f" [[yellow]{ex.key}[/yellow]]" if ex.key else ""
        rich.print(f"[red]Configuration error[/red]{key}: {ex}")
        raise typer.Exit(EXIT_CONFIG) from ex
    except VpnlabError as ex:
        vpnlab_logger.exception(ex)
        raise typer.Exit(EXIT_FAILURE) from ex


def apply_precision(precision: PrecisionChoices | None, default: int = 32) -> None:
    set_vpnlab_precision(int(precision.value) if precision is not None else default)


@contextmanager
def progress_bar(description: str, total: int | None) -> Iterator[Progress]:
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        transient=True,
    ) as progress:
        progress.add_task(description=description, total=total)
        yield progress


def advance(progress: Progress) -> Callable[[int], None]:
    task = progress.task_ids[0]

    def step(amount: int) -> None:
        progress.advance(task, amount)

    return step


def print_table(title: str, columns: tuple[str, ...], rows: list[dict[str, object]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(format_cell(row.get(column)) for column in columns))
    rich.print(table)


@app.command("train", help="Train a VPN or baseline agent.")  # type: ignore[misc]
def app_train(  # noqa: PLR0913
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    episodes: EpisodesOption = None,
    workers: WorkersOption = None,
    precision: PrecisionOption = None,
    resume: Annotated[
        bool,
        typer.Option("--resume/--no-resume", "-r/-R", help="Continue from the checkpoint in --out."),
    ] = False,
) -> None:
    from vpnlab.utils.experiments import build_spec, cmd_train

    with handle_errors():
        apply_precision(precision)
        experiment = build_spec("train", config, seed or (), out, episodes, workers)
        total = experiment.train.total_steps * len(experiment.seeds) if experiment.train else None
        with progress_bar("[green]Training...", total) as progress:
            reports = cmd_train(experiment, resume=resume, progress=advance(progress))

    rows = [
        {
            "directory": str(report.metrics_path.parent),
            "global_step": report.global_step,
            "final_mean_return": None if report.final_eval is None else report.final_eval.mean_return,
        }
        for report in reports
    ]
    print_table("Training", ("directory", "global_step", "final_mean_return"), rows)
    rich.print(f"[green]Successfully[/green] trained {len(reports)} run(s).")


@app.command("oracles", help="Greedy and shortest-path oracle returns for every environment variant.")  # type: ignore[misc]
def app_oracles(  # noqa: PLR0913
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    episodes: EpisodesOption = None,
    workers: WorkersOption = None,
    precision: PrecisionOption = None,
) -> None:
    from vpnlab.gridworld import ENV_VARIANTS
    from vpnlab.utils.experiments import build_spec, cmd_oracles
    from vpnlab.utils.vpnlab_types import ORACLE_COLUMNS

    with handle_errors():
        apply_precision(precision)
        experiment = build_spec("oracles", config, seed or (), out, episodes, workers)
        with progress_bar("[green]Playing oracles...", experiment.eval.episodes * len(ENV_VARIANTS) * 2) as progress:
            rows = cmd_oracles(experiment, progress=advance(progress))
    print_table("Oracle mean returns", ORACLE_COLUMNS, rows)  # type: ignore[arg-type]


@app.command("eval", help="Evaluate a trained checkpoint on seeded episodes.")  # type: ignore[misc]
def app_eval(  # noqa: PLR0913
    checkpoint: CheckpointArgument,
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    episodes: EpisodesOption = None,
    workers: WorkersOption = None,
    precision: PrecisionOption = None,
    depth: Annotated[
        Optional[int],
        typer.Option("--depth", "-d", help="Planning depth; defaults to the checkpoint's d_test.", show_default=False),
    ] = None,
    oracle: Annotated[
        OracleChoices,
        typer.Option("--oracle", help="Also play an oracle on the same episodes."),
    ] = OracleChoices.none.value,  # type: ignore[assignment]
) -> None:
    from vpnlab.utils.experiments import build_spec, cmd_eval
    from vpnlab.utils.vpnlab_types import EVAL_COLUMNS

    with handle_errors():
        apply_precision(precision)
        experiment = build_spec("eval", config, seed or (), out, episodes, workers)
        with progress_bar("[green]Evaluating...", None) as progress:
            row = cmd_eval(experiment, checkpoint, depth, oracle == OracleChoices.greedy, advance(progress))
    print_table("Evaluation", EVAL_COLUMNS, [dict(row)])


@app.command("depth-sweep", help="Mean return of a checkpoint across planning depths.")  # type: ignore[misc]
def app_depth_sweep(  # noqa: PLR0913
    checkpoint: CheckpointArgument,
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    episodes: EpisodesOption = None,
    workers: WorkersOption = None,
    precision: PrecisionOption = None,
) -> None:
    from vpnlab.utils.experiments import build_spec, cmd_depth_sweep
    from vpnlab.utils.vpnlab_types import DEPTH_SWEEP_COLUMNS

    with handle_errors():
        apply_precision(precision)
        experiment = build_spec("depth-sweep", config, seed or (), out, episodes, workers)
        with progress_bar("[green]Sweeping depths...", experiment.eval.d_max - experiment.eval.d_min + 1) as progress:
            rows = cmd_depth_sweep(experiment, checkpoint, advance(progress))
    print_table("Depth sweep", DEPTH_SWEEP_COLUMNS, rows)  # type: ignore[arg-type]


@app.command("render", help="Draw a state, a stored trace or a checkpoint's plan as text.")  # type: ignore[misc]
def app_render(  # noqa: PLR0913
    config: ConfigOption = None,
    seed: SeedOption = None,
    out: OutOption = None,
    precision: PrecisionOption = None,
    layout: Annotated[
        Optional[Path],
        typer.Option("--layout", "-l", help="Layout text or trace YAML to draw.", show_default=False),
    ] = None,
    checkpoint: Annotated[
        Optional[Path],
        typer.Option("--checkpoint", "-k", help="Draw this model's plan over the state.", show_default=False),
    ] = None,
    depth: Annotated[
        Optional[int],
        typer.Option("--depth", "-d", help="Planning depth for the drawn plan.", show_default=False),
    ] = None,
    steps: Annotated[
        Optional[int],
        typer.Option("--steps", help="Override the remaining steps of the state.", show_default=False),
    ] = None,
) -> None:
    from vpnlab.utils.experiments import build_spec, cmd_render

    with handle_errors():
        apply_precision(precision)
        experiment = build_spec("render", config, seed or (), out)
        text = cmd_render(experiment, layout, checkpoint, depth, steps)
    typer.echo(text, nl=False)


@app.command("verify", help="Run the property suite and report every check.")  # type: ignore[misc]
def app_verify(
    out: OutOption = None,
    precision: PrecisionOption = None,
    scale: Annotated[
        ScaleChoices,
        typer.Option("--scale", help="Check counts: full acceptance sizes or a quick smoke run."),
    ] = ScaleChoices.full.value,  # type: ignore[assignment]
) -> None:
    from vpnlab.utils.experiments import cmd_verify, failed_checks
    from vpnlab.utils.verify import SCALES
    from vpnlab.utils.vpnlab_types import VERIFY_COLUMNS

    with handle_errors():
        apply_precision(precision, default=64)
        with progress_bar("[green]Verifying...", None) as progress:
            task = progress.task_ids[0]
            rows = cmd_verify(
                out,
                SCALES[scale.value],
                lambda stage: progress.update(task, description=f"[green]Verifying {stage}..."),
            )
    print_table("Verify", VERIFY_COLUMNS, rows)  # type: ignore[arg-type]
    failed = failed_checks(rows)
    if failed:
        rich.print(f"[red]{len(failed)} check(s) failed:[/red] {', '.join(failed)}")
        raise typer.Exit(EXIT_FAILURE)
    rich.print(f"[green]Successfully[/green] passed {len(rows)} checks.")


@app.callback()  # type: ignore[misc]
def app_callback(
    version: Annotated[
        bool,
        typer.Option(
            "--version",
            "-v",
            callback=version_callback,
            is_eager=True,
            help="Show version and exit.",
        ),
    ] = False,
    debug: Annotated[
        bool,
        typer.Option(
            "--debug",
            "-D",
            is_eager=True,
            help="Enable debug mode and show logs.",
        ),
    ] = False,
) -> None:
    """Value prediction networks on the Collect gridworld."""
    set_vpnlab_debug_mode(debug)
    vpnlab_logger.refresh_level()


if __name__ == "__main__":
    app()
