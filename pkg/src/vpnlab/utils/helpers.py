import csv
import os
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import UsageError

logger: VpnlabLogger = vpnlab_logger.init(__name__)

STREAM_IDS: dict[str, int] = {
    "env": 0,
    "init": 1,
    "epsilon": 2,
    "eval": 3,
    "replay": 4,
}

RUN_FORMAT_VERSION: int = 1


class SeedStreams:
    """Named RNG streams derived from one master seed."""

    def __init__(self, master_seed: int) -> None:
        self._master_seed = int(master_seed)

    @property
    def master_seed(self) -> int:
        return self._master_seed

    def generator(self, stream: str, *indices: int) -> np.random.Generator:
        if stream not in STREAM_IDS:
            raise KeyError(f"unknown seed stream `{stream}`")
        return np.random.default_rng([self._master_seed, STREAM_IDS[stream], *map(int, indices)])


def prepare_output_dir(path: Path, resume: bool = False) -> Path:
    """Create an output directory, refusing to reuse a non-empty one unless resuming."""
    if path.exists() and any(path.iterdir()) and not resume:
        raise UsageError(f"output directory {path} is not empty; pick a new --out or pass --resume")
    if resume and not path.is_dir():
        raise UsageError(f"cannot resume: {path} does not exist")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_yaml(path: Path, payload: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as file:
        yaml.safe_dump(dict(payload), file, sort_keys=True)


def read_yaml(path: Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as file:
        return dict(yaml.safe_load(file) or {})


def write_run_manifest(out_dir: Path, command: str, settings: Mapping[str, Any]) -> None:
    write_yaml(
        out_dir / "run.yaml",
        {"command": command, "format_version": RUN_FORMAT_VERSION, "settings": dict(settings)},
    )


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(
    path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]], append: bool = False
) -> None:
    exists = path.is_file() and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        if not (append and exists):
            writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(column)) for column in columns])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as file:
        return list(csv.DictReader(file))
