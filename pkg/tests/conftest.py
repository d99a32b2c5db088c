from collections.abc import Callable, Iterator
from pathlib import Path

import pytest

from vpnlab.config import set_vpnlab_debug_mode, vpnlab_precision
from vpnlab.gridworld import GridConfig, GridState, parse_state
from vpnlab.vpn_model import ModelConfig, tiny_model_config

CONFIGS_DIR: Path = Path(__file__).resolve().parent.parent / "src" / "configs"

OPEN_LAYOUT = """\
......
......
..A...
......
....G.
......
steps: 8
"""


@pytest.fixture
def float64() -> Iterator[None]:
    with vpnlab_precision(64):
        yield


@pytest.fixture
def debug_mode() -> Iterator[None]:
    set_vpnlab_debug_mode(True)
    try:
        yield
    finally:
        set_vpnlab_debug_mode(False)


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS_DIR


@pytest.fixture
def small_env() -> GridConfig:
    return GridConfig(width=6, height=6, n_goals=3, n_walls=4, time_limit=8)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def open_state() -> GridState:
    return parse_state(OPEN_LAYOUT)


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    def write(*lines: str, name: str = "run.cfg") -> Path:
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write
