from collections.abc import Iterator
from contextlib import contextmanager

import numpy as np

g_VPNLAB_DEBUG_MODE = False
g_VPNLAB_PRECISION = 32


def set_vpnlab_debug_mode(is_debug: bool) -> None:
    global g_VPNLAB_DEBUG_MODE  # noqa: PLW0603
    g_VPNLAB_DEBUG_MODE = is_debug


def is_vpnlab_debug_mode() -> bool:
    global g_VPNLAB_DEBUG_MODE  # noqa: PLW0602
    return g_VPNLAB_DEBUG_MODE


def set_vpnlab_precision(bits: int) -> None:
    global g_VPNLAB_PRECISION  # noqa: PLW0603
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    g_VPNLAB_PRECISION = bits


def get_vpnlab_precision() -> int:
    global g_VPNLAB_PRECISION  # noqa: PLW0602
    return g_VPNLAB_PRECISION


def get_vpnlab_dtype() -> np.dtype[np.floating]:
    return np.dtype(np.float64 if get_vpnlab_precision() == 64 else np.float32)  # noqa: PLR2004


@contextmanager
def vpnlab_precision(bits: int) -> Iterator[None]:
    previous = get_vpnlab_precision()
    set_vpnlab_precision(bits)
    try:
        yield
    finally:
        set_vpnlab_precision(previous)
