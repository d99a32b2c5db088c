from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import Array, Tensor, backward, no_grad

LossFn = Callable[[], Tensor]


# Full model losses: at h = 1e-5 round-off swamps gradients near 1e-5.
FULL_LOSS_STEP: float = 1e-4
FULL_LOSS_ATOL: float = 1e-9


def relative_error(analytic: Array, numeric: Array, floor: float = 1e-4, atol: float = 0.0) -> float:
    """|a - n| / (|a| + |n|), with the denominator held at floor or above; |a - n| <= atol counts as agreement."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    if diff <= atol:
        return 0.0
    scale = float(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)))
    return diff / max(scale, floor)


def _entries(
    size: int, samples: int | None, rng: np.random.Generator | None
) -> Array:
    if samples is None or samples >= size:
        return np.arange(size)
    generator = rng if rng is not None else np.random.default_rng(0)
    return np.sort(generator.choice(size, size=samples, replace=False))


def finite_diff_grad(  # noqa: PLR0913
    loss_fn: LossFn,
    params: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, tuple[Array, Array]]:
    """
    Central differences (L(p + h) - L(p - h)) / 2h per parameter entry.

    Returns name -> (flat entry indices, gradient at those entries). With
    samples set, only that many entries per parameter are perturbed.
    """
    result: dict[str, tuple[Array, Array]] = {}
    for name in names if names is not None else params.names():
        param = params[name]
        original = param.data
        index = _entries(original.size, samples, rng)
        grads = np.empty(len(index), dtype=np.float64)
        for position, flat in enumerate(index):
            shifted = original.copy()
            shifted.flat[flat] = original.flat[flat] + h
            param.data = shifted
            with no_grad():
                upper = loss_fn().item()
            shifted = original.copy()
            shifted.flat[flat] = original.flat[flat] - h
            param.data = shifted
            with no_grad():
                lower = loss_fn().item()
            grads[position] = (upper - lower) / (2.0 * h)
        param.data = original
        result[name] = (index, grads)
    return result


def analytic_grad(loss_fn: LossFn, params: ParamStore) -> dict[str, Array]:
    params.zero_grad()
    backward(loss_fn())
    grads = params.grads()
    params.zero_grad()
    return grads


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    per_param: dict[str, float]

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def check_gradients(  # noqa: PLR0913
    loss_fn: LossFn,
    params: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 0.0,
) -> GradCheckResult:
    analytic = analytic_grad(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, h=h, names=names, samples=samples, rng=rng)
    per_param = {
        name: relative_error(analytic[name].ravel()[index], values, atol=atol)
        for name, (index, values) in numeric.items()
    }
    return GradCheckResult(max(per_param.values(), default=0.0), per_param)
