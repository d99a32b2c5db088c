from collections.abc import Iterator, Mapping

import numpy as np

from vpnlab.config import get_vpnlab_dtype
from vpnlab.errors import ConfigurationError
from vpnlab.netcore.tensor import Array, Tensor


class ParamStore:
    """Named parameters, each with a gradient accumulator of the same shape."""

    def __init__(self, dtype: np.dtype[np.floating] | None = None) -> None:
        self._dtype = np.dtype(dtype or get_vpnlab_dtype())
        self._params: dict[str, Tensor] = {}

    @property
    def dtype(self) -> np.dtype[np.floating]:
        return self._dtype

    def add(
        self,
        name: str,
        shape: tuple[int, ...],
        *,
        fan_in: int | None = None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """
        Register a parameter. With fan_in it is drawn from
        U(-sqrt(1/fan_in), sqrt(1/fan_in)), otherwise it starts at zero.
        """
        if name in self._params:
            raise ConfigurationError(f"parameter `{name}` registered twice")
        if fan_in is not None:
            if rng is None:
                raise ConfigurationError(f"parameter `{name}` needs an rng to initialize")
            bound = np.sqrt(1.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.zeros(shape)
        param = Tensor(values, name=name, dtype=self.dtype).requires_grad_()
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(param.size for param in self._params.values())

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = np.zeros_like(param.data)

    def values(self) -> dict[str, Array]:
        return {name: param.data.copy() for name, param in self._params.items()}

    def grads(self) -> dict[str, Array]:
        return {
            name: (param.grad if param.grad is not None else np.zeros_like(param.data)).copy()
            for name, param in self._params.items()
        }

    def load_values(self, values: Mapping[str, Array]) -> None:
        missing = set(self._params) - set(values)
        unknown = set(values) - set(self._params)
        if missing or unknown:
            raise ConfigurationError(
                f"parameter names do not match: missing {sorted(missing)}, unknown {sorted(unknown)}"
            )
        for name, param in self._params.items():
            value = np.asarray(values[name])
            if value.shape != param.shape:
                raise ConfigurationError(
                    f"parameter `{name}` has shape {param.shape}, got {value.shape}"
                )
            param.data = value.astype(self.dtype, copy=True)

    def copy_from(self, other: "ParamStore") -> None:
        self.load_values({name: param.data for name, param in other.items()})

    def add_grads_from(self, other: "ParamStore") -> None:
        for name, param in self._params.items():
            source = other[name].grad
            if source is not None and param.grad is not None:
                param.grad += source
