from dataclasses import dataclass, field

import numpy as np

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import ConfigurationError
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import Array, check_finite

logger: VpnlabLogger = vpnlab_logger.init(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0
    decay_interval: int = 1_000_000
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}", "train.lr")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0 < beta < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {beta}", f"train.{name}")
        if self.decay_interval < 1:
            raise ConfigurationError(
                f"decay interval must be >= 1, got {self.decay_interval}", "train.decay_interval"
            )

    def effective_lr(self, global_step: int | None = None) -> float:
        """lr scaled by lr_decay once per completed decay_interval."""
        completed = self.step if global_step is None else global_step
        return float(self.lr * self.lr_decay ** (completed // self.decay_interval))

    def scalars(self) -> dict[str, float | int]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "lr_decay": self.lr_decay,
            "decay_interval": self.decay_interval,
            "step": self.step,
        }


def adam_step(params: ParamStore, opt: AdamState, global_step: int | None = None) -> None:
    """
    One bias-corrected Adam update over every parameter, then clear gradients.

    global_step drives the lr decay schedule when the optimizer is shared
    with a counter other than its own update count.
    """
    lr = opt.effective_lr(global_step)
    before = opt.effective_lr(None if global_step is None else max(global_step - 1, 0))
    if lr != before:
        logger.info(f"learning rate decayed to {lr:.3g}")

    opt.step += 1
    bias1 = 1.0 - opt.beta1**opt.step
    bias2 = 1.0 - opt.beta2**opt.step
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = opt.beta1 * m + (1.0 - opt.beta1) * grad
        v = opt.beta2 * v + (1.0 - opt.beta2) * grad * grad
        opt.m[name] = m.astype(param.dtype, copy=False)
        opt.v[name] = v.astype(param.dtype, copy=False)
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
        check_finite(update, f"adam update of {name}")
        param.data = (param.data - update).astype(param.dtype, copy=False)
    params.zero_grad()
