"""
Value prediction network: encoder, value, outcome and transition modules, the
core module composed from them, k-step prediction lattices and their loss.

Abstract states are (B, C, H', W') tensors. Every module works on a batch; a
single state is a batch of one.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from vpnlab.errors import ConfigurationError
from vpnlab.gridworld import N_OPTIONS
from vpnlab.netcore.layers import Conv2d, Linear, OptionConv2d, conv_output_size
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import (
    Array,
    Tensor,
    add,
    concat,
    constant,
    elu,
    flatten,
    mul,
    no_grad,
    reshape,
    sigmoid,
    square,
    sub,
    sum_all,
    take,
)
from vpnlab.planner import DEFAULT_WIDTHS, plan_batch


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "vpn"
    height: int = 10
    width: int = 10
    n_options: int = N_OPTIONS
    encoder_channels: tuple[int, int] = (32, 32)
    state_channels: int = 64
    outcome_hidden: int = 64
    value_hidden: int = 64
    dqn_hidden: int = 256
    decoder_channels: tuple[int, int, int] = (64, 32, 32)
    discount: float = 0.98
    time_limit: int = 20
    fixed_discount: bool = False

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (
            self.state_channels,
            conv_output_size(self.height, 4, 2),
            conv_output_size(self.width, 4, 2),
        )

    @property
    def state_size(self) -> int:
        channels, height, width = self.state_shape
        return channels * height * width

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "height": self.height,
            "width": self.width,
            "n_options": self.n_options,
            "encoder_channels": list(self.encoder_channels),
            "state_channels": self.state_channels,
            "outcome_hidden": self.outcome_hidden,
            "value_hidden": self.value_hidden,
            "dqn_hidden": self.dqn_hidden,
            "decoder_channels": list(self.decoder_channels),
            "discount": self.discount,
            "time_limit": self.time_limit,
            "fixed_discount": self.fixed_discount,
        }

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ModelConfig":
        fields = dict(values)
        fields["encoder_channels"] = tuple(fields.get("encoder_channels", (32, 32)))
        fields["decoder_channels"] = tuple(fields.get("decoder_channels", (64, 32, 32)))
        return cls(**fields)


def time_plane(times: ArrayLike, height: int, width: int) -> Tensor:
    """Broadcast each normalized remaining-time scalar to a constant (1, H, W) channel."""
    values = np.asarray(times, dtype=np.float64).reshape(-1, 1, 1, 1)
    return constant(np.broadcast_to(values, (values.shape[0], 1, height, width)))


def as_observation_tensor(grids: "Tensor | ArrayLike") -> Tensor:
    if isinstance(grids, Tensor):
        return grids
    return constant(np.asarray(grids))


class Encoder:
    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
        first, second = config.encoder_channels
        self.config = config
        self.conv1 = Conv2d(store, f"{prefix}.conv1", 3, first, 3, 1, rng)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", first, second, 3, 1, rng)
        self.conv3 = Conv2d(store, f"{prefix}.conv3", second + 1, config.state_channels, 4, 2, rng)

    def __call__(self, grids: Tensor, times: ArrayLike) -> Tensor:
        if grids.ndim != 4 or grids.shape[1:] != (3, self.config.height, self.config.width):  # noqa: PLR2004
            raise ConfigurationError(
                f"observation batch {grids.shape} does not match "
                f"(B, 3, {self.config.height}, {self.config.width})"
            )
        hidden = elu(self.conv1(grids))
        hidden = elu(self.conv2(hidden))
        plane = time_plane(times, self.config.height, self.config.width)
        return elu(self.conv3(concat([hidden, plane], axis=1)))


class ValueModule:
    def __init__(
        self, store: ParamStore, prefix: str, in_features: int, hidden: int, rng: np.random.Generator
    ) -> None:
        self.fc1 = Linear(store, f"{prefix}.fc1", in_features, hidden, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", hidden, 1, rng)

    def __call__(self, features: Tensor) -> Tensor:
        hidden = elu(self.fc1(flatten(features)))
        out = self.fc2(hidden)
        return reshape(out, (out.shape[0],))


class OutcomeModule:
    """Reward and step-count heads; no residual path."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
        channels = config.state_channels
        self.conv1 = OptionConv2d(store, f"{prefix}.optconv", config.n_options, channels, channels, 3, 1, rng)
        self.conv2 = Conv2d(store, f"{prefix}.conv", channels, channels, 3, 1, rng)
        self.fc1 = Linear(store, f"{prefix}.fc1", config.state_size, config.outcome_hidden, rng)
        self.fc2 = Linear(store, f"{prefix}.fc2", config.outcome_hidden, 2, rng)
        self.fixed_discount = config.fixed_discount

    def __call__(self, states: Tensor, options: ArrayLike) -> tuple[Tensor, Tensor]:
        hidden = elu(self.conv1(states, options))
        hidden = elu(self.conv2(hidden))
        out = self.fc2(elu(self.fc1(flatten(hidden))))
        batch = out.shape[0]
        reward = reshape(take(out, [0], axis=1), (batch,))
        if self.fixed_discount:
            return reward, constant(np.ones(batch))
        return reward, reshape(take(out, [1], axis=1), (batch,))


class TransitionModule:
    """s' = s + mask * delta, where the mask gates the change of abstract state."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
        channels = config.state_channels
        self.conv1 = OptionConv2d(store, f"{prefix}.optconv", config.n_options, channels, channels, 3, 1, rng)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", channels, channels, 3, 1, rng)
        self.conv3 = Conv2d(store, f"{prefix}.conv3", channels, channels, 3, 1, rng)
        self.mask = Conv2d(store, f"{prefix}.mask", channels, channels, 1, 1, rng)

    def delta(self, states: Tensor, options: ArrayLike) -> tuple[Tensor, Tensor]:
        hidden = elu(self.conv1(states, options))
        hidden = elu(self.conv2(hidden))
        return elu(self.conv3(hidden)), sigmoid(self.mask(hidden))

    def __call__(self, states: Tensor, options: ArrayLike) -> Tensor:
        change, gate = self.delta(states, options)
        return add(states, mul(change, gate))


@dataclass
class CorePrediction:
    reward: Tensor
    steps: Tensor
    discount: Array
    value: Tensor
    next_state: Tensor

    @property
    def q(self) -> Array:
        return self.reward.data + self.discount * self.value.data


@dataclass
class CoreBatch:
    """One-step predictions for every (state, option) pair, indexed [state, option]."""

    reward: Array
    discount: Array
    value: Array
    next_state: Array

    @property
    def q(self) -> Array:
        return self.reward + self.discount * self.value


@dataclass
class LatticeLevel:
    """Depth-l predictions from core inputs s^{l-1}_t for t = start .. T-1."""

    depth: int
    start: int
    rewards: Tensor
    steps: Tensor
    values: Tensor
    next_states: Tensor


@dataclass
class PredictionLattice:
    levels: list[LatticeLevel]
    length: int

    def entry(self, depth: int, t: int) -> tuple[float, float, float, Array]:
        """(r, tau, V(s^l_{t+1}), s^l_{t+1}) of the core step applied at time t."""
        level = self.levels[depth - 1]
        i = t - level.start
        if not 0 <= i < level.rewards.size:
            raise IndexError(f"no depth-{depth} prediction at t={t}")
        return (
            float(level.rewards.data[i]),
            float(level.steps.data[i]),
            float(level.values.data[i]),
            level.next_states.data[i],
        )


@dataclass
class LossTerms:
    total: Tensor
    value: float
    reward: float
    steps: float
    observation: float = 0.0


def predicted_discount(discount: float, steps: Array) -> Array:
    return np.power(discount, steps)


class VPNModel:
    has_outcome_model = True

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        store: ParamStore | None = None,
        prefix: str = "",
    ) -> None:
        self.config = config
        self.params = store if store is not None else ParamStore()
        self.encoder = Encoder(self.params, f"{prefix}encoder", config, rng)
        self.value_module = ValueModule(
            self.params, f"{prefix}value", config.state_size, config.value_hidden, rng
        )
        self.outcome_module = OutcomeModule(self.params, f"{prefix}outcome", config, rng)
        self.transition_module = TransitionModule(self.params, f"{prefix}transition", config, rng)

    @property
    def n_options(self) -> int:
        return self.config.n_options

    def clone(self) -> "VPNModel":
        twin = type(self)(self.config, np.random.default_rng(0))
        twin.params.copy_from(self.params)
        return twin

    def encode(self, grids: "Tensor | ArrayLike", times: ArrayLike) -> Tensor:
        return self.encoder(as_observation_tensor(grids), times)

    def value(self, states: Tensor) -> Tensor:
        return self.value_module(states)

    def outcome(self, states: Tensor, options: ArrayLike) -> tuple[Tensor, Tensor]:
        return self.outcome_module(states, options)

    def transition(self, states: Tensor, options: ArrayLike) -> Tensor:
        return self.transition_module(states, options)

    def core(self, states: Tensor, options: ArrayLike) -> CorePrediction:
        next_states = self.transition(states, options)
        reward, steps = self.outcome(states, options)
        return CorePrediction(
            reward=reward,
            steps=steps,
            discount=predicted_discount(self.config.discount, steps.data),
            value=self.value(next_states),
            next_state=next_states,
        )

    # planner interface

    def encode_states(self, grids: ArrayLike, times: ArrayLike) -> Array:
        with no_grad():
            return self.encode(grids, times).data

    def state_value(self, states: Array) -> Array:
        with no_grad():
            return self.value(constant(states)).data

    def core_all(self, states: Array) -> CoreBatch:
        batch = states.shape[0]
        options = np.tile(np.arange(self.n_options), batch)
        with no_grad():
            prediction = self.core(constant(np.repeat(states, self.n_options, axis=0)), options)
        shape = (batch, self.n_options)
        return CoreBatch(
            reward=prediction.reward.data.reshape(shape),
            discount=prediction.discount.reshape(shape),
            value=prediction.value.data.reshape(shape),
            next_state=prediction.next_state.data.reshape(*shape, *states.shape[1:]),
        )

    def rollout_lattice(
        self, grids: "Tensor | ArrayLike", times: ArrayLike, options: ArrayLike, k: int
    ) -> PredictionLattice:
        """
        Every l-step prediction (l <= k) inside a segment of T steps.

        grids/times hold x_0 .. x_{T-1}; options o_0 .. o_{T-1}. Depth l covers
        t = l-1 .. T-1 and reuses the depth l-1 next states as its inputs.
        """
        option_ids = np.asarray(options, dtype=np.intp)
        length = len(option_ids)
        if length < 1:
            raise ConfigurationError("segment must hold at least one step")
        if k < 1:
            raise ConfigurationError(f"prediction depth k must be >= 1, got {k}")
        inputs = self.encode(grids, times)
        levels: list[LatticeLevel] = []
        for depth in range(1, min(k, length) + 1):
            count = length - depth + 1
            if depth > 1:
                inputs = take(levels[-1].next_states, np.arange(count), axis=0)
            prediction = self.core(inputs, option_ids[depth - 1 :])
            levels.append(
                LatticeLevel(
                    depth=depth,
                    start=depth - 1,
                    rewards=prediction.reward,
                    steps=prediction.steps,
                    values=prediction.value,
                    next_states=prediction.next_state,
                )
            )
        return PredictionLattice(levels, length)

    def lattice_loss(
        self,
        lattice: PredictionLattice,
        returns: ArrayLike,
        rewards: ArrayLike,
        steps: ArrayLike,
        include_value: bool = True,
    ) -> LossTerms:
        return prediction_loss(
            lattice,
            returns,
            rewards,
            steps,
            include_value=include_value,
            include_steps=not self.config.fixed_discount,
        )

    # trainer interface

    def q_values(
        self, grids: ArrayLike, times: ArrayLike, d: int, widths: Sequence[int] = DEFAULT_WIDTHS
    ) -> Array:
        """Root Q^d for every option of every observation in the batch."""
        states = self.encode_states(grids, times)
        return np.stack([result.q_values for result in plan_batch(states, d, self, widths)])

    def segment_loss(  # noqa: PLR0913
        self,
        grids: ArrayLike,
        times: ArrayLike,
        options: ArrayLike,
        returns: ArrayLike,
        rewards: ArrayLike,
        steps: ArrayLike,
        k: int,
    ) -> LossTerms:
        length = len(np.asarray(options))
        lattice = self.rollout_lattice(np.asarray(grids)[:length], np.asarray(times)[:length], options, k)
        return self.lattice_loss(lattice, returns, rewards, steps)

    def replay_loss(
        self, grids: ArrayLike, times: ArrayLike, options: ArrayLike, rewards: ArrayLike, steps: ArrayLike
    ) -> LossTerms:
        """Reward and step-count terms of one-step predictions only."""
        lattice = self.rollout_lattice(grids, times, options, 1)
        returns = np.zeros(lattice.length + 1)
        return self.lattice_loss(lattice, returns, rewards, steps, include_value=False)


def _squared_error(predicted: Tensor, target: Array) -> Tensor:
    return sum_all(square(sub(predicted, constant(target))))


def prediction_loss(  # noqa: PLR0913
    lattice: PredictionLattice,
    returns: ArrayLike,
    rewards: ArrayLike,
    steps: ArrayLike,
    include_value: bool = True,
    include_steps: bool = True,
) -> LossTerms:
    """
    Sum over lattice entries of (R_{t+1} - v)^2 + (r_t - r^)^2 + (k_t - tau^)^2.

    returns holds R_0 .. R_T (R_T is the bootstrap value); rewards and steps
    hold the observed r_t and k_t for t < T.
    """
    targets = np.asarray(returns, dtype=np.float64)
    observed_rewards = np.asarray(rewards, dtype=np.float64)
    observed_steps = np.asarray(steps, dtype=np.float64)
    length = lattice.length
    if targets.shape != (length + 1,) or observed_rewards.shape != (length,) or observed_steps.shape != (length,):
        raise ConfigurationError(
            f"targets for a {length}-step segment need R of length {length + 1} and r, k of length {length}"
        )

    terms: list[Tensor] = []
    value_loss = reward_loss = steps_loss = 0.0
    for level in lattice.levels:
        first = level.start
        reward_term = _squared_error(level.rewards, observed_rewards[first:length])
        terms.append(reward_term)
        reward_loss += reward_term.item()
        if include_value:
            value_term = _squared_error(level.values, targets[first + 1 : length + 1])
            terms.append(value_term)
            value_loss += value_term.item()
        if include_steps:
            steps_term = _squared_error(level.steps, observed_steps[first:length])
            terms.append(steps_term)
            steps_loss += steps_term.item()

    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return LossTerms(total, value_loss, reward_loss, steps_loss)


def tiny_model_config(**overrides: Any) -> ModelConfig:
    """A small layout for gradient checks and unit tests."""
    base = ModelConfig(
        height=6,
        width=6,
        encoder_channels=(3, 3),
        state_channels=4,
        outcome_hidden=5,
        value_hidden=5,
        dqn_hidden=6,
        decoder_channels=(4, 3, 3),
        time_limit=8,
    )
    return replace(base, **overrides)
