"""
Learned baselines sharing netcore and the trainer loop.

DQN reads Q(x, o) straight off an option-conditional network. OPN predicts
future observations with a model network and scores them with a separate
value network; it plans with the same planner as VPN, using the packed
observation (3 grid channels + a time channel) as its state.
"""

from collections.abc import Sequence
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.errors import ConfigurationError
from vpnlab.netcore.layers import Conv2d, ConvTranspose2d
from vpnlab.netcore.params import ParamStore
from vpnlab.netcore.tensor import (
    Array,
    Tensor,
    add,
    constant,
    elu,
    no_grad,
    square,
    sub,
    sum_all,
    take,
)
from vpnlab.planner import DEFAULT_WIDTHS, plan_batch
from vpnlab.vpn_model import (
    CoreBatch,
    Encoder,
    LossTerms,
    ModelConfig,
    OutcomeModule,
    TransitionModule,
    ValueModule,
    VPNModel,
    predicted_discount,
)

logger: VpnlabLogger = vpnlab_logger.init(__name__)

MODEL_KINDS: tuple[str, ...] = ("vpn", "vpn1", "dqn", "opn")
PARAM_COUNT_TOLERANCE: float = 0.10


class Agent(Protocol):
    config: ModelConfig
    params: ParamStore
    has_outcome_model: bool

    def clone(self) -> "Agent": ...

    def q_values(
        self, grids: ArrayLike, times: ArrayLike, d: int, widths: Sequence[int] = ...
    ) -> Array: ...

    def segment_loss(  # noqa: PLR0913
        self,
        grids: ArrayLike,
        times: ArrayLike,
        options: ArrayLike,
        returns: ArrayLike,
        rewards: ArrayLike,
        steps: ArrayLike,
        k: int,
    ) -> LossTerms: ...

    def replay_loss(
        self, grids: ArrayLike, times: ArrayLike, options: ArrayLike, rewards: ArrayLike, steps: ArrayLike
    ) -> LossTerms: ...


def _squared_error(predicted: Tensor, target: ArrayLike) -> Tensor:
    return sum_all(square(sub(predicted, constant(np.asarray(target, dtype=np.float64)))))


class DQNModel:
    has_outcome_model = False

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.params = ParamStore()
        self.encoder = Encoder(self.params, "encoder", config, rng)
        self.transition_module = TransitionModule(self.params, "transition", config, rng)
        self.head = ValueModule(self.params, "q", config.state_size, config.dqn_hidden, rng)

    @property
    def n_options(self) -> int:
        return self.config.n_options

    def clone(self) -> "DQNModel":
        twin = DQNModel(self.config, np.random.default_rng(0))
        twin.params.copy_from(self.params)
        return twin

    def q_forward(self, grids: "Tensor | ArrayLike", times: ArrayLike, options: ArrayLike) -> Tensor:
        """Q(x_b, o_b) for each sample's own option."""
        tensor = grids if isinstance(grids, Tensor) else constant(np.asarray(grids))
        states = self.encoder(tensor, times)
        return self.head(self.transition_module(states, options))

    def dqn_q_values(self, grids: ArrayLike, times: ArrayLike) -> Array:
        """All four Q-values per observation, (B, O)."""
        with no_grad():
            states = self.encoder(constant(np.asarray(grids)), times)
            batch = states.shape[0]
            repeated = take(states, np.repeat(np.arange(batch), self.n_options), axis=0)
            options = np.tile(np.arange(self.n_options), batch)
            q = self.head(self.transition_module(repeated, options))
        return q.data.reshape(batch, self.n_options)

    def q_values(
        self, grids: ArrayLike, times: ArrayLike, d: int, widths: Sequence[int] = DEFAULT_WIDTHS
    ) -> Array:
        return self.dqn_q_values(grids, times)

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
        """Sum over t < T of (R_t - Q(x_t, o_t))^2."""
        option_ids = np.asarray(options, dtype=np.intp)
        length = len(option_ids)
        q = self.q_forward(np.asarray(grids)[:length], np.asarray(times)[:length], option_ids)
        loss = _squared_error(q, np.asarray(returns)[:length])
        return LossTerms(loss, loss.item(), 0.0, 0.0)

    def replay_loss(
        self, grids: ArrayLike, times: ArrayLike, options: ArrayLike, rewards: ArrayLike, steps: ArrayLike
    ) -> LossTerms:
        raise ConfigurationError("DQN has no outcome model to train from replay", "model.kind")


class Decoder:
    """Deconv(64-4x4-2)-Deconv(32-3x3-1)-Deconv(32-3x3-1) then a linear 1x1 conv to 3 channels."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
        first, second, third = config.decoder_channels
        self.deconv1 = ConvTranspose2d(store, f"{prefix}.deconv1", config.state_channels, first, 4, 2, rng)
        self.deconv2 = ConvTranspose2d(store, f"{prefix}.deconv2", first, second, 3, 1, rng)
        self.deconv3 = ConvTranspose2d(store, f"{prefix}.deconv3", second, third, 3, 1, rng)
        self.out = Conv2d(store, f"{prefix}.out", third, 3, 1, 1, rng)

    def __call__(self, states: Tensor) -> Tensor:
        hidden = elu(self.deconv1(states))
        hidden = elu(self.deconv2(hidden))
        hidden = elu(self.deconv3(hidden))
        return self.out(hidden)


class ValueNetwork:
    """Encoder, two Conv(64-3x3-1) and an FC value head; no option input."""

    def __init__(self, store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
        channels = config.state_channels
        self.encoder = Encoder(store, f"{prefix}.encoder", config, rng)
        self.conv1 = Conv2d(store, f"{prefix}.conv1", channels, channels, 3, 1, rng)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", channels, channels, 3, 1, rng)
        self.head = ValueModule(store, f"{prefix}.head", config.state_size, config.dqn_hidden, rng)

    def __call__(self, grids: Tensor, times: ArrayLike) -> Tensor:
        hidden = elu(self.conv1(self.encoder(grids, times)))
        hidden = elu(self.conv2(hidden))
        return self.head(hidden)


class OPNRollout:
    def __init__(self) -> None:
        self.observations: list[Array] = []
        self.times: list[float] = []
        self.rewards: list[float] = []
        self.steps: list[float] = []
        self.values: list[float] = []


class OPNModel:
    has_outcome_model = True

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.params = ParamStore()
        self.encoder = Encoder(self.params, "model.encoder", config, rng)
        self.transition_module = TransitionModule(self.params, "model.transition", config, rng)
        self.outcome_module = OutcomeModule(self.params, "model.outcome", config, rng)
        self.decoder = Decoder(self.params, "model.decoder", config, rng)
        self.value_network = ValueNetwork(self.params, "value", config, rng)

    @property
    def n_options(self) -> int:
        return self.config.n_options

    def clone(self) -> "OPNModel":
        twin = OPNModel(self.config, np.random.default_rng(0))
        twin.params.copy_from(self.params)
        return twin

    def model_step(
        self, grids: Tensor, times: ArrayLike, options: ArrayLike
    ) -> tuple[Tensor, Tensor, Tensor, Array]:
        """(decoded x', r, tau, time') for one model step; time' = time - tau / time_limit."""
        states = self.encoder(grids, times)
        decoded = self.decoder(self.transition_module(states, options))
        reward, steps = self.outcome_module(states, options)
        next_times = np.clip(
            np.asarray(times, dtype=np.float64) - steps.data / self.config.time_limit, 0.0, 1.0
        )
        return decoded, reward, steps, next_times

    def value(self, grids: Tensor, times: ArrayLike) -> Tensor:
        return self.value_network(grids, times)

    # planner interface; a state is a (4, H, W) packed observation

    @staticmethod
    def pack(grids: ArrayLike, times: ArrayLike) -> Array:
        grid_array = np.asarray(grids, dtype=np.float64)
        plane = np.broadcast_to(
            np.asarray(times, dtype=np.float64).reshape(-1, 1, 1, 1),
            (grid_array.shape[0], 1, *grid_array.shape[2:]),
        )
        return np.concatenate([grid_array, plane], axis=1)

    @staticmethod
    def unpack(states: Array) -> tuple[Array, Array]:
        return states[:, :3], states[:, 3, 0, 0]

    def state_value(self, states: Array) -> Array:
        grids, times = self.unpack(states)
        with no_grad():
            return self.value(constant(grids), times).data

    def core_all(self, states: Array) -> CoreBatch:
        grids, times = self.unpack(states)
        batch = states.shape[0]
        options = np.tile(np.arange(self.n_options), batch)
        with no_grad():
            decoded, reward, steps, next_times = self.model_step(
                constant(np.repeat(grids, self.n_options, axis=0)),
                np.repeat(times, self.n_options),
                options,
            )
            values = self.value(decoded, next_times)
        next_states = self.pack(decoded.data, next_times)
        shape = (batch, self.n_options)
        return CoreBatch(
            reward=reward.data.reshape(shape),
            discount=predicted_discount(self.config.discount, steps.data).reshape(shape),
            value=values.data.reshape(shape),
            next_state=next_states.reshape(*shape, *next_states.shape[1:]),
        )

    def opn_rollout(self, grid: ArrayLike, time: float, options: Sequence[int]) -> OPNRollout:
        """Unroll the model network in observation space, re-feeding each decoded frame."""
        rollout = OPNRollout()
        grids = constant(np.asarray(grid)[np.newaxis])
        times: Array = np.array([time], dtype=np.float64)
        with no_grad():
            for option in options:
                decoded, reward, steps, times = self.model_step(grids, times, [option])
                rollout.observations.append(decoded.data[0])
                rollout.times.append(float(times[0]))
                rollout.rewards.append(float(reward.data[0]))
                rollout.steps.append(float(steps.data[0]))
                rollout.values.append(float(self.value(decoded, times).data[0]))
                grids = decoded
        return rollout

    def q_values(
        self, grids: ArrayLike, times: ArrayLike, d: int, widths: Sequence[int] = DEFAULT_WIDTHS
    ) -> Array:
        states = self.pack(grids, times)
        return np.stack([result.q_values for result in plan_batch(states, d, self, widths)])

    def _model_loss(  # noqa: PLR0913
        self,
        grids: Array,
        times: Array,
        options: Array,
        rewards: Array,
        steps: Array,
        k: int,
        with_observation: bool,
    ) -> tuple[list[Tensor], float, float, float]:
        length = len(options)
        terms: list[Tensor] = []
        reward_loss = steps_loss = observation_loss = 0.0
        inputs = constant(grids[:length])
        input_times = times[:length]
        for depth in range(1, min(k, length) + 1):
            count = length - depth + 1
            if depth > 1:
                inputs = take(inputs, np.arange(count), axis=0)
                input_times = input_times[:count]
            decoded, reward, predicted_steps, next_times = self.model_step(
                inputs, input_times, options[depth - 1 :]
            )
            reward_term = _squared_error(reward, rewards[depth - 1 : length])
            terms.append(reward_term)
            reward_loss += reward_term.item()
            if not self.config.fixed_discount:
                steps_term = _squared_error(predicted_steps, steps[depth - 1 : length])
                terms.append(steps_term)
                steps_loss += steps_term.item()
            if with_observation:
                observation_term = _squared_error(decoded, grids[depth : length + 1])
                terms.append(observation_term)
                observation_loss += observation_term.item()
            inputs, input_times = decoded, next_times
        return terms, reward_loss, steps_loss, observation_loss

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
        """
        Model network: reward, step-count and pixel errors over a k-deep lattice
        in observation space. Value network: (R_t - V(x_t))^2 for t <= T.
        """
        grid_array = np.asarray(grids, dtype=np.float64)
        time_array = np.asarray(times, dtype=np.float64)
        option_ids = np.asarray(options, dtype=np.intp)
        terms, reward_loss, steps_loss, observation_loss = self._model_loss(
            grid_array,
            time_array,
            option_ids,
            np.asarray(rewards, dtype=np.float64),
            np.asarray(steps, dtype=np.float64),
            k,
            with_observation=True,
        )
        value_term = _squared_error(
            self.value(constant(grid_array), time_array), np.asarray(returns)[: len(grid_array)]
        )
        total = value_term
        for term in terms:
            total = add(total, term)
        return LossTerms(total, value_term.item(), reward_loss, steps_loss, observation_loss)

    def replay_loss(
        self, grids: ArrayLike, times: ArrayLike, options: ArrayLike, rewards: ArrayLike, steps: ArrayLike
    ) -> LossTerms:
        terms, reward_loss, steps_loss, _ = self._model_loss(
            np.asarray(grids, dtype=np.float64),
            np.asarray(times, dtype=np.float64),
            np.asarray(options, dtype=np.intp),
            np.asarray(rewards, dtype=np.float64),
            np.asarray(steps, dtype=np.float64),
            1,
            with_observation=False,
        )
        total = terms[0]
        for term in terms[1:]:
            total = add(total, term)
        return LossTerms(total, 0.0, reward_loss, steps_loss)


def vpn_param_count(config: ModelConfig) -> int:
    return VPNModel(config, np.random.default_rng(0)).params.count()


def check_param_budget(model: DQNModel, config: ModelConfig) -> None:
    reference = vpn_param_count(config)
    count = model.params.count()
    if abs(count - reference) > PARAM_COUNT_TOLERANCE * reference:
        raise ConfigurationError(
            f"DQN has {count} parameters, VPN has {reference}; adjust model.dqn_hidden "
            f"to bring them within {PARAM_COUNT_TOLERANCE:.0%}",
            "model.dqn_hidden",
        )


def build_model(config: ModelConfig, rng: np.random.Generator, check_param_count: bool = True) -> Agent:
    logger.debug(f"building {config.kind} model for a {config.height}x{config.width} grid")
    if config.kind in ("vpn", "vpn1"):
        return VPNModel(config, rng)
    if config.kind == "dqn":
        model = DQNModel(config, rng)
        if check_param_count:
            check_param_budget(model, config)
        return model
    if config.kind == "opn":
        return OPNModel(config, rng)
    raise ConfigurationError(f"unknown model kind `{config.kind}`", "model.kind")
