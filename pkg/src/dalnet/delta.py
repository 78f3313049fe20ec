"""The Delta Activation Layer: sigma integration, quantized activation, delta.

A full layer keeps a neuron state ``Z`` (initialised with the bias) and the
previously emitted output ``O_prev`` (initialised with zeros). Each step
integrates incoming deltas into ``Z``, quantizes the activation on a grid of
step ``q``, optionally max-pools, and emits only the change since the last
step. Because the quantizer has no threshold, the emitted deltas telescope back
to exactly the quantized activation a stateless layer would produce.

Either half can be switched off: ``skip_integration`` makes a "delta-only"
layer fed with dense pre-activations, ``skip_differentiation`` a "sigma-only"
layer that emits dense outputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError
from .tensor import OpCounter, SparseEvents, batch_max_pool, sparsify


class ActivationFn(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self is ActivationFn.RELU:
            return np.maximum(z, 0.0)
        if self is ActivationFn.SIGMOID:
            return _sigmoid(z)
        return z

    def grad(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self is ActivationFn.RELU:
            return (z > 0).astype(np.float64)
        if self is ActivationFn.SIGMOID:
            s = _sigmoid(z)
            return s * (1.0 - s)
        return np.ones_like(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class QuantMode(str, enum.Enum):
    NEURON = "neuron-wise"
    CHANNEL = "channel-wise"
    LAYER = "layer-wise"


DEFAULT_Q_INIT = {ActivationFn.RELU: 0.1, ActivationFn.SIGMOID: 0.05, ActivationFn.IDENTITY: 0.1}
Q_MIN = 1e-4


@dataclass(frozen=True)
class DeltaLayerConfig:
    activation: ActivationFn = ActivationFn.RELU
    quant_mode: QuantMode = QuantMode.CHANNEL
    sparsity_factor: float = 0.0
    max_pool: int | None = None
    skip_integration: bool = False
    skip_differentiation: bool = False
    q_init: float | None = None
    q_min: float = Q_MIN
    quantize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationFn(self.activation))
        object.__setattr__(self, "quant_mode", QuantMode(self.quant_mode))
        if self.q_init is None:
            object.__setattr__(self, "q_init", DEFAULT_Q_INIT[self.activation])
        if not self.q_min > 0 or self.q_init < self.q_min:
            raise ConfigurationError(f"need q_init >= q_min > 0, got q_init={self.q_init}, q_min={self.q_min}")
        if self.sparsity_factor < 0:
            raise ConfigurationError("sparsity_factor must be nonnegative")
        if self.max_pool is not None and self.max_pool < 1:
            raise ConfigurationError("max_pool window must be positive")


@dataclass(frozen=True)
class PlainActivation:
    """A stateless, unquantized activation; ``sparsity_factor`` weights an L1 penalty on its output."""

    activation: ActivationFn = ActivationFn.RELU
    sparsity_factor: float = 0.0
    max_pool: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationFn(self.activation))
        if self.sparsity_factor < 0:
            raise ConfigurationError("sparsity_factor must be nonnegative")


def q_shape(config: DeltaLayerConfig, z_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape of the quantization-step tensor.

    Neuron-wise steps belong to the neurons the layer emits, so behind a
    max-pool there is one step per pooling window (see :func:`expand_q`).
    """
    if config.quant_mode is QuantMode.LAYER:
        return (1,)
    if config.quant_mode is QuantMode.CHANNEL:
        # dense layers have one neuron per channel
        return (z_shape[-1],)
    return pooled_shape(z_shape, config.max_pool)


def expand_q(config: DeltaLayerConfig, q: np.ndarray) -> np.ndarray:
    """``q`` in a form that broadcasts against the pre-pool activation."""
    if config.quant_mode is QuantMode.NEURON and config.max_pool:
        w = config.max_pool
        return np.repeat(np.repeat(q, w, axis=-3), w, axis=-2)
    return q


def pooled_shape(shape: tuple[int, ...], window: int | None) -> tuple[int, ...]:
    if window is None:
        return tuple(shape)
    if len(shape) != 3 or shape[0] % window or shape[1] % window:
        raise DimensionError(f"max-pool window {window} does not divide {shape}")
    return (shape[0] // window, shape[1] // window, shape[2])


@dataclass
class DeltaLayerState:
    Z: np.ndarray | None
    O_prev: np.ndarray | None
    q: np.ndarray
    t: int = 0
    config: DeltaLayerConfig = field(default_factory=DeltaLayerConfig)


def init_state(config: DeltaLayerConfig, B: np.ndarray | None, shape, q: np.ndarray | None = None) -> DeltaLayerState:
    """Fresh state: ``Z = B`` broadcast to ``shape``, ``O_prev = 0``, ``q = q_init``."""
    shape = tuple(shape)
    if B is None:
        Z = np.zeros(shape)
    else:
        try:
            Z = np.broadcast_to(np.asarray(B, dtype=np.float64), shape).copy()
        except ValueError as exc:
            raise DimensionError(f"bias {np.shape(B)} does not broadcast to {shape}") from exc
    out_shape = pooled_shape(shape, config.max_pool)
    if q is None:
        q = np.full(q_shape(config, shape), config.q_init, dtype=np.float32)
    return DeltaLayerState(
        Z=None if config.skip_integration else Z,
        O_prev=None if config.skip_differentiation else np.zeros(out_shape),
        q=q,
        config=config,
    )


def sigma_step(state: DeltaLayerState, dz: SparseEvents, counter: OpCounter | None = None) -> np.ndarray:
    """Integrate incoming deltas into the neuron state and return it."""
    if state.config.skip_integration or state.Z is None:
        raise ConfigurationError("sigma_step on a layer with integration skipped")
    if tuple(dz.shape) != state.Z.shape:
        raise DimensionError(f"delta shape {dz.shape} != state shape {state.Z.shape}")
    flat = state.Z.reshape(-1)
    flat[dz.indices] += dz.values
    if counter is not None:
        counter.adds_state += dz.nnz
    state.t += 1
    return state.Z


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_activation(z: np.ndarray, q: np.ndarray | float, f: ActivationFn | str) -> np.ndarray:
    """``round(f(z) / q) * q`` with ties rounded away from zero."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise DomainError("quantization step must be positive")
    return round_half_away(ActivationFn(f)(z) / q) * q


def activate(config: DeltaLayerConfig, z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Quantized (or, with ``quantize=False``, plain) activation before pooling."""
    if config.quantize:
        return quantize_activation(z, expand_q(config, q), config.activation)
    return config.activation(z)


def maybe_max_pool(o: np.ndarray, config) -> np.ndarray:
    if config.max_pool is None:
        return o
    o = np.asarray(o, dtype=np.float64)
    pooled_shape(o.shape, config.max_pool)
    return batch_max_pool(o[None], config.max_pool)[0]


def delta_step(state: DeltaLayerState, o: np.ndarray) -> SparseEvents:
    """Emit ``o - O_prev`` as events and remember ``o``."""
    if state.config.skip_differentiation or state.O_prev is None:
        raise ConfigurationError("delta_step on a layer with differentiation skipped")
    o = np.asarray(o, dtype=np.float64)
    if o.shape != state.O_prev.shape:
        raise DimensionError(f"output shape {o.shape} != previous output shape {state.O_prev.shape}")
    events = sparsify(o - state.O_prev)
    state.O_prev = o.copy()
    return events


def layer_forward(
    state: DeltaLayerState,
    config: DeltaLayerConfig,
    x: SparseEvents | np.ndarray,
    counter: OpCounter | None = None,
) -> SparseEvents | np.ndarray:
    """One step of the layer on pre-activation input ``x``.

    ``x`` is a :class:`SparseEvents` of pre-activation deltas when integration
    is on, and a dense pre-activation tensor when it is skipped. The result is
    events unless differentiation is skipped.
    """
    if config.skip_integration:
        if isinstance(x, SparseEvents):
            raise ConfigurationError("delta-only layer expects dense input, got events")
        z = np.asarray(x, dtype=np.float64)
        state.t += 1
    else:
        if not isinstance(x, SparseEvents):
            raise ConfigurationError("integrating layer expects events, got a dense tensor")
        z = sigma_step(state, x, counter)
    o = maybe_max_pool(activate(config, z, state.q), config)
    if config.skip_differentiation:
        return o
    return delta_step(state, o)


def sparsity_loss(deltas: SparseEvents | np.ndarray) -> float:
    """L1 norm of emitted deltas."""
    if isinstance(deltas, SparseEvents):
        return float(np.abs(deltas.values).sum())
    return float(np.abs(np.asarray(deltas, dtype=np.float64)).sum())


def state_snapshot(state: DeltaLayerState) -> dict[str, np.ndarray]:
    snap = {"t": np.array([state.t], dtype=np.float64)}
    if state.Z is not None:
        snap["Z"] = state.Z
    if state.O_prev is not None:
        snap["O_prev"] = state.O_prev
    return snap


def restore_snapshot(state: DeltaLayerState, snap: dict[str, np.ndarray]) -> None:
    state.t = int(snap["t"][0])
    if state.Z is not None:
        state.Z = np.array(snap["Z"], dtype=np.float64).reshape(state.Z.shape)
    if state.O_prev is not None:
        state.O_prev = np.array(snap["O_prev"], dtype=np.float64).reshape(state.O_prev.shape)


__all__ = [
    "ActivationFn",
    "DeltaLayerConfig",
    "DeltaLayerState",
    "PlainActivation",
    "QuantMode",
    "Q_MIN",
    "activate",
    "delta_step",
    "init_state",
    "layer_forward",
    "maybe_max_pool",
    "pooled_shape",
    "q_shape",
    "quantize_activation",
    "round_half_away",
    "sigma_step",
    "sparsity_loss",
]
