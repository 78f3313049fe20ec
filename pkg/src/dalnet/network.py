"""Network description, parameters, and stateful inference sessions.

A network is an ordered list of layers, each a linear op followed by an
optional activation:

* :class:`~dalnet.delta.DeltaLayerConfig` -- a Delta Activation Layer,
* :class:`~dalnet.delta.PlainActivation` -- an ordinary stateless activation,
* ``None`` -- no activation (average pooling pass-through, or the classifier).

The last layer is a dense classifier without activation; its outputs are the
class scores (pre-softmax).

Three execution modes exist. ``normal`` runs every frame densely and
statelessly, quantizing Delta Activation Layers with their current ``q``.
``delta`` differences the input and runs every hidden layer as a full
sigma-delta layer, whatever its skip flags say. ``hybrid`` honours the skip
flags, so dense segments and delta islands alternate as configured.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .delta import (
    ActivationFn,
    DeltaLayerConfig,
    DeltaLayerState,
    PlainActivation,
    activate,
    init_state,
    layer_forward,
    maybe_max_pool,
    pooled_shape,
    q_shape,
    restore_snapshot,
    state_snapshot,
)
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import (
    AvgPool,
    Conv2D,
    Dense,
    LinearOp,
    OpCounter,
    SparseEvents,
    apply_linear,
    output_shape,
    sparse_linear_apply,
    sparsify,
    weight_shape,
)

MODES = ("normal", "delta", "hybrid")
INPUT_TRANSFORMS = ("frame", "diff")

Activation = DeltaLayerConfig | PlainActivation | None


@dataclass(frozen=True)
class LayerSpec:
    op: LinearOp
    activation: Activation = None

    @property
    def has_bias(self) -> bool:
        return not isinstance(self.op, AvgPool)

    @property
    def is_delta(self) -> bool:
        return isinstance(self.activation, DeltaLayerConfig)


@dataclass(frozen=True)
class LayerShapes:
    input: tuple[int, ...]
    z: tuple[int, ...]
    output: tuple[int, ...]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    input_transform: str = "frame"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def n_classes(self) -> int:
        return self.layers[-1].op.out_features

    @property
    def has_delta_layers(self) -> bool:
        return any(layer.is_delta for layer in self.layers)

    def shapes(self) -> list[LayerShapes]:
        out = []
        shape = self.input_shape
        for layer in self.layers:
            z = output_shape(layer.op, shape)
            pool = getattr(layer.activation, "max_pool", None)
            o = pooled_shape(z, pool)
            out.append(LayerShapes(shape, z, o))
            shape = o
        return out

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("a network needs at least one layer")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ConfigurationError(f"input_transform must be one of {INPUT_TRANSFORMS}")
        last = self.layers[-1]
        if not isinstance(last.op, Dense) or last.activation is not None:
            raise ConfigurationError("the last layer must be a dense classifier without activation")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation is None and layer.has_bias:
                raise ConfigurationError(f"hidden layer {i} ({type(layer.op).__name__}) needs an activation")
        self.shapes()  # raises DimensionError on incompatible shapes
        plan_wiring(self, "hybrid")

    def with_activations(self, fn) -> "NetworkSpec":
        """Copy with each hidden activation replaced by ``fn(index, layer)``."""
        layers = [
            layer if layer.activation is None else dataclasses.replace(layer, activation=fn(i, layer))
            for i, layer in enumerate(self.layers)
        ]
        return dataclasses.replace(self, layers=tuple(layers))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "input_transform": self.input_transform,
            "layers": [_layer_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(_layer_from_dict(x) for x in d["layers"]),
            input_transform=d.get("input_transform", "frame"),
        )


def _layer_to_dict(layer: LayerSpec) -> dict:
    op = layer.op
    if isinstance(op, Dense):
        op_d = {"type": "dense", "out_features": op.out_features}
    elif isinstance(op, Conv2D):
        op_d = {"type": "conv2d", "kernel": op.kernel, "out_channels": op.out_channels, "stride": op.stride}
    else:
        op_d = {"type": "avgpool", "window": op.window}
    act = layer.activation
    if act is None:
        act_d = None
    else:
        act_d = {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(act).items()}
        act_d["type"] = "delta" if isinstance(act, DeltaLayerConfig) else "plain"
    return {"op": op_d, "activation": act_d}


def _layer_from_dict(d: dict) -> LayerSpec:
    op_d = dict(d["op"])
    kind = op_d.pop("type")
    op = {"dense": Dense, "conv2d": Conv2D, "avgpool": AvgPool}[kind](**op_d)
    act_d = d.get("activation")
    if act_d is None:
        return LayerSpec(op)
    act_d = dict(act_d)
    kind = act_d.pop("type")
    cls = DeltaLayerConfig if kind == "delta" else PlainActivation
    return LayerSpec(op, cls(**act_d))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class LayerParams:
    W: np.ndarray | None = None
    B: np.ndarray | None = None
    q: np.ndarray | None = None


@dataclass
class ParamSet:
    """Per-layer float32 weights, biases and quantization steps."""

    layers: list[LayerParams] = field(default_factory=list)

    def copy(self) -> "ParamSet":
        return ParamSet([LayerParams(*(None if a is None else a.copy() for a in (p.W, p.B, p.q))) for p in self.layers])

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.layers):
            for name in ("W", "B", "q"):
                a = getattr(p, name)
                if a is not None:
                    out[f"layer{i}.{name}"] = a
        return out

    def n_weights(self) -> int:
        """Count of weight and bias entries (quantization steps excluded)."""
        return sum(a.size for p in self.layers for a in (p.W, p.B) if a is not None)


def expected_param_shapes(spec: NetworkSpec) -> list[dict[str, tuple[int, ...] | None]]:
    out = []
    for layer, shp in zip(spec.layers, spec.shapes()):
        entry = {"W": weight_shape(layer.op, shp.input), "B": None, "q": None}
        if layer.has_bias:
            entry["B"] = (shp.z[-1],)
        if layer.is_delta:
            entry["q"] = q_shape(layer.activation, shp.z)
        out.append(entry)
    return out


def check_params(spec: NetworkSpec, params: ParamSet) -> None:
    if len(params.layers) != len(spec.layers):
        raise DimensionError(f"{len(params.layers)} parameter groups for {len(spec.layers)} layers")
    for i, (exp, p) in enumerate(zip(expected_param_shapes(spec), params.layers)):
        for name, shape in exp.items():
            a = getattr(p, name)
            if shape is None and a is None:
                continue
            if shape is None or a is None or tuple(a.shape) != tuple(shape):
                got = None if a is None else a.shape
                raise DimensionError(f"layer {i} {name}: expected {shape}, got {got}")


def init_params(spec: NetworkSpec, seed: int = 0, bias_std: float = 0.0) -> ParamSet:
    """He-normal weights, (optionally random) biases, ``q = q_init``."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer, exp in zip(spec.layers, expected_param_shapes(spec)):
        p = LayerParams()
        if exp["W"] is not None:
            fan_in = int(np.prod(exp["W"][1:])) if isinstance(layer.op, Dense) else int(np.prod(exp["W"][:3]))
            p.W = (rng.standard_normal(exp["W"]) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        if exp["B"] is not None:
            p.B = (rng.standard_normal(exp["B"]) * bias_std).astype(np.float32)
        if exp["q"] is not None:
            p.q = np.full(exp["q"], layer.activation.q_init, dtype=np.float32)
        layers.append(p)
    return ParamSet(layers)


# --------------------------------------------------------------------------
# wiring
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerPlan:
    in_kind: str  # "dense" or "delta"
    out_kind: str
    activation: Activation  # effective activation for the mode
    integrate_output: bool = False  # no-activation layer that sums deltas into a dense output


def effective_activations(spec: NetworkSpec, mode: str) -> list[Activation]:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    acts = [layer.activation for layer in spec.layers]
    if mode != "delta":
        return acts
    out = []
    for i, (layer, act) in enumerate(zip(spec.layers, acts)):
        if isinstance(act, PlainActivation):
            raise ConfigurationError(f"delta mode needs a Delta Activation Layer at layer {i}, found a plain activation")
        if isinstance(act, DeltaLayerConfig):
            act = dataclasses.replace(act, skip_integration=False, skip_differentiation=False)
        out.append(act)
    return out


def _required_kind(act: Activation) -> str | None:
    if isinstance(act, DeltaLayerConfig):
        return "dense" if act.skip_integration else "delta"
    if isinstance(act, PlainActivation):
        return "dense"
    return None


def plan_wiring(spec: NetworkSpec, mode: str) -> list[LayerPlan]:
    """Decide which tensors flow as dense frames and which as delta events."""
    acts = effective_activations(spec, mode)
    if mode == "normal":
        return [LayerPlan("dense", "dense", a) for a in acts]
    kind = next((k for k in map(_required_kind, acts) if k is not None), "dense")
    plans = []
    for i, (layer, act) in enumerate(zip(spec.layers, acts)):
        need = _required_kind(act)
        if need is not None and need != kind:
            raise ConfigurationError(
                f"layer {i} expects {need} input but the preceding layer emits {kind} "
                "(a sigma layer must follow a delta emitter; a dense consumer must follow a sigma-only exit)"
            )
        integrate = False
        if isinstance(act, DeltaLayerConfig):
            out = "dense" if act.skip_differentiation else "delta"
        elif isinstance(act, PlainActivation):
            out = "dense"
        elif layer.has_bias and kind == "delta":
            integrate, out = True, "dense"
        else:
            out = kind
        plans.append(LayerPlan(kind, out, act, integrate))
        kind = out
    return plans


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------


class InferenceSession:
    """Per-sequence execution context with per-layer operation counters.

    ``reset_state`` starts a new sequence but keeps the counters, so one session
    can aggregate statistics over many sequences; ``reset_counters`` clears them.
    """

    def __init__(self, spec: NetworkSpec, params: ParamSet, mode: str = "normal"):
        check_params(spec, params)
        self.spec = spec
        self.params = params
        self.mode = mode
        self.plan = plan_wiring(spec, mode)
        self.shapes = spec.shapes()
        self._W = [None if p.W is None else p.W.astype(np.float64) for p in params.layers]
        self._B = [None if p.B is None else p.B.astype(np.float64) for p in params.layers]
        self.counters = [OpCounter() for _ in spec.layers]
        self.reset_counters()
        self.reset_state()

    def reset_state(self) -> None:
        self.t = 0
        self.prev_frame = np.zeros(self.spec.input_shape)
        self.prev_input = np.zeros(self.spec.input_shape)
        self.states: list[DeltaLayerState | None] = []
        self.accumulators: list[np.ndarray | None] = []
        for i, (plan, shp, p) in enumerate(zip(self.plan, self.shapes, self.params.layers)):
            st = acc = None
            if self.mode != "normal" and isinstance(plan.activation, DeltaLayerConfig):
                st = init_state(plan.activation, self._B[i], shp.z, q=p.q)
            if plan.integrate_output:
                acc = np.broadcast_to(self._B[i], shp.z).copy()
            self.states.append(st)
            self.accumulators.append(acc)

    def reset_counters(self) -> None:
        for c in self.counters:
            c.reset()
        self.frames_seen = 0
        n = len(self.spec.layers)
        self.input_nonzeros = np.zeros(n, dtype=np.int64)
        self.input_sizes = np.array([int(np.prod(s.input)) for s in self.shapes], dtype=np.int64)
        self.last_input_nonzeros = np.zeros(n, dtype=np.int64)

    @property
    def total_counter(self) -> OpCounter:
        total = OpCounter()
        for c in self.counters:
            total += c
        return total

    def _network_input(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != self.spec.input_shape:
            raise DimensionError(f"frame shape {frame.shape} != network input {self.spec.input_shape}")
        if self.spec.input_transform == "diff":
            x = frame - self.prev_frame
            self.prev_frame = frame
            return x
        return frame

    def step(self, frame: np.ndarray) -> np.ndarray:
        """Process one frame and return the class scores."""
        x = self._network_input(frame)
        if self.plan[0].in_kind == "delta":
            h: np.ndarray | SparseEvents = sparsify(x - self.prev_input)
            self.prev_input = x
        else:
            h = x
        for i, (layer, plan) in enumerate(zip(self.spec.layers, self.plan)):
            h = self._layer_step(i, layer, plan, h)
        self.t += 1
        self.frames_seen += 1
        return h

    def _layer_step(self, i: int, layer: LayerSpec, plan: LayerPlan, h):
        counter = self.counters[i]
        W, B = self._W[i], self._B[i]
        if isinstance(h, SparseEvents):
            nnz = h.nnz
            z = sparse_linear_apply(W, h, layer.op, counter)
        else:
            nnz = int(np.count_nonzero(h))
            z = apply_linear(layer.op, W, h, counter)
        self.input_nonzeros[i] += nnz
        self.last_input_nonzeros[i] = nnz
        act = plan.activation

        if plan.in_kind == "dense" and B is not None:
            z = z + B
            counter.adds_state += z.size

        if plan.integrate_output:
            acc = self.accumulators[i]
            dz = sparsify(z)
            acc.reshape(-1)[dz.indices] += dz.values
            counter.adds_state += dz.nnz
            return acc.copy()
        if act is None:
            return sparsify(z) if plan.in_kind == "delta" else z
        if isinstance(act, PlainActivation):
            return maybe_max_pool(act.activation(z), act)
        if self.mode == "normal":
            return maybe_max_pool(activate(act, z, self.params.layers[i].q), act)
        state = self.states[i]
        x = z if act.skip_integration else sparsify(z)
        return layer_forward(state, act, x, counter)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Session state as named arrays (for checkpointing)."""
        snap = {
            "session.t": np.array([self.t], dtype=np.float64),
            "session.prev_frame": self.prev_frame,
            "session.prev_input": self.prev_input,
        }
        for i, (st, acc) in enumerate(zip(self.states, self.accumulators)):
            if st is not None:
                for k, v in state_snapshot(st).items():
                    snap[f"state{i}.{k}"] = v
            if acc is not None:
                snap[f"state{i}.acc"] = acc
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.reset_state()
        self.t = int(snap["session.t"][0])
        self.prev_frame = np.array(snap["session.prev_frame"], dtype=np.float64)
        self.prev_input = np.array(snap["session.prev_input"], dtype=np.float64)
        for i, st in enumerate(self.states):
            if st is not None:
                sub = {k.split(".", 1)[1]: v for k, v in snap.items() if k.startswith(f"state{i}.")}
                restore_snapshot(st, sub)
            if self.accumulators[i] is not None:
                self.accumulators[i] = np.array(snap[f"state{i}.acc"], dtype=np.float64)


def _require_mode(session: InferenceSession, mode: str) -> None:
    if session.mode != mode:
        raise UsageError(f"session is in {session.mode!r} mode, not {mode!r}")


def infer_normal(session: InferenceSession, frame: np.ndarray) -> np.ndarray:
    _require_mode(session, "normal")
    return session.step(frame)


def infer_delta(session: InferenceSession, frame: np.ndarray) -> np.ndarray:
    _require_mode(session, "delta")
    return session.step(frame)


def infer_hybrid(session: InferenceSession, frame: np.ndarray) -> np.ndarray:
    _require_mode(session, "hybrid")
    return session.step(frame)


def run_sequence(spec: NetworkSpec, params: ParamSet, frames: np.ndarray, mode: str) -> np.ndarray:
    """Scores for every frame of ``frames`` (T, ...) from a fresh session."""
    session = InferenceSession(spec, params, mode)
    return np.stack([session.step(f) for f in frames])


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def toy_cnn(
    input_shape: tuple[int, int, int],
    n_classes: int,
    activation_for,
    channels: tuple[int, int] = (8, 16),
    hidden: int = 32,
) -> NetworkSpec:
    """Small conv-conv-dense-classifier network.

    ``activation_for(index)`` returns the activation of hidden layer ``index``.
    """
    h, w, _ = input_shape
    k1, s1 = (5, 2) if min(h, w) >= 16 else (3, 1)
    layers = [
        LayerSpec(Conv2D(k1, channels[0], s1), activation_for(0)),
        LayerSpec(Conv2D(3, channels[1], 2), activation_for(1)),
        LayerSpec(Dense(hidden), activation_for(2)),
        LayerSpec(Dense(n_classes), None),
    ]
    return NetworkSpec(tuple(input_shape), tuple(layers))


def relu_plain(sparsity_factor: float = 0.0) -> PlainActivation:
    return PlainActivation(ActivationFn.RELU, sparsity_factor)
