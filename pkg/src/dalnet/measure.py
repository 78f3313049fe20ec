"""Measurements: operation sparsity, per-layer reports, equivalence, frame rate, memory.

The activation of layer ``i`` in a report is the tensor entering its linear
op, i.e. what a zero-skipping engine would scan. In delta mode those are the
emitted deltas; in normal mode the dense activations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, UsageError
from .network import InferenceSession, NetworkSpec, ParamSet, expected_param_shapes
from .synthetic import FrameSequence, subsample
from .tensor import OpCounter


def operation_sparsity(counters: OpCounter | list[OpCounter], layers: list[int] | None = None) -> float:
    """``1 - macs_nonzero / macs_total`` summed over the chosen layers."""
    if isinstance(counters, OpCounter):
        counters = [counters]
    chosen = counters if layers is None else [counters[i] for i in layers]
    total = sum(c.macs_total for c in chosen)
    if total <= 0:
        raise DomainError("no MACs counted; operation sparsity is undefined")
    return 1.0 - sum(c.macs_nonzero for c in chosen) / total


# --------------------------------------------------------------------------
# per-layer report
# --------------------------------------------------------------------------

PER_LAYER_COLUMNS = ("layer", "op", "input_size", "nonzeros_per_frame", "activation_sparsity", "macs_total", "macs_nonzero", "op_sparsity")


@dataclass(frozen=True)
class LayerRow:
    layer: int
    op: str
    input_size: int
    nonzeros_per_frame: float
    activation_sparsity: float
    macs_total: int
    macs_nonzero: int
    op_sparsity: float


def per_layer_report(session: InferenceSession) -> list[LayerRow]:
    if session.frames_seen == 0:
        raise UsageError("no frame has been processed; nothing to report")
    rows = []
    for i, (layer, c) in enumerate(zip(session.spec.layers, session.counters)):
        size = int(session.input_sizes[i])
        nz = session.input_nonzeros[i] / session.frames_seen
        rows.append(
            LayerRow(
                layer=i,
                op=type(layer.op).__name__.lower(),
                input_size=size,
                nonzeros_per_frame=float(nz),
                activation_sparsity=1.0 - nz / size,
                macs_total=c.macs_total,
                macs_nonzero=c.macs_nonzero,
                op_sparsity=1.0 - c.macs_nonzero / c.macs_total if c.macs_total else float("nan"),
            )
        )
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if x != x else f"{x:.6g}"
    return str(x)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def per_layer_csv(rows: list[LayerRow]) -> str:
    return rows_to_csv(rows, PER_LAYER_COLUMNS)


# --------------------------------------------------------------------------
# equivalence
# --------------------------------------------------------------------------


def equivalence_check(
    spec: NetworkSpec,
    params: ParamSet,
    frames: np.ndarray,
    mode: str = "delta",
    reference: str = "normal",
    tol: float = 1e-4,
    params_for_mode: ParamSet | None = None,
) -> dict:
    """Compare per-frame scores of ``mode`` against ``reference`` on one sequence.

    Returns ``{"max_abs_diff": float, "first_divergent_step": int | None}``
    where steps count from 1 and divergence means a difference above ``tol``.
    ``params_for_mode`` lets a caller feed different parameters to the tested
    mode (a negative control).
    """
    ref = InferenceSession(spec, params, reference)
    test = InferenceSession(spec, params if params_for_mode is None else params_for_mode, mode)
    worst = 0.0
    first = None
    for t, frame in enumerate(frames, start=1):
        d = float(np.max(np.abs(ref.step(frame) - test.step(frame))))
        worst = max(worst, d)
        if first is None and not d <= tol:
            first = t
    return {"max_abs_diff": worst, "first_divergent_step": first}


def equivalence_json(result: dict) -> str:
    return json.dumps(result, sort_keys=True)


# --------------------------------------------------------------------------
# frame rate
# --------------------------------------------------------------------------

FRAME_RATE_COLUMNS = ("divisor", "fps", "frames", "activation_sparsity", "op_sparsity")


@dataclass(frozen=True)
class FrameRateRow:
    divisor: int
    fps: float
    frames: int
    activation_sparsity: float
    op_sparsity: float


def sequence_sparsity(spec: NetworkSpec, params: ParamSet, frames: np.ndarray, mode: str = "delta") -> tuple[float, float]:
    """(mean activation sparsity, operation sparsity) over a fresh run.

    The first frame is a warm-up (every delta is measured against zero) and is
    left out unless it is the only frame. Activation sparsity is averaged over
    layers, each layer's being the fraction of zero entries it received.
    """
    session = InferenceSession(spec, params, mode)
    session.step(frames[0])
    if len(frames) > 1:
        session.reset_counters()
        for f in frames[1:]:
            session.step(f)
    rates = 1.0 - session.input_nonzeros / (session.input_sizes * session.frames_seen)
    return float(rates.mean()), operation_sparsity(session.counters)


def frame_rate_experiment(
    spec: NetworkSpec,
    params: ParamSet,
    seq: FrameSequence,
    divisors: list[int],
    mode: str = "delta",
) -> list[FrameRateRow]:
    """Sparsity of a fresh run on every ``d``-th frame, ordered by increasing fps."""
    if not divisors:
        raise DomainError("at least one divisor is needed")
    rows = []
    for d in sorted(set(int(x) for x in divisors), reverse=True):
        sub = subsample(seq, d)
        act, ops = sequence_sparsity(spec, params, sub.frames, mode)
        rows.append(FrameRateRow(d, sub.fps, len(sub), act, ops))
    return rows


def frame_rate_csv(rows: list[FrameRateRow]) -> str:
    return rows_to_csv(rows, FRAME_RATE_COLUMNS)


# --------------------------------------------------------------------------
# memory
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MemorySheet:
    """Sizes a memory estimate needs, independent of how they were obtained.

    ``activations`` lists the buffered tensor sizes in order, starting with
    the network input. ``stateful`` lists the neuron count of every layer that
    keeps delta state.
    """

    weights: int
    activations: tuple[int, ...]
    stateful: tuple[int, ...] = ()
    dense_activations: tuple[int, ...] | None = None  # tensors still buffered in delta mode

    @classmethod
    def from_spec(cls, spec: NetworkSpec) -> "MemorySheet":
        weights = 0
        for exp in expected_param_shapes(spec):
            for name in ("W", "B"):
                if exp[name] is not None:
                    weights += int(np.prod(exp[name]))
        shapes = spec.shapes()
        sizes = [int(np.prod(spec.input_shape))] + [int(np.prod(s.output)) for s in shapes]
        stateful = tuple(int(np.prod(s.z)) for layer, s in zip(spec.layers, shapes) if layer.is_delta)
        # a tensor stays buffered unless a stateful layer produced it; the
        # input counts too, since delta mode keeps the previous frame
        dense = [sizes[0]] + [n for layer, n in zip(spec.layers, sizes[1:]) if not layer.is_delta]
        return cls(weights, tuple(sizes), stateful, tuple(dense) if stateful else None)


@dataclass(frozen=True)
class MemoryEstimate:
    weight_bytes: float
    normal_state_bytes: float
    delta_state_bytes: float
    normal_bytes: float
    delta_bytes: float
    ratio: float
    state_ratio: float
    state_words_per_neuron: int
    assumption: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _max_pair(sizes) -> int:
    sizes = list(sizes)
    if len(sizes) == 1:
        return sizes[0]
    return max(a + b for a, b in zip(sizes, sizes[1:]))


def memory_overhead_estimate(
    spec: NetworkSpec | MemorySheet,
    state_bits: int,
    weight_bits: int,
    state_words_per_neuron: int = 2,
) -> MemoryEstimate:
    """Bytes needed for normal and delta inference.

    Normal inference keeps the weights plus the widest pair of adjacent
    activation tensors. Delta inference keeps the weights, ``state_words_per_neuron``
    words per stateful neuron (``Z`` and ``O_prev`` by default) and, if any
    tensor is still produced densely, the widest adjacent pair of those.
    """
    for name, v in (("state_bits", state_bits), ("weight_bits", weight_bits), ("state_words_per_neuron", state_words_per_neuron)):
        if int(v) != v or v < 1:
            raise DomainError(f"{name} must be a positive integer")
    sheet = spec if isinstance(spec, MemorySheet) else MemorySheet.from_spec(spec)
    weight_bytes = sheet.weights * weight_bits / 8
    normal_state = _max_pair(sheet.activations) * state_bits / 8
    if not sheet.stateful:
        delta_state = normal_state
    else:
        dense = sheet.dense_activations or ()
        buffered = _max_pair(dense) if dense else 0
        delta_state = (sum(sheet.stateful) * state_words_per_neuron + buffered) * state_bits / 8
    normal = weight_bytes + normal_state
    delta = weight_bytes + delta_state
    words = {1: "one state word (Z)", 2: "two state words (Z and O_prev)"}.get(
        state_words_per_neuron, f"{state_words_per_neuron} state words"
    )
    return MemoryEstimate(
        weight_bytes=weight_bytes,
        normal_state_bytes=normal_state,
        delta_state_bytes=delta_state,
        normal_bytes=normal,
        delta_bytes=delta,
        ratio=delta / normal,
        state_ratio=delta_state / normal_state,
        state_words_per_neuron=state_words_per_neuron,
        assumption=f"{words} of {state_bits} bits per stateful neuron; weights at {weight_bits} bits",
    )


def _resnet50_layers():
    """(kernel, cin, cout, output side, is_projection) of every convolution.

    Bottleneck blocks stride on their first 1x1 convolution.
    """
    convs = [(7, 3, 64, 112, False)]
    cin, side = 64, 56
    for width, blocks, first_stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        out = width * 4
        for b in range(blocks):
            s = side // (first_stride if b == 0 else 1)
            convs.append((1, cin, width, s, False))
            convs.append((3, width, width, s, False))
            convs.append((1, width, out, s, False))
            if b == 0:
                convs.append((1, cin, out, s, True))
            cin, side = out, s
    return convs


def resnet50_sheet(include_classifier: bool = False) -> MemorySheet:
    """ResNet-50 (224x224 input) sizes with every convolution feeding a Delta Activation Layer.

    Weights are the convolution kernels (and, optionally, the 1000-way
    classifier). A projection shortcut is summed into the same neurons as the
    block's last convolution, so it adds weights but no neurons. Buffered
    tensors are the input, the stem convolution, its max-pool, and each
    main-path convolution output.
    """
    convs = _resnet50_layers()
    weights = sum(k * k * ci * co for k, ci, co, _, _ in convs)
    if include_classifier:
        weights += 2048 * 1000 + 1000
    main = [co * s * s for _, _, co, s, proj in convs if not proj]
    acts = [224 * 224 * 3, main[0], 56 * 56 * 64] + main[1:]
    return MemorySheet(weights, tuple(acts), tuple(main), None)


__all__ = [
    "FrameRateRow",
    "LayerRow",
    "MemoryEstimate",
    "MemorySheet",
    "equivalence_check",
    "frame_rate_csv",
    "frame_rate_experiment",
    "memory_overhead_estimate",
    "operation_sparsity",
    "per_layer_csv",
    "per_layer_report",
    "resnet50_sheet",
    "sequence_sparsity",
]
