"""Reverse-mode training of networks with Delta Activation Layers.

The forward pass runs a whole batch of sequences frame-parallel in the
quantized reference path. That is numerically the same computation delta
inference performs (the sigma state always equals the dense pre-activation), so
the temporal deltas needed by the sparsity penalty are just differences of
consecutive quantized outputs, with a zero output before the first frame.

Gradients through the quantizer use two surrogates: the activation derivative
in place of the staircase derivative (straight-through), and
``d f_q / d q = -f_q / q`` for the step size. The q-gradient is kept in two
parts: ``q_local`` from the layer's own sparsity penalty and
``q_propagated`` from everything downstream of the layer output.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .delta import Q_MIN, DeltaLayerConfig, QuantMode, activate, expand_q
from .errors import DimensionError, DomainError, TrainingDiverged, UsageError
from .network import LayerParams, NetworkSpec, ParamSet, check_params, plan_wiring
from .tensor import Conv2D, Dense, batch_linear, conv_patches, mac_cost_map

Q_SURROGATES = ("reciprocal", "plain")
TIME_GRADIENTS = ("full", "truncated")


@dataclass
class LossBreakdown:
    accuracy_loss: float
    sparsity_losses: list[float]
    lambdas: list[float]
    total: float


@dataclass
class LayerRecord:
    a_in: np.ndarray
    z: np.ndarray
    o_pre: np.ndarray | None = None
    o: np.ndarray | None = None
    pool_mask: np.ndarray | None = None
    delta: np.ndarray | None = None


@dataclass
class Tape:
    spec: NetworkSpec
    params: ParamSet
    records: list[LayerRecord]
    probs: np.ndarray
    labels: np.ndarray
    n_seq: int
    n_steps: int
    lambdas: list[float]
    q_surrogate: str = "reciprocal"
    time_gradient: str = "full"


@dataclass
class LayerGrads:
    W: np.ndarray | None = None
    B: np.ndarray | None = None
    q: np.ndarray | None = None
    q_local: np.ndarray | None = None
    q_propagated: np.ndarray | None = None


@dataclass
class GradSet:
    layers: list[LayerGrads] = field(default_factory=list)


def spec_lambdas(spec: NetworkSpec) -> list[float]:
    return [float(getattr(layer.activation, "sparsity_factor", 0.0)) for layer in spec.layers]


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def _time_delta(x: np.ndarray, n_seq: int, n_steps: int) -> np.ndarray:
    """Per-sequence first difference along time with a zero frame before t=1."""
    xs = x.reshape(n_seq, n_steps, *x.shape[1:])
    d = np.diff(xs, axis=1, prepend=0.0)
    return d.reshape(x.shape)


def _max_pool_with_mask(x: np.ndarray, win: int) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // win, win, w // win, win, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // win, w // win, c, win * win)
    arg = blocks.argmax(axis=-1)
    mask = np.zeros_like(blocks, dtype=bool)
    np.put_along_axis(mask, arg[..., None], True, axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], mask


def _unpool(g: np.ndarray, mask: np.ndarray, win: int) -> np.ndarray:
    n, ho, wo, c, _ = mask.shape
    full = (mask * g[..., None]).reshape(n, ho, wo, c, win, win)
    return full.transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * win, wo * win, c)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def network_input(spec: NetworkSpec, frames: np.ndarray) -> np.ndarray:
    """Frames ``(B, T, ...)`` as the network sees them, flattened to ``(B*T, ...)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != len(spec.input_shape) + 2 or frames.shape[2:] != spec.input_shape:
        raise DimensionError(f"expected (B, T, *{spec.input_shape}) frames, got {frames.shape}")
    if spec.input_transform == "diff":
        frames = np.diff(frames, axis=1, prepend=0.0)
    return frames.reshape(-1, *spec.input_shape)


def forward_record(
    spec: NetworkSpec,
    params: ParamSet,
    frames: np.ndarray,
    labels: np.ndarray,
    lambdas: list[float] | None = None,
    q_surrogate: str = "reciprocal",
    time_gradient: str = "full",
) -> tuple[np.ndarray, LossBreakdown, Tape]:
    """Run a batch of sequences and record what :func:`backward` needs.

    Returns per-frame logits ``(B, T, classes)``, the loss breakdown, and the
    tape. The accuracy loss is the mean cross-entropy over all frames; each
    layer's sparsity loss is the L1 norm of its emitted deltas (or, for plain
    activations, of its outputs) averaged per frame.
    """
    frames = np.asarray(frames)
    if frames.ndim < 2 or frames.shape[0] == 0 or frames.shape[1] == 0:
        raise DomainError("empty batch")
    if q_surrogate not in Q_SURROGATES or time_gradient not in TIME_GRADIENTS:
        raise DomainError(f"unknown surrogate {q_surrogate!r} or time gradient {time_gradient!r}")
    check_params(spec, params)
    n_seq, n_steps = frames.shape[:2]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_seq,):
        raise DimensionError(f"need one label per sequence, got {labels.shape}")
    lambdas = spec_lambdas(spec) if lambdas is None else [float(x) for x in lambdas]
    n = n_seq * n_steps

    a = network_input(spec, frames)
    records = []
    sparsity = []
    for layer, p in zip(spec.layers, params.layers):
        W = None if p.W is None else p.W.astype(np.float64)
        z = batch_linear(layer.op, W, a)
        if p.B is not None:
            z = z + p.B.astype(np.float64)
        rec = LayerRecord(a_in=a, z=z)
        act = layer.activation
        if act is None:
            out = z
            sparsity.append(0.0)
        else:
            if isinstance(act, DeltaLayerConfig):
                rec.o_pre = activate(act, z, p.q.astype(np.float64))
            else:
                rec.o_pre = act.activation(z)
            if act.max_pool:
                rec.o, rec.pool_mask = _max_pool_with_mask(rec.o_pre, act.max_pool)
            else:
                rec.o = rec.o_pre
            if isinstance(act, DeltaLayerConfig):
                rec.delta = _time_delta(rec.o, n_seq, n_steps)
                sparsity.append(float(np.abs(rec.delta).sum()) / n)
            else:
                sparsity.append(float(np.abs(rec.o).sum()) / n)
            out = rec.o
        records.append(rec)
        a = out

    logits = a
    probs = _softmax(logits)
    y = np.repeat(labels, n_steps)
    if y.max(initial=0) >= logits.shape[1] or y.min(initial=0) < 0:
        raise DomainError("label out of range")
    acc_loss = float(-np.log(np.maximum(probs[np.arange(n), y], 1e-300)).mean())
    total = acc_loss + sum(lam * s for lam, s in zip(lambdas, sparsity))
    breakdown = LossBreakdown(acc_loss, sparsity, lambdas, total)
    tape = Tape(spec, params, records, probs, y, n_seq, n_steps, lambdas, q_surrogate, time_gradient)
    return logits.reshape(n_seq, n_steps, -1), breakdown, tape


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a batched ``(N, *z_shape)`` gradient down to a broadcast parameter shape."""
    if shape == (1,):
        return np.array([g.sum()])
    if len(shape) == 1 and g.ndim > 2:
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g.sum(axis=0).reshape(shape)


def _reduce_q(act: DeltaLayerConfig, g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Like :func:`_reduce_to`, also summing over each pooling window of a neuron-wise step."""
    if act.quant_mode is QuantMode.NEURON and act.max_pool:
        w = act.max_pool
        g = g.sum(axis=0)
        return g.reshape(shape[0], w, shape[1], w, shape[2]).sum(axis=(1, 3))
    return _reduce_to(g, shape)


def _linear_backward(op, W, a_in, gz, need_input: bool):
    n = gz.shape[0]
    gW = gx = None
    if isinstance(op, Dense):
        flat = a_in.reshape(n, -1)
        gW = gz.T @ flat
        if need_input:
            gx = (gz @ W).reshape(a_in.shape)
    elif isinstance(op, Conv2D):
        k, s = op.kernel, op.stride
        cols = conv_patches(a_in, k, s)
        ho, wo = cols.shape[1:3]
        gflat = gz.reshape(-1, gz.shape[-1])
        gW = (cols.reshape(-1, cols.shape[-1]).T @ gflat).reshape(W.shape)
        if need_input:
            gx = np.zeros_like(a_in)
            for ki in range(k):
                for kj in range(k):
                    gx[:, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s, :] += gz @ W[ki, kj].T
    else:
        win = op.window
        if need_input:
            g = gz / (win * win)
            gx = np.repeat(np.repeat(g, win, axis=1), win, axis=2)
    return gW, gx


def backward(tape: Tape | None) -> GradSet:
    """Gradients of the total loss for every W, B and q on the tape."""
    if tape is None:
        raise UsageError("backward needs the tape returned by forward_record")
    spec, params, recs = tape.spec, tape.params, tape.records
    n = tape.probs.shape[0]
    g = tape.probs.copy()
    g[np.arange(n), tape.labels] -= 1.0
    g /= n

    grads: list[LayerGrads] = [LayerGrads() for _ in spec.layers]
    for i in reversed(range(len(spec.layers))):
        layer, p, rec = spec.layers[i], params.layers[i], recs[i]
        act = layer.activation
        lam = tape.lambdas[i]
        lg = grads[i]
        if act is None:
            gz = g
        else:
            if isinstance(act, DeltaLayerConfig):
                sgn = np.sign(rec.delta)
                if tape.time_gradient == "full":
                    # O(t) also enters the delta at t+1 with a minus sign
                    nxt = sgn.reshape(tape.n_seq, tape.n_steps, *sgn.shape[1:])
                    nxt = np.concatenate([nxt[:, 1:], np.zeros_like(nxt[:, :1])], axis=1)
                    sgn = sgn - nxt.reshape(sgn.shape)
                g_sp = lam * sgn / n
            else:
                g_sp = lam * np.sign(rec.o) / n
            if act.max_pool:
                g_acc_pre = _unpool(g, rec.pool_mask, act.max_pool)
                g_sp_pre = _unpool(g_sp, rec.pool_mask, act.max_pool)
            else:
                g_acc_pre, g_sp_pre = g, g_sp
            gz = (g_acc_pre + g_sp_pre) * act.activation.grad(rec.z)
            if isinstance(act, DeltaLayerConfig):
                q64 = p.q.astype(np.float64)
                if act.quantize:
                    dfq_dq = -rec.o_pre / expand_q(act, q64)
                    lg.q_propagated = _reduce_q(act, g_acc_pre * dfq_dq, p.q.shape)
                    lg.q_local = _reduce_q(act, g_sp_pre * dfq_dq, p.q.shape)
                    if tape.q_surrogate == "plain":
                        lg.q_local = lg.q_local * q64
                else:
                    lg.q_propagated = np.zeros(p.q.shape)
                    lg.q_local = np.zeros(p.q.shape)
                lg.q = lg.q_local + lg.q_propagated
        W = None if p.W is None else p.W.astype(np.float64)
        gW, gx = _linear_backward(layer.op, W, rec.a_in, gz, need_input=i > 0)
        lg.W = gW
        if p.B is not None:
            lg.B = _reduce_to(gz, p.B.shape)
        g = gx
    return GradSet(grads)


# --------------------------------------------------------------------------
# updates
# --------------------------------------------------------------------------


def f32_floor(q_min: float) -> np.float32:
    """Smallest float32 that is >= ``q_min``."""
    v = np.float32(q_min)
    if float(v) < q_min:
        v = np.nextafter(v, np.float32(np.inf))
    return v


def sgd_step(
    params: ParamSet,
    grads: GradSet,
    lr: float,
    q_min: float | list[float] = Q_MIN,
    q_lr: float | None = None,
) -> ParamSet:
    """Plain SGD: ``p <- p - lr * g``, then clamp q from below."""
    if not lr > 0:
        raise DomainError("learning rate must be positive")
    if len(grads.layers) != len(params.layers):
        raise DimensionError("gradient and parameter sets differ in length")
    q_lr = lr if q_lr is None else q_lr
    q_mins = q_min if isinstance(q_min, (list, tuple)) else [q_min] * len(params.layers)
    out = []
    for p, g, qm in zip(params.layers, grads.layers, q_mins):
        new = LayerParams()
        for name, rate in (("W", lr), ("B", lr), ("q", q_lr)):
            a, ga = getattr(p, name), getattr(g, name)
            if a is None:
                continue
            if ga is None:
                setattr(new, name, a.copy())
                continue
            if tuple(np.shape(ga)) != a.shape:
                raise DimensionError(f"{name} gradient shape {np.shape(ga)} != parameter shape {a.shape}")
            setattr(new, name, (a.astype(np.float64) - rate * ga).astype(np.float32))
        if new.q is not None:
            new.q = np.maximum(new.q, f32_floor(qm))
        out.append(new)
    return ParamSet(out)


# --------------------------------------------------------------------------
# sparsity factors
# --------------------------------------------------------------------------


def _op_fanout(spec: NetworkSpec, j: int) -> float:
    """MACs triggered downstream by one nonzero entry of layer ``j``'s input."""
    layer = spec.layers[j]
    op = layer.op
    if isinstance(op, Dense):
        return float(op.out_features)
    if isinstance(op, Conv2D):
        return op.kernel * op.kernel * op.out_channels / (op.stride * op.stride)
    after = 0.0
    if layer.activation is None and j + 1 < len(spec.layers):
        after = _op_fanout(spec, j + 1)
    return 1.0 + after


def fanout_sparsity_factors(spec: NetworkSpec, base: float) -> list[float]:
    """Per-layer sparsity factor proportional to the downstream MAC fan-out."""
    lams = []
    for i, layer in enumerate(spec.layers):
        if layer.activation is None or i + 1 >= len(spec.layers):
            lams.append(0.0)
        else:
            lams.append(base * _op_fanout(spec, i + 1))
    return lams


def calibrate_base_lambda(
    spec: NetworkSpec, params: ParamSet, frames: np.ndarray, labels: np.ndarray, ratio: float = 0.25
) -> float:
    """Base factor making the weighted sparsity loss ``ratio`` times the accuracy loss."""
    fan = fanout_sparsity_factors(spec, 1.0)
    _, br, _ = forward_record(spec, params, frames, labels, lambdas=fan)
    weighted = sum(f * s for f, s in zip(fan, br.sparsity_losses))
    if weighted <= 0:
        return 0.0
    return ratio * br.accuracy_loss / weighted


# --------------------------------------------------------------------------
# measurement from a tape
# --------------------------------------------------------------------------


def tape_mac_counts(tape: Tape) -> list[tuple[int, int]]:
    """(nonzero MACs, total MACs) per layer under the network's own wiring.

    Layers fed by delta events are charged for nonzero temporal differences of
    their input; layers fed densely for nonzero input entries.
    """
    plans = plan_wiring(tape.spec, "hybrid")
    out = []
    for rec, plan, layer in zip(tape.records, plans, tape.spec.layers):
        a = rec.a_in
        if plan.in_kind == "delta":
            a = _time_delta(a, tape.n_seq, tape.n_steps)
        cost = mac_cost_map(layer.op, a.shape[1:])
        nz = a != 0
        out.append((int((nz * cost).sum()), int(cost.sum()) * a.shape[0]))
    return out


def op_sparsity_per_layer(counts: list[tuple[int, int]]) -> list[float]:
    return [1.0 - nz / tot if tot else float("nan") for nz, tot in counts]


def overall_op_sparsity(counts: list[tuple[int, int]]) -> float:
    nz = sum(c[0] for c in counts)
    tot = sum(c[1] for c in counts)
    return 1.0 - nz / tot


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 0.05
    batch_size: int = 8
    base_lambda: float | None = None
    seed: int = 0
    q_lr: float | None = 1e-4  # None: same as lr
    q_surrogate: str = "reciprocal"
    time_gradient: str = "full"


@dataclass
class EpochLog:
    epoch: int
    accuracy: float
    accuracy_loss: float
    sparsity_loss_total: float
    mean_q_per_layer: list[float]
    op_sparsity_per_layer: list[float]


def mean_q(params: ParamSet) -> list[float]:
    return [float("nan") if p.q is None else float(p.q.astype(np.float64).mean()) for p in params.layers]


def train(
    spec: NetworkSpec,
    params: ParamSet,
    frames: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> tuple[ParamSet, list[EpochLog]]:
    """Minibatch SGD over sequences; one log row per epoch."""
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    rng = np.random.default_rng(config.seed)
    if config.base_lambda is None:
        lambdas = spec_lambdas(spec)
    else:
        lambdas = fanout_sparsity_factors(spec, config.base_lambda)
    q_mins = [getattr(layer.activation, "q_min", Q_MIN) for layer in spec.layers]
    params = params.copy()
    log = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(frames))
        correct = frames_seen = 0
        acc_loss = sp_loss = 0.0
        counts = None
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            logits, br, tape = forward_record(
                spec, params, frames[idx], labels[idx], lambdas, config.q_surrogate, config.time_gradient
            )
            if not math.isfinite(br.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"accuracy={br.accuracy_loss} sparsity={br.sparsity_losses}"
                )
            nb = logits.shape[0] * logits.shape[1]
            correct += int((logits.argmax(axis=-1) == labels[idx][:, None]).sum())
            frames_seen += nb
            acc_loss += br.accuracy_loss * nb
            sp_loss += (br.total - br.accuracy_loss) * nb
            batch_counts = tape_mac_counts(tape)
            counts = batch_counts if counts is None else [(a + c, b + d) for (a, b), (c, d) in zip(counts, batch_counts)]
            grads = backward(tape)
            params = sgd_step(params, grads, config.lr, q_mins, config.q_lr)
        log.append(
            EpochLog(
                epoch,
                correct / frames_seen,
                acc_loss / frames_seen,
                sp_loss / frames_seen,
                mean_q(params),
                op_sparsity_per_layer(counts),
            )
        )
    return params, log


def evaluate(spec: NetworkSpec, params: ParamSet, frames: np.ndarray, labels: np.ndarray, batch_size: int = 16):
    """Per-frame accuracy and per-layer MAC counts over a set of sequences."""
    correct = total = 0
    counts = None
    for start in range(0, len(frames), batch_size):
        sl = slice(start, start + batch_size)
        logits, _, tape = forward_record(spec, params, frames[sl], labels[sl])
        correct += int((logits.argmax(axis=-1) == np.asarray(labels[sl])[:, None]).sum())
        total += logits.shape[0] * logits.shape[1]
        c = tape_mac_counts(tape)
        counts = c if counts is None else [(a + x, b + y) for (a, b), (x, y) in zip(counts, c)]
    return correct / total, counts


LOG_COLUMNS = (
    "epoch",
    "accuracy",
    "accuracy_loss",
    "sparsity_loss_total",
    "mean_q_per_layer",
    "op_sparsity_per_layer",
)


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6g}"


def write_training_log(path, log: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow(
                [
                    row.epoch,
                    _fmt(row.accuracy),
                    _fmt(row.accuracy_loss),
                    _fmt(row.sparsity_loss_total),
                    ";".join(_fmt(x) for x in row.mean_q_per_layer),
                    ";".join(_fmt(x) for x in row.op_sparsity_per_layer),
                ]
            )


__all__ = [
    "GradSet",
    "LayerGrads",
    "LossBreakdown",
    "Tape",
    "TrainConfig",
    "EpochLog",
    "backward",
    "calibrate_base_lambda",
    "evaluate",
    "fanout_sparsity_factors",
    "forward_record",
    "sgd_step",
    "train",
    "write_training_log",
]
