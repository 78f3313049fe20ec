"""Dense and zero-skipping linear operations with MAC accounting.

Tensors are plain numpy arrays. Single-frame operations take inputs without a
batch axis (``x`` is ``(in,)`` or ``(h, w, c)``); the batched helpers prefixed
with ``batch_`` carry a leading batch axis and are what the training code uses.

Every linear op charges an :class:`OpCounter`: ``macs_total`` is what the dense
op costs and ``macs_nonzero`` is the number of those MACs whose activation
operand is nonzero. Both come from :func:`mac_cost_map`, which gives the MAC
cost of each individual input entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    kernel: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class AvgPool:
    window: int


LinearOp = Dense | Conv2D | AvgPool


@dataclass
class OpCounter:
    macs_total: int = 0
    macs_nonzero: int = 0
    adds_state: int = 0

    def reset(self) -> None:
        self.macs_total = 0
        self.macs_nonzero = 0
        self.adds_state = 0

    def __iadd__(self, other: "OpCounter") -> "OpCounter":
        self.macs_total += other.macs_total
        self.macs_nonzero += other.macs_nonzero
        self.adds_state += other.adds_state
        return self


@dataclass
class SparseEvents:
    """Nonzero entries of a tensor as (row-major flat index, value) pairs."""

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise DimensionError("indices and values must be 1-D and equally long")
        size = int(np.prod(self.shape))
        if len(self.indices):
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("event indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= size:
                raise ValueError("event index out of range")
            if np.any(self.values == 0):
                raise ValueError("events may not carry exact zeros")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def empty(cls, shape) -> "SparseEvents":
        return cls(shape, np.empty(0, np.int64), np.empty(0, np.float64))

    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))


def sparsify(x: np.ndarray) -> SparseEvents:
    """Drop exact zeros; no threshold is applied."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    idx = np.flatnonzero(flat)
    return SparseEvents(x.shape, idx, flat[idx])


def densify(e: SparseEvents) -> np.ndarray:
    out = np.zeros(e.size, dtype=np.float64)
    out[e.indices] = e.values
    return out.reshape(e.shape)


# --------------------------------------------------------------------------
# shapes and MAC costs
# --------------------------------------------------------------------------


def conv_out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def output_shape(op: LinearOp, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of ``op`` applied to a single (unbatched) input."""
    in_shape = tuple(in_shape)
    if isinstance(op, Dense):
        return (op.out_features,)
    if len(in_shape) != 3:
        raise DimensionError(f"{type(op).__name__} needs an (h, w, c) input, got {in_shape}")
    h, w, c = in_shape
    if isinstance(op, Conv2D):
        if op.kernel > h or op.kernel > w:
            raise DimensionError(f"kernel {op.kernel} larger than input {h}x{w}")
        return (conv_out_size(h, op.kernel, op.stride), conv_out_size(w, op.kernel, op.stride), op.out_channels)
    if isinstance(op, AvgPool):
        if h % op.window or w % op.window:
            raise DimensionError(f"window {op.window} does not divide {h}x{w}")
        return (h // op.window, w // op.window, c)
    raise TypeError(f"unknown op {op!r}")


def weight_shape(op: LinearOp, in_shape: tuple[int, ...]) -> tuple[int, ...] | None:
    if isinstance(op, Dense):
        return (op.out_features, int(np.prod(in_shape)))
    if isinstance(op, Conv2D):
        return (op.kernel, op.kernel, in_shape[-1], op.out_channels)
    return None


def _window_coverage(n: int, k: int, stride: int) -> np.ndarray:
    # number of valid windows along one axis that contain each position
    n_out = conv_out_size(n, k, stride)
    cov = np.zeros(n, dtype=np.int64)
    for o in range(n_out):
        cov[o * stride : o * stride + k] += 1
    return cov


def mac_cost_map(op: LinearOp, in_shape: tuple[int, ...]) -> np.ndarray:
    """MACs triggered by each input entry when it is nonzero (int64, ``in_shape``)."""
    in_shape = tuple(in_shape)
    output_shape(op, in_shape)
    if isinstance(op, Dense):
        return np.full(in_shape, op.out_features, dtype=np.int64)
    if isinstance(op, AvgPool):
        return np.ones(in_shape, dtype=np.int64)
    h, w, c = in_shape
    cov = np.outer(_window_coverage(h, op.kernel, op.stride), _window_coverage(w, op.kernel, op.stride))
    return np.repeat(cov[:, :, None] * op.out_channels, c, axis=2)


def _charge(counter: OpCounter | None, op: LinearOp, x: np.ndarray) -> None:
    if counter is None:
        return
    cost = mac_cost_map(op, x.shape)
    counter.macs_total += int(cost.sum())
    counter.macs_nonzero += int(cost[x != 0].sum())


# --------------------------------------------------------------------------
# batched dense kernels (leading batch axis)
# --------------------------------------------------------------------------


def conv_patches(X: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """im2col: ``(N, h, w, c)`` -> ``(N, h', w', kernel*kernel*c)`` (ki, kj, c order)."""
    win = np.lib.stride_tricks.sliding_window_view(X, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, h', w', c, kh, kw)
    n, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, kernel * kernel * c)


def batch_dense(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    flat = X.reshape(n, -1)
    if flat.shape[1] != W.shape[1]:
        raise DimensionError(f"dense weight expects {W.shape[1]} inputs, got {flat.shape[1]}")
    return flat @ W.T


def batch_conv2d(W: np.ndarray, X: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, cin, cout = W.shape
    if X.ndim != 4 or X.shape[3] != cin:
        raise DimensionError(f"conv weight expects (N, h, w, {cin}), got {X.shape}")
    if kh > X.shape[1] or kw > X.shape[2]:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {X.shape[1]}x{X.shape[2]}")
    cols = conv_patches(X, kh, stride)
    return cols @ W.reshape(kh * kw * cin, cout)


def batch_avg_pool(X: np.ndarray, window: int) -> np.ndarray:
    n, h, w, c = X.shape
    if h % window or w % window:
        raise DimensionError(f"window {window} does not divide {h}x{w}")
    return X.reshape(n, h // window, window, w // window, window, c).mean(axis=(2, 4))


def batch_max_pool(X: np.ndarray, window: int) -> np.ndarray:
    n, h, w, c = X.shape
    if h % window or w % window:
        raise DimensionError(f"window {window} does not divide {h}x{w}")
    return X.reshape(n, h // window, window, w // window, window, c).max(axis=(2, 4))


def batch_linear(op: LinearOp, W: np.ndarray | None, X: np.ndarray) -> np.ndarray:
    if isinstance(op, Dense):
        return batch_dense(W, X)
    if isinstance(op, Conv2D):
        return batch_conv2d(W, X, op.stride)
    return batch_avg_pool(X, op.window)


# --------------------------------------------------------------------------
# single-frame ops
# --------------------------------------------------------------------------


def dense_linear(W: np.ndarray, x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.size != W.shape[1]:
        raise DimensionError(f"weight {W.shape} incompatible with input {x.shape}")
    _charge(counter, Dense(W.shape[0]), x)
    return W @ x.ravel()


def conv2d(W: np.ndarray, X: np.ndarray, stride: int = 1, counter: OpCounter | None = None) -> np.ndarray:
    """Valid-padding cross-correlation of an ``(h, w, cin)`` input."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"conv2d needs an (h, w, c) input, got {X.shape}")
    y = batch_conv2d(W, X[None], stride)[0]
    _charge(counter, Conv2D(W.shape[0], W.shape[3], stride), X)
    return y


def avg_pool2d(X: np.ndarray, window: int, counter: OpCounter | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"avg_pool2d needs an (h, w, c) input, got {X.shape}")
    y = batch_avg_pool(X[None], window)[0]
    _charge(counter, AvgPool(window), X)
    return y


def max_pool2d(X: np.ndarray, window: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"max_pool2d needs an (h, w, c) input, got {X.shape}")
    return batch_max_pool(X[None], window)[0]


def apply_linear(op: LinearOp, W: np.ndarray | None, x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    if isinstance(op, Dense):
        return dense_linear(W, x, counter)
    if isinstance(op, Conv2D):
        return conv2d(W, x, op.stride, counter)
    return avg_pool2d(x, op.window, counter)


def sparse_linear_apply(
    W: np.ndarray | None,
    dx: SparseEvents,
    op: LinearOp,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Apply ``op`` to the events in ``dx``, touching only nonzero entries.

    The result equals ``apply_linear(op, W, densify(dx))`` up to summation
    order; ``macs_total`` is charged at the dense cost.
    """
    in_shape = dx.shape
    out_shape = output_shape(op, in_shape)
    idx, val = dx.indices, dx.values
    cost = mac_cost_map(op, in_shape)
    if counter is not None:
        counter.macs_total += int(cost.sum())

    if isinstance(op, Dense):
        W = np.asarray(W, dtype=np.float64)
        if W.shape[1] != dx.size:
            raise DimensionError(f"dense weight expects {W.shape[1]} inputs, got {dx.size}")
        out = W[:, idx] @ val if len(idx) else np.zeros(W.shape[0])
        if counter is not None:
            counter.macs_nonzero += op.out_features * len(idx)
        return out

    h, w, c = in_shape
    i, j, ch = np.unravel_index(idx, in_shape)
    out = np.zeros(out_shape, dtype=np.float64)
    if isinstance(op, AvgPool):
        win = op.window
        np.add.at(out, (i // win, j // win, ch), val / (win * win))
        if counter is not None:
            counter.macs_nonzero += len(idx)
        return out

    W = np.asarray(W, dtype=np.float64)
    k, s = op.kernel, op.stride
    if W.shape[:3] != (k, k, c):
        raise DimensionError(f"conv weight {W.shape} incompatible with input {in_shape}")
    ho, wo = out_shape[:2]
    macs = 0
    for ki in range(k):
        oi_num = i - ki
        ok_i = (oi_num >= 0) & (oi_num % s == 0) & (oi_num // s < ho)
        for kj in range(k):
            oj_num = j - kj
            m = ok_i & (oj_num >= 0) & (oj_num % s == 0) & (oj_num // s < wo)
            if not m.any():
                continue
            contrib = val[m, None] * W[ki, kj, ch[m], :]
            np.add.at(out, (oi_num[m] // s, oj_num[m] // s), contrib)
            macs += int(m.sum())
    if counter is not None:
        counter.macs_nonzero += macs * op.out_channels
    return out
