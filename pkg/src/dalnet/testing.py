"""Random networks and inputs for property tests and the equivalence suite."""

from __future__ import annotations

import dataclasses

import numpy as np

from .delta import ActivationFn, DeltaLayerConfig, PlainActivation, QuantMode
from .network import LayerParams, LayerSpec, NetworkSpec, ParamSet, init_params
from .tensor import AvgPool, Conv2D, Dense, conv_out_size


def random_spec(
    rng: np.random.Generator,
    n_layers: tuple[int, int] = (2, 5),
    activations: tuple[ActivationFn, ...] = tuple(ActivationFn),
    hybrid_flags: bool = True,
    plain_prob: float = 0.0,
) -> NetworkSpec:
    """A random valid network with ``n_layers`` layers, classifier included.

    Hidden dense and conv layers get Delta Activation Layers. With
    ``hybrid_flags`` their skip flags are drawn so that the wiring alternates
    between dense segments and delta islands; ``plain_prob`` puts plain
    activations into some dense segments (such specs cannot run in delta mode).
    """
    total = int(rng.integers(n_layers[0], n_layers[1] + 1))
    side = int(rng.integers(4, 10))
    input_shape = (side, side, int(rng.integers(1, 4)))
    shape: tuple[int, ...] = input_shape
    kind = "dense" if hybrid_flags and rng.random() < 0.5 else "delta"
    layers = []
    for _ in range(total - 1):
        choice = rng.random()
        if len(shape) == 3 and choice < 0.15 and shape[0] % 2 == 0 and shape[1] % 2 == 0:
            layers.append(LayerSpec(AvgPool(2)))
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
            continue
        if len(shape) == 3 and choice < 0.7:
            k = int(rng.integers(1, min(3, shape[0], shape[1]) + 1))
            s = int(rng.integers(1, 3))
            op = Conv2D(k, int(rng.integers(1, 6)), s)
            z = (conv_out_size(shape[0], k, s), conv_out_size(shape[1], k, s), op.out_channels)
        else:
            op = Dense(int(rng.integers(1, 12)))
            z = (op.out_features,)
        fn = ActivationFn(activations[int(rng.integers(len(activations)))])
        pool = 2 if len(z) == 3 and z[0] % 2 == 0 and z[1] % 2 == 0 and rng.random() < 0.25 else None
        if kind == "dense" and rng.random() < plain_prob:
            act = PlainActivation(fn, max_pool=pool)
        else:
            skip_diff = hybrid_flags and rng.random() < 0.35
            act = DeltaLayerConfig(
                fn,
                list(QuantMode)[int(rng.integers(3))],
                max_pool=pool,
                skip_integration=kind == "dense",
                skip_differentiation=skip_diff,
            )
            kind = "dense" if skip_diff else "delta"
        layers.append(LayerSpec(op, act))
        shape = z if pool is None else (z[0] // 2, z[1] // 2, z[2])
    layers.append(LayerSpec(Dense(int(rng.integers(2, 6)))))
    return NetworkSpec(input_shape, tuple(layers))


def random_params(spec: NetworkSpec, rng: np.random.Generator, q_range: tuple[float, float] = (0.05, 0.5)) -> ParamSet:
    """He-initialised weights, random biases, and ``q`` drawn uniformly from ``q_range``."""
    params = init_params(spec, int(rng.integers(2**31)), bias_std=0.3)
    for p in params.layers:
        if p.q is not None:
            p.q = rng.uniform(*q_range, p.q.shape).astype(np.float32)
    return params


def random_walk(rng: np.random.Generator, shape: tuple[int, ...], T: int, step: float = 0.05) -> np.ndarray:
    """``T`` frames starting uniform in [0, 1], each pixel taking small random steps."""
    x = rng.uniform(0.0, 1.0, shape)
    frames = [x]
    for _ in range(T - 1):
        x = np.clip(x + rng.normal(0.0, step, shape), 0.0, 1.0)
        frames.append(x)
    return np.stack(frames)


def smooth_spec(spec: NetworkSpec) -> NetworkSpec:
    """Same network with quantization bypassed so the loss is differentiable."""
    return spec.with_activations(
        lambda i, layer: dataclasses.replace(layer.activation, quantize=False)
        if isinstance(layer.activation, DeltaLayerConfig)
        else layer.activation
    )


def finite_difference_check(
    spec: NetworkSpec,
    params: ParamSet,
    frames: np.ndarray,
    labels: np.ndarray,
    lambdas: list[float],
    rng: np.random.Generator,
    probes: int = 40,
    h: float = 1e-3,
) -> list[float]:
    """Relative errors of analytic W/B gradients against central differences.

    Each probe picks a random weight (or, a quarter of the time, a bias) entry.
    Losses are evaluated with float64 parameters so the difference quotient is
    not swamped by float32 rounding.
    """
    from .training import backward, forward_record

    grads = backward(forward_record(spec, params, frames, labels, lambdas)[2])
    with_w = [k for k, p in enumerate(params.layers) if p.W is not None]
    errors = []
    for _ in range(probes):
        i = int(rng.choice(with_w))
        name = "W" if rng.random() < 0.75 or params.layers[i].B is None else "B"
        idx = tuple(int(rng.integers(s)) for s in getattr(params.layers[i], name).shape)
        loss = []
        for sgn in (1, -1):
            p2 = ParamSet(
                [LayerParams(*(None if t is None else t.astype(np.float64) for t in (l.W, l.B, l.q))) for l in params.layers]
            )
            getattr(p2.layers[i], name)[idx] += sgn * h
            loss.append(forward_record(spec, p2, frames, labels, lambdas)[1].total)
        fd = (loss[0] - loss[1]) / (2 * h)
        an = float(getattr(grads.layers[i], name)[idx])
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return errors
