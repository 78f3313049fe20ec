"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary (see conftest.py) and also echoed to stdout, so
``pytest tests/test_acceptance.py -s`` shows them inline.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dalnet.delta import ActivationFn, DeltaLayerConfig, quantize_activation
from dalnet.formats import decode_sequence, encode_sequence, load_model, load_sequence, save_model, save_sequence
from dalnet.measure import MemorySheet, frame_rate_experiment, memory_overhead_estimate, operation_sparsity, resnet50_sheet
from dalnet.network import InferenceSession, LayerSpec, NetworkSpec, init_params, toy_cnn
from dalnet.presets import build_network
from dalnet.synthetic import (
    SyntheticSceneSpec,
    frozen,
    generate_sequence,
    make_dataset,
    motion_class_scene,
    stack_dataset,
)
from dalnet.tensor import Conv2D, Dense
from dalnet.testing import finite_difference_check, random_params, random_spec, random_walk, smooth_spec
from dalnet.training import (
    GradSet,
    LayerGrads,
    TrainConfig,
    backward,
    calibrate_base_lambda,
    evaluate,
    forward_record,
    overall_op_sparsity,
    sgd_step,
    train,
)


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((number, title, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}  [{detail}]")
    assert ok, detail


def test_criterion_1_exact_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst = 0.0
    first_bad = None
    kinds = set()
    for n in range(50):
        spec = random_spec(rng)
        params = random_params(spec, rng, (0.05, 0.5))
        kinds.update(type(layer.op).__name__ for layer in spec.layers)
        kinds.update(layer.activation.quant_mode.value for layer in spec.layers if layer.is_delta)
        frames = random_walk(rng, spec.input_shape, 50)
        sessions = {m: InferenceSession(spec, params, m) for m in ("normal", "delta", "hybrid")}
        for t, f in enumerate(frames, 1):
            ref = sessions["normal"].step(f)
            for m in ("delta", "hybrid"):
                d = float(np.max(np.abs(sessions[m].step(f) - ref)))
                worst = max(worst, d)
                if d > 1e-4 and first_bad is None:
                    first_bad = (n, m, t)
    elapsed = time.perf_counter() - start
    coverage = {"Conv2D", "Dense", "layer-wise", "channel-wise", "neuron-wise"} <= kinds
    record(
        1,
        "delta and hybrid match normal on 50 random specs, T=50",
        worst <= 1e-4 and coverage and elapsed <= 120,
        f"max |diff| {worst:.2e}, first violation {first_bad}, coverage {coverage}, {elapsed:.1f}s",
    )


def test_criterion_2_warm_idle():
    spec = toy_cnn((32, 32, 1), 4, lambda i: DeltaLayerConfig())
    params = init_params(spec, 0, bias_std=0.1)
    frames = generate_sequence(frozen(SyntheticSceneSpec(32, 32, size=8, velocity=(1.0, 0.5), noise_amplitude=0.05)), 50).frames
    session = InferenceSession(spec, params, "delta")
    session.step(frames[0])
    after_first = [c.macs_nonzero for c in session.counters]
    increments = []
    for f in frames[1:]:
        before = [c.macs_nonzero for c in session.counters]
        session.step(f)
        increments.append([c.macs_nonzero - b for c, b in zip(session.counters, before)])
    hidden_idle = all(inc[i] == 0 for inc in increments for i in range(1, len(spec.layers)))
    sparsity = operation_sparsity(session.counters)
    record(
        2,
        "frozen video leaves hidden layers idle after frame 1",
        hidden_idle and sparsity >= 0.95 and sum(after_first) > 0,
        f"hidden increments all zero: {hidden_idle}, op sparsity at T=50 {sparsity:.4f}",
    )


@pytest.fixture(scope="module")
def trained_pair():
    train_seqs = make_dataset(50, 16, seed=1)
    test_seqs = make_dataset(13, 16, seed=2)[:50]
    xtr, ytr = stack_dataset(train_seqs)
    xte, yte = stack_dataset(test_seqs)
    out = {}
    for preset in ("baseline", "temporal"):
        spec = build_network(preset, (64, 64, 1), 4)
        init = init_params(spec, 0)
        base = 0.0
        if preset == "temporal":
            base = calibrate_base_lambda(spec, init, xtr[:16], ytr[:16], ratio=0.25)
        cfg = TrainConfig(epochs=6, lr=0.05, batch_size=8, q_lr=1e-4, seed=0, base_lambda=base)
        params, _ = train(spec, init, xtr, ytr, cfg)
        acc, counts = evaluate(spec, params, xte, yte)
        out[preset] = (acc, overall_op_sparsity(counts))
    return out


def test_criterion_3_sparsification_by_training(trained_pair):
    (acc_b, sp_b), (acc_t, sp_t) = trained_pair["baseline"], trained_pair["temporal"]
    ratio = sp_t / sp_b
    drop = (acc_b - acc_t) * 100
    record(
        3,
        "temporal training raises op sparsity >= 1.5x with <= 10pp accuracy drop",
        ratio >= 1.5 and drop <= 10,
        f"baseline acc {acc_b:.3f} sp {sp_b:.3f}; temporal acc {acc_t:.3f} sp {sp_t:.3f}; ratio {ratio:.2f}, drop {drop:.1f}pp",
    )


def test_criterion_4_gradient_correctness():
    rng = np.random.default_rng(11)
    errors = []
    # ReLU and max-pool have kinks a central difference can straddle; both stay out
    for fn in (ActivationFn.SIGMOID, ActivationFn.IDENTITY):
        spec = smooth_spec(toy_cnn((8, 8, 1), 3, lambda i: DeltaLayerConfig(fn, max_pool=None), (3, 4), 5))
        params = init_params(spec, 1, bias_std=0.2)
        frames = rng.random((2, 4, 8, 8, 1))
        errors += finite_difference_check(spec, params, frames, np.array([0, 2]), [0.01, 0.02, 0.005, 0.0], rng, probes=60)
    worst = max(errors)
    record(
        4,
        "analytic W/B gradients match central differences on the smooth config",
        len(errors) >= 100 and worst <= 1e-3,
        f"{len(errors)} probes, worst relative error {worst:.2e}",
    )


def test_criterion_5_q_dynamics():
    rng = np.random.default_rng(5)
    wrong = 0
    positive = zero = 0
    for _ in range(150):
        spec = random_spec(rng, activations=(ActivationFn.RELU, ActivationFn.SIGMOID), hybrid_flags=False)
        params = random_params(spec, rng)
        if rng.random() < 0.3:
            # a dead ReLU layer: every output and hence every delta is zero
            for layer, p in zip(spec.layers, params.layers):
                if layer.is_delta and layer.activation.activation is ActivationFn.RELU:
                    p.B[...] = -1e3
                    break
        frames = rng.random((2, 5, *spec.input_shape))
        lams = [0.2] * len(spec.layers)
        _, br, tape = forward_record(spec, params, frames, np.zeros(2, int), lams)
        grads = backward(tape)
        # the accuracy gradient is zeroed: only the local sparsity term moves q
        only_sparsity = GradSet([LayerGrads(q=g.q_local) for g in grads.layers])
        stepped = sgd_step(params, only_sparsity, lr=1.0, q_lr=1e-3)
        for layer, p, p2, s in zip(spec.layers, params.layers, stepped.layers, br.sparsity_losses):
            if not layer.is_delta:
                continue
            dq = p2.q.astype(np.float64) - p.q
            if s > 0:
                positive += 1
                wrong += not (np.all(dq >= 0) and dq.sum() > 0)
            else:
                zero += 1
                wrong += bool(np.any(dq != 0))

    # q floor: 1000 random steps with full gradients plus large random pushes
    spec = toy_cnn((8, 8, 1), 3, lambda i: DeltaLayerConfig(q_min=1e-3), (2, 3), 4)
    params = init_params(spec, 0, bias_std=0.1)
    lams = [0.05] * len(spec.layers)
    lowest = math.inf
    for _ in range(1000):
        frames = rng.random((1, 3, 8, 8, 1))
        _, _, tape = forward_record(spec, params, frames, rng.integers(0, 3, 1), lams)
        grads = backward(tape)
        for g, p in zip(grads.layers, params.layers):
            if p.q is not None:
                g.q = g.q + rng.normal(0, 50.0, p.q.shape)
        params = sgd_step(params, grads, lr=float(rng.uniform(1e-3, 0.05)), q_min=1e-3, q_lr=float(rng.uniform(1e-4, 1e-2)))
        lowest = min(lowest, min(float(p.q.min()) for p in params.layers if p.q is not None))
    ok = wrong == 0 and positive > 0 and zero > 0 and lowest >= 1e-3
    record(
        5,
        "sparsity-only q update is positive where deltas flow, zero where none, q stays >= q_min",
        ok,
        f"{positive} emitting layers, {zero} silent layers, {wrong} violations, min q over 1000 steps {lowest:.6g}",
    )


def test_criterion_6_frame_rate_monotonicity():
    spec = toy_cnn((32, 32, 1), 4, lambda i: DeltaLayerConfig())
    params = init_params(spec, 0, bias_std=0.1)
    rng = np.random.default_rng(5)
    full, quarter = [], []
    for k in range(100):
        scene = motion_class_scene(k % 4, rng, 32, 32, 32, speed=(0.25, 0.75))
        rows = {r.divisor: r for r in frame_rate_experiment(spec, params, generate_sequence(scene, 32), [1, 4])}
        full.append(rows[1].activation_sparsity)
        quarter.append(rows[4].activation_sparsity)
    margin = (np.mean(full) - np.mean(quarter)) * 100
    record(
        6,
        "full frame rate is sparser than quarter rate by >= 2pp",
        margin >= 2.0,
        f"full {np.mean(full):.4f}, quarter {np.mean(quarter):.4f}, margin {margin:.2f}pp over 100 sequences",
    )


def _scalar_fq(z: float, q: float, fn: str) -> float:
    f = max(z, 0.0) if fn == "relu" else 1.0 / (1.0 + math.exp(-z))
    x = f / q
    n = math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)
    return n * q


def test_criterion_7_quantizer_properties():
    rng = np.random.default_rng(7)
    n = 1_000_000
    worst = {}
    for fn in (ActivationFn.RELU, ActivationFn.SIGMOID):
        z = rng.uniform(-8, 8, n)
        q = rng.uniform(0.01, 1.0, n)
        err = np.abs(quantize_activation(z, q, fn) - fn(z))
        worst[fn.value] = float(np.max(err / q))
    spots = [("relu", 1.0, z) for z in (-2.0, 0.0, 0.3, 0.49, 0.5, 0.51, 1.2, 1.5, 2.49, 3.7)]
    spots += [("sigmoid", 0.2, z) for z in (-6.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 1.4, 2.0, 6.0)]
    mismatches = [
        (fn, z)
        for fn, q, z in spots
        if float(quantize_activation(np.array([z]), np.array([q]), fn)[0]) != _scalar_fq(z, q, fn)
    ]
    ok = all(w <= 0.5 + 1e-12 for w in worst.values()) and not mismatches
    record(
        7,
        "|f_q - f| <= q/2 on 1e6 probes and staircase spot checks",
        ok,
        f"max |err|/q {worst}, staircase mismatches {mismatches}",
    )


def test_criterion_8_format_round_trips(tmp_path):
    seq = generate_sequence(SyntheticSceneSpec(32, 32, velocity=(0.7, 0.3), noise_amplitude=0.05, seed=3), 12)
    save_sequence(tmp_path / "a.dseq", seq)
    save_sequence(tmp_path / "b.dseq", load_sequence(tmp_path / "a.dseq"))
    dseq_ok = (tmp_path / "a.dseq").read_bytes() == (tmp_path / "b.dseq").read_bytes()
    dseq_ok &= encode_sequence(decode_sequence(encode_sequence(seq))) == encode_sequence(seq)

    rng = np.random.default_rng(8)
    model_ok = scores_ok = True
    for _ in range(5):
        spec = random_spec(rng, plain_prob=0.3)
        params = random_params(spec, rng)
        save_model(tmp_path / "m.dalm", spec, params)
        spec2, params2 = load_model(tmp_path / "m.dalm")
        save_model(tmp_path / "n.dalm", spec2, params2)
        model_ok &= (tmp_path / "m.dalm").read_bytes() == (tmp_path / "n.dalm").read_bytes()
        frames = random_walk(rng, spec.input_shape, 6)
        a, b = InferenceSession(spec, params, "hybrid"), InferenceSession(spec2, params2, "hybrid")
        scores_ok &= all(np.array_equal(a.step(f), b.step(f)) for f in frames)
    record(
        8,
        "DSEQ and model files round-trip byte-identically with identical scores",
        dseq_ok and model_ok and scores_ok,
        f"dseq {dseq_ok}, model {model_ok}, post-load scores {scores_ok}",
    )


def test_criterion_9_memory_estimator():
    spec = NetworkSpec(
        (6, 6, 1),
        (
            LayerSpec(Conv2D(3, 2), DeltaLayerConfig()),
            LayerSpec(Dense(5), DeltaLayerConfig()),
            LayerSpec(Dense(3)),
        ),
    )
    est = memory_overhead_estimate(spec, 16, 8)
    toy_ok = (
        est.weight_bytes == 203
        and est.normal_state_bytes == (36 + 32) * 2
        and est.delta_state_bytes == (37 * 2 + 36 + 3) * 2
        and memory_overhead_estimate(MemorySheet(0, (4, 10), (10,)), 16, 8).delta_state_bytes == 40
    )
    sheet = resnet50_sheet()
    one = memory_overhead_estimate(sheet, 16, 8, state_words_per_neuron=1)
    two = memory_overhead_estimate(sheet, 16, 8, state_words_per_neuron=2)
    normal_ok = abs(one.normal_bytes - 25e6) <= 0.15 * 25e6
    assumption_ok = bool(one.assumption) and bool(two.assumption) and one.assumption != two.assumption
    record(
        9,
        "toy hand counts exact, ResNet-50 normal mode ~25MB, assumption reported",
        toy_ok and normal_ok and assumption_ok,
        f"toy exact {toy_ok}; ResNet-50 normal {one.normal_bytes / 1e6:.2f}MB, "
        f"delta {one.delta_bytes / 1e6:.2f}MB (1 word) / {two.delta_bytes / 1e6:.2f}MB (2 words); "
        f"assumption: {one.assumption!r}",
    )
