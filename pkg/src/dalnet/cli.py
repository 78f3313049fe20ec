"""Command-line entry point: ``dalnet {gen-data,train,verify,report}``.

Each command reads an optional JSON config (``--config``); command-line flags
override it. Primary outputs are deterministic for a given config and seed;
wall-clock times go to a separate ``timing.json``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 verification
failure, 5 training diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DalnetError, FormatError, TrainingDiverged
from .formats import load_sequence, read_model, save_model, save_sequence
from .measure import (
    FrameRateRow,
    equivalence_check,
    frame_rate_csv,
    frame_rate_experiment,
    memory_overhead_estimate,
    per_layer_csv,
    per_layer_report,
    resnet50_sheet,
)
from .delta import PlainActivation
from .network import InferenceSession, init_params
from .presets import PENALISED, PRESETS, build_network
from .synthetic import N_CLASSES, PRESETS as SCENE_PRESETS, FrameSequence, make_dataset
from .training import (
    TrainConfig,
    calibrate_base_lambda,
    evaluate,
    overall_op_sparsity,
    train,
    write_training_log,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERIFY, EXIT_DIVERGED = 0, 2, 3, 4, 5
GEN_FIELDS = ("seed", "n_per_class", "n_test_per_class", "frames", "height", "width", "scene", "noise")


@dataclass
class ExperimentConfig:
    out: str = "out"
    seed: int = 0
    # gen-data
    n_per_class: int = 50
    n_test_per_class: int = 13
    frames: int = 16
    height: int = 64
    width: int = 64
    scene: str = "frozen-cam"
    noise: float = 0.0
    # train
    data: str = "data/manifest.json"
    preset: str = "temporal"
    epochs: int = 6
    lr: float = 0.05
    q_lr: float = 1e-4
    batch_size: int = 8
    base_lambda: float | None = None  # None: calibrated from the first batch
    lambda_ratio: float = 0.25
    channels: list[int] = field(default_factory=lambda: [8, 16])
    hidden: int = 32
    quant_mode: str = "channel-wise"
    # verify / report
    model: str = "out/model.dalm"
    split: str = "test"
    max_sequences: int | None = None
    tol: float = 1e-4
    corrupt_q: bool = False
    mode: str = "hybrid"
    divisors: list[int] = field(default_factory=lambda: [1, 2, 4])
    state_bits: int = 16
    weight_bits: int = 8
    state_words: int = 2

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "ExperimentConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except OSError as exc:
                raise OSError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
            known = {f.name for f in fields(cls)}
            unknown = sorted(set(data) - known)
            if unknown:
                raise ConfigurationError(f"unknown config keys: {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------


def load_manifest(path: str | Path, split: str | None = None) -> list[dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}", exc.pos) from exc
    entries = manifest["sequences"]
    if split is not None:
        entries = [e for e in entries if e["split"] == split]
    return [dict(e, path=str(path.parent / e["path"])) for e in entries]


def load_split(manifest: str | Path, split: str, limit: int | None = None):
    entries = load_manifest(manifest, split)[:limit]
    if not entries:
        raise ConfigurationError(f"no sequences in split {split!r} of {manifest}")
    frames = np.stack([load_sequence(e["path"]).frames for e in entries])
    labels = np.array([e["label"] for e in entries], dtype=np.int64)
    return frames, labels


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    if cfg.scene not in SCENE_PRESETS:
        raise ConfigurationError(f"scene must be one of {SCENE_PRESETS}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    splits = (("train", cfg.n_per_class, cfg.seed), ("test", cfg.n_test_per_class, cfg.seed + 1))
    for split, n, seed in splits:
        if n < 0:
            raise ConfigurationError("sequence counts must be nonnegative")
        seqs = make_dataset(n, cfg.frames, seed, cfg.height, cfg.width, cfg.scene, cfg.noise) if n else []
        for k, seq in enumerate(seqs):
            rel = f"{split}/{k:05d}.dseq"
            (out / split).mkdir(exist_ok=True)
            save_sequence(out / rel, seq)
            entries.append({"path": rel, "label": int(seq.label), "split": split})
    generator = {k: getattr(cfg, k) for k in GEN_FIELDS}
    manifest = {"n_classes": N_CLASSES, "generator": generator, "sequences": entries}
    _write(out / "manifest.json", _dump(manifest))
    print(f"wrote {len(entries)} sequences to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    started = time.perf_counter()
    frames, labels = load_split(cfg.data, "train")
    spec = build_network(cfg.preset, frames.shape[2:], N_CLASSES, tuple(cfg.channels), cfg.hidden, cfg.quant_mode)
    params = init_params(spec, cfg.seed)
    base = 0.0
    if PENALISED[cfg.preset]:
        if cfg.base_lambda is not None:
            base = cfg.base_lambda
        else:
            n = min(len(frames), 2 * cfg.batch_size)
            base = calibrate_base_lambda(spec, params, frames[:n], labels[:n], cfg.lambda_ratio)
    tcfg = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, base, cfg.seed, cfg.q_lr)
    params, log = train(spec, params, frames, labels, tcfg)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"preset": cfg.preset, "base_lambda": base, "train_accuracy": log[-1].accuracy}
    try:
        test_x, test_y = load_split(cfg.data, "test")
    except ConfigurationError:
        test_x = None
    if test_x is not None:
        acc, counts = evaluate(spec, params, test_x, test_y)
        metrics.update(test_accuracy=acc, test_op_sparsity=overall_op_sparsity(counts))
    save_model(out / "model.dalm", spec, params, metadata={"train_config": asdict(tcfg), **metrics})
    write_training_log(out / "train_log.csv", log)
    _write(out / "metrics.json", _dump(metrics))
    _write(out / "timing.json", _dump({"train_seconds": time.perf_counter() - started}))
    print(_dump(metrics), end="")
    return EXIT_OK


def _corrupted(params):
    bad = params.copy()
    for p in bad.layers:
        if p.q is not None:
            p.q = (p.q * np.float32(1.37)).astype(np.float32)
    return bad


def cmd_verify(cfg: ExperimentConfig) -> int:
    bundle = read_model(cfg.model)
    spec, params = bundle.spec, bundle.params
    frames, _ = load_split(cfg.data, cfg.split, cfg.max_sequences)
    alt = _corrupted(params) if cfg.corrupt_q else None
    has_plain = any(isinstance(layer.activation, PlainActivation) for layer in spec.layers)
    pairs = [("normal", "hybrid")] + ([] if has_plain else [("normal", "delta"), ("delta", "hybrid")])
    result = {"tol": cfg.tol, "sequences": len(frames), "corrupt_q": cfg.corrupt_q, "pairs": {}}
    ok = True
    for ref, mode in pairs:
        worst, first = 0.0, None
        for k, seq in enumerate(frames):
            # the reference side keeps the stored parameters, except in the
            # delta-vs-hybrid pair where both sides are tested modes
            ref_params = alt if (alt is not None and ref != "normal") else params
            r = equivalence_check(spec, ref_params, seq, mode, ref, cfg.tol, alt)
            worst = max(worst, r["max_abs_diff"])
            if first is None and r["first_divergent_step"] is not None:
                first = {"sequence": k, "step": r["first_divergent_step"]}
        result["pairs"][f"{ref}-{mode}"] = {"max_abs_diff": worst, "first_divergent_step": first}
        ok &= worst <= cfg.tol
    result["passed"] = bool(ok)
    text = _dump(result)
    _write(Path(cfg.out) / "verify.json", text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(cfg: ExperimentConfig) -> int:
    bundle = read_model(cfg.model)
    spec, params = bundle.spec, bundle.params
    frames, labels = load_split(cfg.data, cfg.split, cfg.max_sequences)
    out = Path(cfg.out)

    session = InferenceSession(spec, params, cfg.mode)
    for seq in frames:
        session.reset_state()
        for f in seq:
            session.step(f)
    _write(out / "per_layer.csv", per_layer_csv(per_layer_report(session)))

    per_div = {}
    for seq, label in zip(frames, labels):
        for row in frame_rate_experiment(spec, params, FrameSequence(seq, 30.0, int(label)), cfg.divisors, cfg.mode):
            per_div.setdefault(row.divisor, []).append(row)
    rows = [
        FrameRateRow(
            d,
            rs[0].fps,
            rs[0].frames,
            float(np.mean([r.activation_sparsity for r in rs])),
            float(np.mean([r.op_sparsity for r in rs])),
        )
        for d, rs in per_div.items()
    ]
    _write(out / "frame_rate.csv", frame_rate_csv(rows))

    memory = {
        "model": asdict(memory_overhead_estimate(spec, cfg.state_bits, cfg.weight_bits, cfg.state_words)),
        "resnet50": {
            f"{w}_state_words": asdict(memory_overhead_estimate(resnet50_sheet(), cfg.state_bits, cfg.weight_bits, w))
            for w in (1, 2)
        },
    }
    _write(out / "memory.json", _dump(memory))
    print(f"wrote per_layer.csv, frame_rate.csv, memory.json to {out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "verify": cmd_verify, "report": cmd_report}


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dalnet", description="Delta Activation Layer experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic DSEQ dataset and manifest")
    p.add_argument("--n-per-class", type=int, dest="n_per_class")
    p.add_argument("--n-test-per-class", type=int, dest="n_test_per_class")
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--scene", choices=SCENE_PRESETS)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", parents=[common], help="train a network on a dataset manifest")
    p.add_argument("--data")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--q-lr", type=float, dest="q_lr")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-lambda", type=float, dest="base_lambda")
    p.add_argument("--quant-mode", dest="quant_mode", choices=("neuron-wise", "channel-wise", "layer-wise"))

    for name, text in (("verify", "check normal, delta and hybrid inference agree"), ("report", "write sparsity and memory reports")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--model")
        p.add_argument("--data")
        p.add_argument("--split")
        p.add_argument("--max-sequences", type=int, dest="max_sequences")
        if name == "verify":
            p.add_argument("--tol", type=float)
            p.add_argument("--corrupt-q", action="store_true", default=None, dest="corrupt_q",
                           help="negative control: scale q in the tested modes")
        else:
            p.add_argument("--mode", choices=("normal", "delta", "hybrid"))
            p.add_argument("--divisors", type=_int_list, help="comma-separated subsample divisors")
            p.add_argument("--state-bits", type=int, dest="state_bits")
            p.add_argument("--weight-bits", type=int, dest="weight_bits")
            p.add_argument("--state-words", type=int, dest="state_words")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DalnetError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
