"""Train baseline and temporal toy CNNs on moving shapes and compare them.

    python3 scripts/train_compare.py --out runs/compare
"""

import argparse
import json
from pathlib import Path

from dalnet.network import init_params
from dalnet.presets import PRESETS, build_network
from dalnet.synthetic import make_dataset, stack_dataset
from dalnet.training import TrainConfig, calibrate_base_lambda, evaluate, overall_op_sparsity, train, write_training_log


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    ap.add_argument("--presets", default="baseline,temporal")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--frames", type=int, default=16)
    ap.add_argument("--train-per-class", type=int, default=50)
    ap.add_argument("--test-sequences", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--lambda-ratio", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    xtr, ytr = stack_dataset(make_dataset(args.train_per_class, args.frames, 1, args.size, args.size))
    test = make_dataset(-(-args.test_sequences // 4), args.frames, 2, args.size, args.size)[: args.test_sequences]
    xte, yte = stack_dataset(test)
    args.out.mkdir(parents=True, exist_ok=True)
    results = {}
    for preset in args.presets.split(","):
        if preset not in PRESETS:
            ap.error(f"unknown preset {preset!r}")
        spec = build_network(preset, (args.size, args.size, 1), 4)
        init = init_params(spec, args.seed)
        base = calibrate_base_lambda(spec, init, xtr[:16], ytr[:16], args.lambda_ratio) if spec.has_delta_layers else 0.0
        params, log = train(spec, init, xtr, ytr, TrainConfig(epochs=args.epochs, seed=args.seed, base_lambda=base))
        write_training_log(args.out / f"{preset}_log.csv", log)
        acc, counts = evaluate(spec, params, xte, yte)
        results[preset] = {"base_lambda": base, "test_accuracy": acc, "test_op_sparsity": overall_op_sparsity(counts)}
        print(f"{preset:12s} acc {acc:.3f}  op sparsity {results[preset]['test_op_sparsity']:.3f}")
    (args.out / "compare.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
