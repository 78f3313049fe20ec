"""Activation sparsity of a temporal toy CNN as the frame rate drops.

    python3 scripts/frame_rate.py --sequences 100 --divisors 1,2,4
"""

import argparse
import csv
import sys

import numpy as np

from dalnet.delta import DeltaLayerConfig
from dalnet.measure import frame_rate_experiment
from dalnet.network import init_params, toy_cnn
from dalnet.synthetic import generate_sequence, motion_class_scene


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=100)
    ap.add_argument("--frames", type=int, default=32)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--divisors", default="1,2,4")
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    divisors = [int(d) for d in args.divisors.split(",")]
    spec = toy_cnn((args.size, args.size, 1), 4, lambda i: DeltaLayerConfig())
    params = init_params(spec, 0, bias_std=0.1)
    rng = np.random.default_rng(args.seed)
    acc = {d: [] for d in divisors}
    for k in range(args.sequences):
        scene = motion_class_scene(k % 4, rng, args.frames, args.size, args.size, speed=(0.25, 0.75))
        for row in frame_rate_experiment(spec, params, generate_sequence(scene, args.frames), divisors):
            acc[row.divisor].append((row.fps, row.activation_sparsity, row.op_sparsity))
    out = csv.writer(sys.stdout)
    out.writerow(["divisor", "fps", "activation_sparsity", "op_sparsity"])
    for d in sorted(divisors, reverse=True):
        fps, act, op = np.mean(acc[d], axis=0)
        out.writerow([d, f"{fps:g}", f"{act:.6f}", f"{op:.6f}"])


if __name__ == "__main__":
    main()
