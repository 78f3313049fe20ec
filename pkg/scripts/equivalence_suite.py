"""Run random networks in all three modes and report the largest score gap.

    python3 scripts/equivalence_suite.py --specs 50 --frames 50
"""

import argparse
import json
import time

import numpy as np

from dalnet.measure import equivalence_check
from dalnet.testing import random_params, random_spec, random_walk


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--specs", type=int, default=50)
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tol", type=float, default=1e-4)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    start = time.perf_counter()
    worst = {"delta": 0.0, "hybrid": 0.0}
    failures = []
    for n in range(args.specs):
        spec = random_spec(rng)
        params = random_params(spec, rng)
        frames = random_walk(rng, spec.input_shape, args.frames)
        for mode in worst:
            res = equivalence_check(spec, params, frames, mode=mode, tol=args.tol)
            worst[mode] = max(worst[mode], res["max_abs_diff"])
            if res["first_divergent_step"] is not None:
                failures.append({"spec": n, "mode": mode, **res})
    summary = {
        "specs": args.specs,
        "frames": args.frames,
        "max_abs_diff": worst,
        "failures": failures,
        "seconds": round(time.perf_counter() - start, 2),
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
