"""Normal versus delta inference memory for a ResNet-50-shaped network.

    python3 scripts/memory_estimate.py --state-bits 16 --weight-bits 8
"""

import argparse
import json

from dalnet.measure import memory_overhead_estimate, resnet50_sheet


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--state-bits", type=int, default=16)
    ap.add_argument("--weight-bits", type=int, default=8)
    ap.add_argument("--with-classifier", action="store_true")
    args = ap.parse_args()

    sheet = resnet50_sheet(include_classifier=args.with_classifier)
    report = {
        "weights": sheet.weights,
        "stateful_neurons": sum(sheet.stateful),
        "estimates": {
            f"{words}_state_words": json.loads(
                memory_overhead_estimate(sheet, args.state_bits, args.weight_bits, words).to_json()
            )
            for words in (1, 2)
        },
    }
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
