"""Train an fc preset and its recurrent counterpart on seeded moving sprites.

    python scripts/compare_sprites.py --fc fc-lenet --rfc rfc-lenet --epochs 25
    python scripts/compare_sprites.py --fc fc-vgg --rfc rfc-vgg --scale 0.25

Prints one line per epoch evaluation and a JSON summary (final-epoch test
F-measure per seed and the medians); ``--out`` also saves the summary.
"""

import argparse
import json
from pathlib import Path

from rfcn.experiments import ComparisonConfig, compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fc", default="fc-lenet")
    ap.add_argument("--rfc", default="rfc-lenet")
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--sequences", type=int, default=12)
    ap.add_argument("--length", type=int, default=20)
    ap.add_argument("--precision", type=int, default=32, choices=(32, 64))
    ap.add_argument("--eval-every", type=int, default=0, help="print test metrics every N epochs (0: final only)")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = ComparisonConfig(args.fc, args.rfc, args.scale, args.sequences, args.length, epochs=args.epochs,
                           seeds=tuple(args.seeds), precision=args.precision,
                           eval_every=args.eval_every)

    def log(preset, seed, row):
        test = f" test F {row['test_f_measure']:.4f}" if "test_f_measure" in row else ""
        print(f"{preset:<10} seed {seed} epoch {row['epoch']:>3} loss {row['loss']:.4f}{test}", flush=True)

    result = compare(cfg, log=log)
    summary = json.dumps(result.summary(), indent=2)
    print(summary)
    if args.out:
        args.out.write_text(summary + "\n")


if __name__ == "__main__":
    main()
