"""Barbell avoidance: fraction of cross-blob pairs whose learned path has a lower G line integral than the chord.

    python scripts/barbell.py --out runs/barbell --seeds 0 1 2
"""

import argparse
import json

from eggfm.experiments import barbell


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/barbell")
    args = ap.parse_args()
    for s in args.seeds:
        print(json.dumps(barbell(f"{args.out}/seed{s}", seed=s, n=args.n, n_pairs=args.pairs)))


if __name__ == "__main__":
    main()
