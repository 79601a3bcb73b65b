"""Held-out W1 on the synthetic 3-timepoint arc: energy metric vs identity metric (plain OT-CFM).

    python scripts/arc_w1.py --out runs/arc --seeds 0 1 2
"""

import argparse
import json

from eggfm.experiments import arc_w1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-per-time", type=int, default=400)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/arc")
    args = ap.parse_args()
    rows = [arc_w1(f"{args.out}/seed{s}", seed=s, n_per_time=args.n_per_time) for s in args.seeds]
    for r in rows:
        print(json.dumps(r))
    wins = sum(r["w1_eggfm"] <= r["w1_cfm"] for r in rows)
    print(json.dumps({"eggfm_wins": wins, "seeds": len(rows)}))


if __name__ == "__main__":
    main()
