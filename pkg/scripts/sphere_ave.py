"""Sphere AVE at desk scale: learned geodesics vs the straight chord, against great circles.

    python scripts/sphere_ave.py --dim 10 --n 8000 --out runs/sphere10
    python scripts/sphere_ave.py --dim 20 --n 4000 --out runs/sphere20
"""

import argparse
import json

from eggfm.experiments import sphere_ave, sphere_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--n", type=int, default=8000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/sphere")
    args = ap.parse_args()
    for s in args.seeds:
        res = sphere_ave(sphere_config(args.dim, args.n, f"{args.out}/seed{s}", seed=s))
        print(json.dumps(res))


if __name__ == "__main__":
    main()
