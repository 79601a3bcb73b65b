"""Leave-one-out W1 on EB or CITE: one model per held-out timepoint, reports appended to <out>/w1.csv.

The CSV header is f0,...,f{d-1},t: features in order, then the timepoint (EB: 1..5, CITE: days 2, 3, 4, 7).

    python scripts/run_loo.py --preset eb --data data/eb.csv --out runs/eb
    python scripts/run_loo.py --preset cite --data data/cite.csv --desk --out runs/cite_desk
"""

import argparse
import json

from eggfm.config import RunConfig, preset
from eggfm.experiments import DESK, loo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=["eb", "cite"], required=True)
    ap.add_argument("--data", help="defaults to the preset's data/<name>.csv")
    ap.add_argument("--holdouts", type=int, nargs="+", help="defaults to the preset's holdouts")
    ap.add_argument("--desk", action="store_true", help="smaller nets and 50 epochs per stage")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    over = {"seed": args.seed, "output_dir": args.out or f"runs/{args.preset}"}
    if args.data:
        over["dataset"] = args.data
    if args.desk:
        over.update(DESK, score_epochs=50, energy_epochs=50, geodesic_epochs=50, embedding_epochs=50,
                    flow_epochs=50)
    cfg = RunConfig.from_dict({**preset(args.preset).to_dict(), **over})
    print(json.dumps(loo(cfg, args.holdouts), indent=1))


if __name__ == "__main__":
    main()
