"""Command line entry point: ``eggfm <command> ...``.

Exit codes: 0 ok, 2 bad config or usage, 3 missing prerequisite stage,
4 numerical divergence, 5 I/O or data error. Failures print one line to
stderr of the form ``eggfm: error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .blob import BlobError
from .config import ConfigError, PRESETS, RunConfig
from .data import DataError, sample_sphere, save_dataset, split_timepoints
from .eval import combine_reports
from .nn import CheckpointError, NonFiniteError
from .pipeline import STAGES, MissingPrerequisite, Run, evaluate_ave, evaluate_w1, export_grid, interpolate, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def load_config(args) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {args.config}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON in {args.config}: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
    if getattr(args, "preset", None):
        raw = {"preset": args.preset, **raw}
    raw.update(_parse_set(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    return RunConfig.from_dict(raw)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset before applying --config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (JSON value)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eggfm", description="energy-geodesic flow matching")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-sphere", help="sample uniform points on the unit sphere")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--timepoints", type=int, default=2, help="random equal-size timepoint labels")
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=("bin", "csv"))

    t = sub.add_parser("train", help="run one training stage (or all)")
    _add_config_args(t)
    t.add_argument("--stage", required=True, choices=(*STAGES, "all"))

    e = sub.add_parser("eval", help="evaluate a trained run")
    _add_config_args(e)
    e.add_argument("--metric", choices=("ave", "w1", "both"), default="both")
    e.add_argument("--path", choices=("learned", "chord", "slerp"), default="learned",
                   help="curve scored by AVE")
    e.add_argument("--eval-seeds", type=int, nargs="+", help="repeat evaluation with these sampling seeds")

    x = sub.add_parser("export-grid", help="energy/metric on a 2D plane through the data space")
    _add_config_args(x)
    x.add_argument("--plane", default="0,1", help="two ambient axes, e.g. 0,1")
    x.add_argument("--resolution", type=int, default=64)
    x.add_argument("--extent", type=float, default=1.5)
    x.add_argument("--out", required=True)
    x.add_argument("--svg", action="store_true")

    i = sub.add_parser("interpolate", help="integrate the flow between two timepoints")
    _add_config_args(i)
    i.add_argument("--from", dest="label_from", type=int, required=True)
    i.add_argument("--to", dest="label_to", type=int, required=True)
    i.add_argument("--n-steps", type=int, default=100)
    i.add_argument("--n-traj", type=int, default=64)
    i.add_argument("--out", required=True)
    return ap


def _cmd_gen_sphere(args) -> int:
    if args.dim < 2 or args.n < 1:
        raise UsageError(f"gen-sphere needs --dim >= 2 and --n >= 1 (got dim={args.dim}, n={args.n})")
    ds = sample_sphere(args.dim, args.n, args.seed)
    if args.timepoints > 1:
        ds = split_timepoints(ds, args.timepoints, args.seed)
    save_dataset(ds, args.out, args.format)
    dev = float(np.abs(np.linalg.norm(ds.points, axis=1) - 1).max())
    print(json.dumps({"out": str(args.out), "n": ds.n, "dim": ds.d, "max_norm_deviation": dev}))
    return EXIT_OK


def _cmd_train(args) -> int:
    run = Run(load_config(args))
    done = run_stage(run, args.stage)
    print(json.dumps({"run_dir": str(run.root), "stages": done, "config_hash": run.hash}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    run = Run(load_config(args))
    metrics = ("ave", "w1") if args.metric == "both" else (args.metric,)
    seeds = args.eval_seeds or [run.cfg.seed]
    for m in metrics:
        if m == "ave":
            reps = [evaluate_ave(run, args.path, s) for s in seeds]
        else:
            reps = [evaluate_w1(run, s) for s in seeds]
        rep = reps[0] if len(reps) == 1 else combine_reports(reps)
        run.root.mkdir(parents=True, exist_ok=True)
        rep.append_csv(run.path("results.csv"))
        print(rep.to_json())
    return EXIT_OK


def _cmd_export_grid(args) -> int:
    run = Run(load_config(args))
    try:
        i, j = (int(v) for v in args.plane.split(","))
    except ValueError:
        raise UsageError(f"--plane expects two comma-separated axes, got {args.plane!r}") from None
    grid = export_grid(run, Path(args.out), i, j, args.resolution, args.extent, args.svg)
    print(json.dumps({"out": args.out, "shape": list(grid.energy.shape)}))
    return EXIT_OK


def _cmd_interpolate(args) -> int:
    run = Run(load_config(args))
    traj = interpolate(run, Path(args.out), args.label_from, args.label_to, args.n_steps, args.n_traj)
    print(json.dumps({"out": args.out, "shape": list(traj.shape)}))
    return EXIT_OK


COMMANDS = {"gen-sphere": _cmd_gen_sphere, "train": _cmd_train, "eval": _cmd_eval,
            "export-grid": _cmd_export_grid, "interpolate": _cmd_interpolate}


def _fail(kind: str, msg: str, code: int) -> int:
    msg = " ".join(str(msg).split())
    print(f"eggfm: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("config", "; ".join(exc.problems), EXIT_CONFIG)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_CONFIG)
    except MissingPrerequisite as exc:
        return _fail("prerequisite", exc, EXIT_PREREQ)
    except NonFiniteError as exc:
        return _fail("diverged", exc, EXIT_DIVERGED)
    except (OSError, BlobError, CheckpointError, DataError) as exc:
        return _fail("io", exc, EXIT_IO)
    except ValueError as exc:
        return _fail("config", exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
