"""Command-line entry point: ``fixedhead <subcommand> ...`` (or ``python -m fixedhead``).

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

from . import selftest
from .errors import FixedHeadError
from .experiments import ExperimentConfig, OptimizerConfig, make_dataset, sweep, train, write_atomic
from .linalg import read_matrix
from .realization import realize_context, scalar_bottleneck_witness
from .separation import build_target, verify_separation


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(base: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` pairs; ``optimizer.<field>`` reaches the optimizer settings."""
    cfg = dict(base)
    opt = dict(cfg.get("optimizer") or {})
    top = {f.name for f in fields(ExperimentConfig)}
    opt_keys = {f.name for f in fields(OptimizerConfig)}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        if key.startswith("optimizer."):
            sub = key.split(".", 1)[1]
            if sub not in opt_keys:
                raise UsageError(f"unknown config key: {key}")
            opt[sub] = _parse_value(value)
        elif key in top and key != "optimizer":
            cfg[key] = _parse_value(value)
        else:
            raise UsageError(f"unknown config key: {key}")
    if opt:
        cfg["optimizer"] = opt
    return cfg


def _load_config_dict(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _config_from(obj: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(obj)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def cmd_realize(args) -> int:
    res = realize_context(read_matrix(args.x), read_matrix(args.p))
    write_atomic(args.out, _dump(res.to_dict()))
    print(f"residual_max_abs {res.residual_max_abs:.3e}")
    return 0


def cmd_bottleneck(args) -> int:
    lo, arg = scalar_bottleneck_witness(step=args.step)
    print(f"min_residual {lo:.17g}")
    print(f"argmin {arg:.17g}")
    if args.out:
        write_atomic(args.out, _dump({"min_residual": lo, "argmin_w": arg, "step": args.step}))
    return 0


def cmd_separate(args) -> int:
    target = build_target(args.d, args.dp, args.h, args.n, seed=args.seed)
    summary = verify_separation(target, args.samples, seed=args.seed)
    print(f"counts {json.dumps(summary.counts, sort_keys=True)}")
    print(f"min_gap {summary.min_gap:.6e}")
    if args.out:
        payload = {"d": args.d, "d_p": args.dp, "h": args.h, "n": args.n, "samples": args.samples,
                   "seed": args.seed, **summary.to_dict(include_reports=not args.summary_only)}
        write_atomic(args.out, _dump(payload))
    return 0


def cmd_train(args) -> int:
    cfg_dict = apply_overrides(_load_config_dict(args.config), args.overrides)
    cfg_dict["seed"] = args.seed
    cfg = _config_from(cfg_dict)
    report = train(cfg, make_dataset(cfg))
    write_atomic(args.out, _dump(report.to_dict()))
    print(f"final_eval {report.final_eval:.6e}")
    return 0


def cmd_sweep(args) -> int:
    raw = _load_config_dict(args.config)
    if not isinstance(raw, list):
        raise UsageError("sweep config must be a JSON list of config objects")
    configs = []
    for obj in raw:
        obj = apply_overrides(obj, args.overrides)
        obj["seed"] = args.seed
        configs.append(_config_from(obj))
    rows = sweep(configs, args.seeds_per_config, args.out, workers=args.workers)
    failed = sum(1 for r in rows if r["error"])
    print(f"runs {len(rows)} failed {failed}")
    return 0


def cmd_selftest(args) -> int:
    return 0 if selftest.run(args.seed) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fixedhead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("realize", help="construct W_k, W_q realizing a context matrix")
    p.add_argument("--x", required=True, help="input matrix CSV (d x n, full column rank, d >= n)")
    p.add_argument("--p", required=True, help="positive column-stochastic context CSV (n x n)")
    p.add_argument("--out", required=True, help="result JSON path")
    p.set_defaults(fn=cmd_realize)

    p = sub.add_parser("bottleneck", help="brute-force the scalar d=1, n=2 counterexample")
    p.add_argument("--step", type=float, default=1e-3, help="grid step on [-50, 50]")
    p.add_argument("--out", help="optional JSON path")
    p.set_defaults(fn=cmd_bottleneck)

    p = sub.add_parser("separate", help="certify fixed-vs-standard separation witnesses")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--dp", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--samples", type=int, required=True, help="random competitors to test")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="optional JSON path")
    p.add_argument("--summary-only", action="store_true", help="omit per-competitor reports from --out")
    p.set_defaults(fn=cmd_separate)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", help="JSON object of ExperimentConfig fields")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="TrainReport JSON path")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. h=4 optimizer.lr=1e-4")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="run a list of configs over several seeds, write CSV")
    p.add_argument("--config", required=True, help="JSON list of ExperimentConfig objects")
    p.add_argument("--seeds-per-config", type=int, required=True)
    p.add_argument("--seed", type=int, required=True, help="base seed; run k uses seed + k")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="overrides applied to every config")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=cmd_selftest)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FixedHeadError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
