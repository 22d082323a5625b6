"""Command-line entry point: ``palign {run,sweep,gradcheck,calibrate,stats}``.

Extra ``--dotted.key=value`` flags override config fields; values are parsed
as JSON when possible, otherwise taken as strings.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

from .candidates import ambiguity_stats
from .encoder_sim import calibrate_sigma, make_world, sample_dataset, zero_shot_accuracy
from .errors import ConfigError, PalignError
from .gradcheck import CHECKS, check_linear, check_prompt
from .harness import ReportRow, curve_csv, parse_config, run_id, run_sweep, write_report
from .objectives import OBJECTIVES
from .trainer import build_problem, run_training

GRADCHECK_TOL = 1e-4


def _overrides(extra: list[str]) -> dict:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"unrecognized argument {arg!r} (overrides use --key=value)")
        key, raw = arg[2:].split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cmd_run(args, overrides) -> int:
    cfg = parse_config(args.config or "{}", "train", overrides)
    result = run_training(cfg)
    for rec in result.records:
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  test_acc {rec.test_acc:.4f}  lr {rec.lr:.6f}")
    final = result.records[-1]
    print(f"final test_acc {final.test_acc:.4f}  zero-shot {final.zero_shot_acc:.4f}  sigma_img {result.sigma_img:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rid = run_id(cfg.objective, cfg.q, cfg.use_alignment, cfg.seed)
        (out / f"{rid}.csv").write_text(curve_csv(result.records))
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args, overrides) -> int:
    spec = parse_config(args.config or "{}", "sweep", overrides)
    rows = run_sweep(spec, args.parallel)
    write_report(rows, args.out)
    failed = sum(r.error is not None for r in rows)
    print(f"{len(rows)} rows written to {args.out} ({failed} failed)")
    return 0


def cmd_gradcheck(args, overrides) -> int:
    worst = defaultdict(float)
    for check in CHECKS:
        for seed in range(args.trials):
            worst[check] = max(worst[check], check_prompt(check, seed).rel_err)
    for objective in OBJECTIVES:
        name = f"linear:{objective}"
        for seed in range(args.trials):
            worst[name] = max(worst[name], check_linear(objective, seed).rel_err)
    ok = True
    for name, err in worst.items():
        passed = err <= GRADCHECK_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<16} max rel err {err:.2e}")
    return 0 if ok else 1


def cmd_calibrate(args, overrides) -> int:
    cfg = parse_config(args.config or "{}", "train", overrides)
    target = tuple(cfg.world.target_zs or (0.6, 0.9))
    world = make_world(cfg.world, cfg.seed)
    sigma = calibrate_sigma(world, cfg.world, target, cfg.seed)
    data = sample_dataset(world, cfg.world, cfg.seed, sigma)
    acc = zero_shot_accuracy(world, data.test_x, data.test_y)
    print(json.dumps({"sigma_img": sigma, "target": list(target), "zero_shot_acc_test": acc}))
    return 0


def cmd_stats(args, overrides) -> int:
    cfg = parse_config(args.config or "{}", "train", overrides)
    world, data, _ = build_problem(cfg)
    stats = ambiguity_stats(data.candidates, data.train_y, world.C)
    print(json.dumps(asdict(stats)))
    if args.dump:
        data.dump(args.dump)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train a single configuration")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("sweep", help="run a sweep and write results.csv / summary.json / curves")
    p.add_argument("--config")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)
    p = sub.add_parser("calibrate", help="search sigma_img for a zero-shot accuracy band")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_calibrate)
    p = sub.add_parser("stats", help="audit candidate sets of a configuration")
    p.add_argument("--config")
    p.add_argument("--dump", help="also write the dataset JSON here")
    p.set_defaults(fn=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, _overrides(extra))
    except PalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
