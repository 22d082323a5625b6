"""Configuration parsing, sweep orchestration and report writing."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .alignment import AlignConfig
from .encoder_sim import WorldConfig, make_world, sample_dataset, zero_shot_accuracy
from .errors import ConfigError, PalignError, ReportIOError
from .objectives import OBJECTIVES, PicoConfig
from .trainer import MetricsRecord, TrainConfig, build_problem, run_training

RESULTS_HEADER = ["objective", "q", "alignment", "seed", "final_test_acc", "zero_shot_acc", "supervised_topline", "run_id"]
CURVE_HEADER = ["epoch", "train_loss", "test_acc", "zero_shot_acc", "lr"]
SEED_ENV = "PALIGN_SEED"

# Desk-scale regime used by the trend checks: zero-shot calibrated into [0.6, 0.9].
BENCHMARK_WORLD = WorldConfig(tau=0.03, target_zs=(0.6, 0.9))

# JSON spelling -> dataclass field.
_ALIASES = {AlignConfig: {"lambda": "lam"}}


@dataclass(frozen=True)
class SweepSpec:
    q_values: tuple[float, ...] = (0.1, 0.3, 0.5)
    objectives: tuple[str, ...] = ("proden", "cc", "lw", "pico", "pllcr", "cavl")
    alignment: str = "both"
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    candidate_mode: str = "uniform"
    base: TrainConfig = TrainConfig()

    def __post_init__(self):
        if not self.q_values or not self.objectives or not self.seeds:
            raise ConfigError("q_values, objectives and seeds must be non-empty")
        if any(not 0.0 <= q <= 1.0 for q in self.q_values):
            raise ConfigError("q out of range")
        unknown = [o for o in self.objectives if o not in OBJECTIVES]
        if unknown:
            raise ConfigError(f"unknown objectives {unknown}")
        if self.alignment not in ("both", "on", "off"):
            raise ConfigError("alignment must be one of both|on|off")
        if self.candidate_mode not in ("uniform", "instance"):
            raise ConfigError(f"unknown candidate_mode {self.candidate_mode!r}")

    @property
    def alignment_variants(self) -> tuple[bool, ...]:
        return {"both": (False, True), "on": (True,), "off": (False,)}[self.alignment]


@dataclass
class ReportRow:
    objective: str
    q: float
    alignment: bool
    seed: int
    final_test_acc: float
    zero_shot_acc: float
    supervised_topline: float
    run_id: str
    curve: list[MetricsRecord] = field(default_factory=list)
    error: str | None = None


# ------------------------------------------------------------------ config


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path, tp())
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        elem = args[0] if args and (len(args) == 2 and args[1] is Ellipsis or len(set(args)) == 1) else None
        items = [_coerce(v, elem, f"{path}[{i}]") if elem else v for i, v in enumerate(value)]
        if args and args[-1] is not Ellipsis and len(items) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(items)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data: dict, path: str, base):
    hints = typing.get_type_hints(cls)
    aliases = _ALIASES.get(cls, {})
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        sub = f"{path}.{key}" if path else key
        if name not in names:
            raise ConfigError(f"{sub}: unknown key")
        if dataclasses.is_dataclass(hints[name]):
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected an object")
            updates[name] = _build(hints[name], value, sub, getattr(base, name))
        else:
            updates[name] = _coerce(value, hints[name], sub)
    try:
        return replace(base, **updates)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc.message}" if path else exc.message) from None


def _load_doc(source) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from None
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def set_dotted(doc: dict, dotted: str, value) -> dict:
    """Set ``a.b.c`` inside a nested dict, creating levels as needed."""
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: cannot descend into a non-object")
    node[parts[-1]] = value
    return doc


def parse_config(source="{}", kind: str = "train", overrides: dict | None = None, env=None):
    """Parse a JSON document (path, inline text or dict) into TrainConfig or SweepSpec.

    Omitted fields keep their defaults. ``overrides`` maps dotted paths to values.
    ``PALIGN_SEED`` in ``env`` replaces the seed (train) or shifts the seed list (sweep).
    """
    doc = json.loads(json.dumps(_load_doc(source)))
    for dotted, value in (overrides or {}).items():
        set_dotted(doc, dotted, value)
    env = os.environ if env is None else env
    if kind == "train":
        cfg = _build(TrainConfig, doc, "", TrainConfig())
        if env.get(SEED_ENV):
            cfg = replace(cfg, seed=_env_seed(env))
        return cfg
    if kind == "sweep":
        if "world" in doc:
            base = doc.setdefault("base", {})
            base.setdefault("world", {}).update(doc.pop("world"))
        spec = _build(SweepSpec, doc, "", SweepSpec())
        if env.get(SEED_ENV):
            start = _env_seed(env)
            spec = replace(spec, seeds=tuple(start + i for i in range(len(spec.seeds))))
        return spec
    raise ConfigError(f"unknown config kind {kind!r}")


def _env_seed(env) -> int:
    try:
        return int(env[SEED_ENV])
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer") from None


# ------------------------------------------------------------------- sweep


def _fmt_q(q: float) -> str:
    return repr(float(q))


def run_id(objective: str, q: float, alignment: bool, seed: int) -> str:
    return f"{objective}_q{_fmt_q(q)}_{'on' if alignment else 'off'}_s{seed}"


@dataclass(frozen=True)
class _Job:
    kind: str  # "train" | "zeroshot"
    cfg: TrainConfig


def _execute(job: _Job) -> ReportRow:
    cfg = job.cfg
    label = "zeroshot" if job.kind == "zeroshot" else ("supervised" if job.kind == "topline" else cfg.objective)
    rid = run_id(label, cfg.q, cfg.use_alignment, cfg.seed)
    nan = float("nan")
    try:
        if job.kind == "zeroshot":
            world, data, _ = build_problem(cfg)
            acc = zero_shot_accuracy(world, data.test_x, data.test_y)
            return ReportRow(label, cfg.q, False, cfg.seed, acc, acc, nan, rid)
        records = run_training(cfg).records
        last = records[-1]
        return ReportRow(label, cfg.q, cfg.use_alignment, cfg.seed, last.test_acc, last.zero_shot_acc, nan, rid, records)
    except PalignError as exc:
        return ReportRow(label, cfg.q, cfg.use_alignment, cfg.seed, nan, nan, nan, rid, error=str(exc))


def sweep_jobs(spec: SweepSpec) -> list[_Job]:
    base = replace(spec.base, candidate_mode=spec.candidate_mode)
    jobs = []
    for seed in spec.seeds:
        for q in spec.q_values:
            for objective in spec.objectives:
                for align in spec.alignment_variants:
                    jobs.append(_Job("train", replace(base, objective=objective, q=q, use_alignment=align, seed=seed)))
        jobs.append(_Job("topline", replace(base, objective="ce", q=0.0, use_alignment=False, seed=seed)))
        jobs.append(_Job("zeroshot", replace(base, objective="ce", q=0.0, use_alignment=False, seed=seed)))
    return jobs


def run_sweep(spec: SweepSpec, parallelism: int = 1) -> list[ReportRow]:
    """Run every (q, objective, alignment, seed) cell plus per-seed topline and zero-shot rows.

    Vanilla and aligned runs of a cell share the seed, hence the same world,
    dataset, candidate sets and prompt initialization.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    jobs = sweep_jobs(spec)
    if parallelism == 1:
        rows = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(_execute, jobs))
    topline = {r.seed: r.final_test_acc for r in rows if r.objective == "supervised"}
    for r in rows:
        r.supervised_topline = topline.get(r.seed, float("nan"))
    return rows


def summarize(rows: list[ReportRow]) -> dict:
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        if r.error is None:
            cells.setdefault((r.objective, r.q, r.alignment), []).append(r.final_test_acc)
    out = []
    for (objective, q, align), accs in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        n = len(accs)
        mean = math.fsum(accs) / n
        std = float(np.std(accs, ddof=1)) if n > 1 else 0.0
        out.append({"objective": objective, "q": q, "alignment": "on" if align else "off",
                    "n": n, "mean": mean, "std": std})
    failures = [{"run_id": r.run_id, "error": r.error} for r in rows if r.error is not None]
    return {"cells": out, "failures": failures}


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "on" if x else "off"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def results_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for r in rows:
        writer.writerow([_fmt(getattr(r, k)) for k in RESULTS_HEADER])
    return buf.getvalue()


def curve_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, k)) for k in CURVE_HEADER])
    return buf.getvalue()


def write_report(rows: list[ReportRow], out_dir) -> list[Path]:
    if not rows:
        raise ReportIOError("nothing to write")
    out = Path(out_dir)
    try:
        (out / "curves").mkdir(parents=True, exist_ok=True)
        written = [out / "results.csv", out / "summary.json"]
        written[0].write_text(results_csv(rows))
        written[1].write_text(json.dumps(summarize(rows), indent=2, sort_keys=True) + "\n")
        for r in rows:
            if r.curve:
                path = out / "curves" / f"{r.run_id}.csv"
                path.write_text(curve_csv(r.curve))
                written.append(path)
    except OSError as exc:
        raise ReportIOError(str(exc)) from None
    return written
