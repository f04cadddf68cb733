"""Command-line front end: ``gvpolab run|sweep|verify|compare``.

Exit status: 0 on success, 1 when a verification check fails, 2 on a config
error, 3 when a training run aborts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import verify
from .config import ExperimentConfig, cell_name, format_value, load_config, output_dir, parse_config, sweep_cells
from .oracle import SupportViolation
from .trainer import CSV_COLUMNS, ConfigError, train

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
FINAL_COLUMNS = ("steps_completed", "loss", "grad_norm", "mean_reward", "kl_to_optimal", "kl_to_aux", "objective")
KL_TARGET = 1e-3

log = logging.getLogger("gvpolab")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, default=_json_default, allow_nan=True)
        f.write("\n")


# ---------------------------------------------------------------- run

def execute_run(cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    """Train once, streaming ``metrics.csv`` and writing ``summary.json`` into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    csv_file = open(out / "metrics.csv", "w", newline="") if cfg.emit_csv else None
    first_hit = None
    try:
        writer = None
        if csv_file is not None:
            writer = csv.writer(csv_file, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)

        def on_row(row):
            nonlocal first_hit
            if first_hit is None and row["kl_to_optimal"] < KL_TARGET:
                first_hit = row["step"]
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
                csv_file.flush()

        _, report = train(cfg.task, cfg.init, cfg.train, reference=cfg.reference, on_row=on_row)
    finally:
        if csv_file is not None:
            csv_file.close()
    summary = dict(report.summary)
    summary["final_metrics"] = dict(summary["final_metrics"])
    summary["final_metrics"]["steps_completed"] = summary["steps_completed"]
    summary["steps_to_kl_1e-3"] = first_hit
    summary["config"] = cfg.resolved()
    if cfg.emit_json:
        _write_json(out / "summary.json", summary)
    return summary


def _echo_final(summary: dict[str, Any], prefix: str = "") -> None:
    final = summary["final_metrics"]
    parts = [f"{k}={final[k]:.6g}" for k in ("mean_reward", "kl_to_optimal", "kl_to_aux", "objective") if k in final]
    status = f"ABORTED ({summary['abort_reason']})" if summary["aborted"] else "ok"
    print(f"{prefix}{status} steps={summary['steps_completed']} " + " ".join(parts))


def cmd_run(args) -> int:
    cfg = _load(args)
    out = output_dir(cfg, args.output, args.config, "run")
    summary = execute_run(cfg, out)
    _echo_final(summary)
    print(f"wrote {out}")
    return EXIT_ABORT if summary["aborted"] else EXIT_OK


# ---------------------------------------------------------------- sweep

def _run_cell(doc: dict, out: str) -> dict[str, Any]:
    try:
        cfg = parse_config(doc)
    except ConfigError as exc:
        return {"aborted": True, "abort_reason": f"config error: {exc}", "config_error": True, "final_metrics": {}}
    summary = execute_run(cfg, Path(out))
    return {k: summary[k] for k in ("aborted", "abort_reason", "final_metrics", "steps_to_kl_1e-3")}


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if not cfg.sweep:
        raise ConfigError("sweep", "no sweep axes defined")
    out = output_dir(cfg, args.output, args.config, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(cfg)
    names = [cell_name(values) for values, _ in cells]
    dirs = [str(out / n) for n in names]
    parallel = args.parallel or int(cfg.raw.get("parallel", 1))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_cell, [doc for _, doc in cells], dirs))
    else:
        results = []
        for (_, doc), d, n in zip(cells, dirs, names):
            results.append(_run_cell(doc, d))
            res = results[-1]
            _echo_final({**res, "steps_completed": res["final_metrics"].get("steps_completed", 0)}, prefix=f"[{n}] ")
    axis_cols = list(cells[0][0])
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["cell"] + axis_cols + ["aborted", "abort_reason"] + list(FINAL_COLUMNS) + ["steps_to_kl_1e-3"])
        for (values, _), n, res in zip(cells, names, results):
            final = res["final_metrics"]
            w.writerow([n] + [format_value(values[a]) for a in axis_cols]
                       + [str(res["aborted"]).lower(), res["abort_reason"] or ""]
                       + [_fmt(final.get(c)) for c in FINAL_COLUMNS]
                       + [_fmt(res.get("steps_to_kl_1e-3")) or "n/a"])
    print(f"wrote {out / 'sweep.csv'} ({len(cells)} cells)")
    if any(r.get("config_error") for r in results):
        return EXIT_CONFIG
    return EXIT_ABORT if any(r["aborted"] for r in results) else EXIT_OK


# ---------------------------------------------------------------- compare

def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def compare_schemes(cfg: ExperimentConfig, out: Path) -> list[dict[str, Any]]:
    """Train every scheme in ``cfg.schemes`` on the same task, reference and seeds."""
    seeds = cfg.seeds or [cfg.train.seed]
    rows = []
    for scheme in cfg.schemes:
        per_seed = []
        for seed in seeds:
            tcfg = replace(cfg.train, scheme=scheme, seed=seed)
            sub = out / (f"scheme={scheme}" if len(seeds) == 1 else f"scheme={scheme}_seed={seed}")
            per_seed.append(execute_run(replace(cfg, train=tcfg), sub))
        ok = [s for s in per_seed if not s["aborted"]]
        row = {"scheme": scheme, "seeds": len(seeds), "aborted": len(per_seed) - len(ok)}
        for key in ("mean_reward", "kl_to_optimal", "objective"):
            vals = [s["final_metrics"][key] for s in ok]
            row[key], row[f"{key}_se"] = _mean_se(vals) if vals else (math.nan, math.nan)
        hits = [s["steps_to_kl_1e-3"] for s in ok]
        row["steps_to_kl_1e-3"] = max(hits) if hits and all(h is not None for h in hits) else "n/a"
        rows.append(row)
    return rows


def rank(rows: list[dict[str, Any]]) -> list[dict[str, Any]]:
    # closest to pi* first, then highest objective
    return sorted(rows, key=lambda r: (math.inf if math.isnan(r["kl_to_optimal"]) else r["kl_to_optimal"],
                                       -r["objective"]))


COMPARE_COLUMNS = ("scheme", "mean_reward", "kl_to_optimal", "steps_to_kl_1e-3", "objective",
                   "mean_reward_se", "kl_to_optimal_se", "objective_se", "seeds", "aborted")


def cmd_compare(args) -> int:
    cfg = _load(args)
    if len(cfg.schemes) < 2:
        raise ConfigError("compare.schemes", "a comparison needs at least two schemes")
    out = output_dir(cfg, args.output, args.config, "compare")
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_schemes(cfg, out)
    with open(out / "compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COMPARE_COLUMNS])
    ranked = rank(rows)
    _write_json(out / "compare.json", {"config": cfg.resolved(), "rows": rows,
                                       "ranking": [r["scheme"] for r in ranked]})
    for i, r in enumerate(ranked, 1):
        print(f"{i}. {r['scheme']:<5} kl_to_optimal={r['kl_to_optimal']:.4g} "
              f"mean_reward={r['mean_reward']:.4g} objective={r['objective']:.4g}")
    print(f"wrote {out / 'compare.csv'}")
    return EXIT_ABORT if any(r["aborted"] for r in rows) else EXIT_OK


# ---------------------------------------------------------------- verify

def _thresholds(doc: dict | None) -> verify.Thresholds:
    doc = doc or {}
    known = {f.name for f in fields(verify.Thresholds)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"thresholds.{key}", "unknown threshold")
    return verify.Thresholds(**{k: float(v) for k, v in doc.items()})


def cmd_verify(args) -> int:
    doc = {}
    if args.config:
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", str(exc)) from exc
    thresholds = _thresholds(doc.get("thresholds"))
    results = verify.run_checks(args.selector, seed=args.seed or 0, thresholds=thresholds,
                                parallel=args.parallel or 1)
    payload = verify.results_json(results)
    if args.json:
        print(payload)
        print(verify.format_table(results), file=sys.stderr)
    else:
        print(verify.format_table(results))
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(payload + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


# ---------------------------------------------------------------- entry point

def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config", "required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gvpolab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--parallel", type=int, default=None, help="worker processes")

    common(sub.add_parser("run", help="train once"))
    common(sub.add_parser("sweep", help="Cartesian grid over config paths"))
    common(sub.add_parser("compare", help="train several schemes on one task"))
    pv = sub.add_parser("verify", help="run the verification checks")
    pv.add_argument("selector", nargs="?", default="all", choices=verify.SELECTORS)
    pv.add_argument("--json", action="store_true", help="print the JSON results on stdout")
    common(pv, config_required=False)
    return ap


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "verify": cmd_verify}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SupportViolation as exc:
        print(f"config error: sampler: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
