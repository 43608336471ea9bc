"""Batch experiment runner and analysis commands.

``cavsim run`` expands a scenario matrix (strategy x MPR x seed), executes
the runs in parallel, and writes per-cell outputs plus the comparison and
K-S tables. ``cavsim compare`` diffs two matrix directories;
``cavsim analyze`` runs the trajectory analytics on an external CSV.

Exit codes: 0 success, 1 config/compare error, 2 run halt (gap violation).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import multiprocessing
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analytics, engine
from .core import (ScenarioConfig, Strategy, config_from_doc,
                   load_config_doc, validate_config)

_STATE_KEYS = ("FREE", "CLOSE_UP", "FOLLOW", "BRAKE_BX", "BRAKE_AX", "OTHER")

_COMPARISON_HEADER = (
    "strategy,mpr,seed,entered,exited,q_kmh,throughput_vph,vmt_km,vht_h,"
    "hard_brake_hv_hv,hard_brake_hv_cav,ttc_hv_hv,ttc_hv_cav,"
    "lane_changes_total,lane_changes_per_hv,"
    + ",".join(f"frac_{k.lower()}" for k in _STATE_KEYS))


def cell_name(strategy: Strategy, mpr: float, seed: int) -> str:
    return f"{strategy.value}_mpr{int(round(mpr * 100)):03d}_seed{seed}"


def expand_cells(cfg: ScenarioConfig, strategies, mprs) -> list[tuple]:
    """(strategy, mpr, seed) cells; BASE collapses to a single mpr=0 cell
    per seed."""
    cells = []
    for strat in strategies:
        if strat == Strategy.BASE:
            for seed in cfg.seeds:
                cells.append((strat, 0.0, seed))
        else:
            for mpr in mprs:
                for seed in cfg.seeds:
                    cells.append((strat, mpr, seed))
    return cells


def run_cell(cfg: ScenarioConfig, strategy: Strategy, mpr: float,
             seed: int) -> engine.RunResult:
    cell_cfg = replace(cfg, strategy=strategy, mpr=mpr)
    return engine.run_scenario(cell_cfg, seed)


def _run_cell_to_dir(args) -> dict:
    cfg, strategy, mpr, seed, out_dir = args
    name = cell_name(strategy, mpr, seed)
    cell_dir = Path(out_dir) / name
    cell_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run_cell(cfg, strategy, mpr, seed)
    except engine.GapViolationError as exc:
        return {"cell": name, "halt": str(exc)}

    csv_bytes = result.frame.to_csv_bytes()
    (cell_dir / "trajectories.csv").write_bytes(csv_bytes)
    engine.write_events_csv(result.events, cell_dir / "events.csv")
    with open(cell_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(result.summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report = analytics.compute_metrics(result.frame, result.summary)
    report.to_json(cell_dir / "metrics.json")
    report.hard_brake_events.to_csv(cell_dir / "hard_brake_events.csv",
                                    "accel_ms2")
    report.ttc_samples.to_csv(cell_dir / "ttc_samples.csv", "ttc_s")

    import hashlib
    row = {
        "cell": name,
        "dir": name,
        "strategy": strategy.value,
        "mpr": mpr,
        "seed": seed,
        "trajectory_sha256": hashlib.sha256(csv_bytes).hexdigest(),
        "summary": result.summary.to_dict(),
        "metrics": report.to_dict(),
        "hard_brake_hv_cav_samples":
            report.hard_brake_events.values_for(
                analytics.InteractionTag.HV_CAV).tolist(),
    }
    return row


def _write_comparison_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_COMPARISON_HEADER + "\n")
        for r in rows:
            s, m = r["summary"], r["metrics"]
            q = "" if s["q_kmh"] is None else f"{s['q_kmh']:.4f}"
            fracs = ",".join(f"{m['state_composition'][k]:.6f}"
                             for k in _STATE_KEYS)
            fh.write(
                f"{r['strategy']},{r['mpr']},{r['seed']},{s['entered']},"
                f"{s['exited']},{q},{s['throughput_vph']:.4f},"
                f"{s['vmt_km']:.4f},{s['vht_h']:.6f},"
                f"{m['hard_braking']['hv_hv']},{m['hard_braking']['hv_cav']},"
                f"{m['ttc']['hv_hv']},{m['ttc']['hv_cav']},"
                f"{m['lane_changes']['total']},"
                f"{m['lane_changes']['per_hv_mean']:.4f},{fracs}\n")


def _ks_label(strategy: str, mpr: float) -> str:
    prefix = "A" if strategy == Strategy.AD_HOC.value else "C"
    return f"{prefix}-{int(round(mpr * 100))}%"


def _write_ks_matrix(path: Path, rows: list[dict]) -> None:
    """Pairwise K-S rejections over pooled HV-CAV hard-braking samples per
    (strategy, mpr) group."""
    groups: dict[str, list] = {}
    for r in rows:
        if r["strategy"] == Strategy.BASE.value:
            continue
        label = _ks_label(r["strategy"], r["mpr"])
        groups.setdefault(label, []).extend(r["hard_brake_hv_cav_samples"])

    def sort_key(label):
        return (label[0], int(label[2:-1]))

    labels = sorted((l for l, v in groups.items() if len(v) > 0),
                    key=sort_key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("," + ",".join(labels) + "\n")
        for a in labels:
            cells = []
            for b in labels:
                if a == b:
                    cells.append("-")
                else:
                    res = analytics.ks_two_sample(groups[a], groups[b])
                    cells.append(str(int(res.reject)))
            fh.write(a + "," + ",".join(cells) + "\n")


def run_matrix(config_path, out_dir, jobs: int | None = None,
               dry_run: bool = False) -> int:
    try:
        doc = load_config_doc(config_path)
        cfg = config_from_doc(doc)
    except Exception as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    violations = validate_config(cfg)
    if violations:
        for v in violations:
            print(f"config error: {v}", file=sys.stderr)
        return 1

    matrix = doc.get("matrix", {})
    strategies = [Strategy(s) for s in matrix.get(
        "strategies", [cfg.strategy.value])]
    mprs = [float(m) for m in matrix.get("mprs", [cfg.mpr])]
    cells = expand_cells(cfg, strategies, mprs)

    if dry_run:
        for strat, mpr, seed in cells:
            print(cell_name(strat, mpr, seed))
        print(f"{len(cells)} runs")
        return 0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or multiprocessing.cpu_count()

    tasks = [(cfg, strat, mpr, seed, str(out)) for strat, mpr, seed in cells]
    rows: list[dict] = []
    if jobs > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=jobs, mp_context=ctx) as pool:
            rows = list(pool.map(_run_cell_to_dir, tasks))
    else:
        rows = [_run_cell_to_dir(t) for t in tasks]

    halted = [r for r in rows if "halt" in r]
    if halted:
        for r in halted:
            print(f"run halted: {r['cell']}: {r['halt']}", file=sys.stderr)
        return 2

    _write_comparison_csv(out / "comparison.csv", rows)
    _write_ks_matrix(out / "ks_matrix.csv", rows)
    manifest = {
        "config": doc,
        "cells": [{k: r[k] for k in ("dir", "strategy", "mpr", "seed",
                                     "trajectory_sha256", "summary")}
                  for r in rows],
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _load_manifest(d: Path) -> dict:
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cell_metrics(d: Path, cell: dict) -> dict:
    path = d / cell["dir"] / "metrics.json"
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cell_hard_brake_samples(d: Path, cell: dict) -> list[float]:
    path = d / cell["dir"] / "hard_brake_events.csv"
    if not path.exists():
        raise FileNotFoundError(str(path))
    vals = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            t, v, x, tag = line.rstrip("\n").split(",")
            if tag == "HV_CAV":
                vals.append(float(x))
    return vals


def compare(dir_a, dir_b, out_path) -> int:
    a, b = Path(dir_a), Path(dir_b)
    try:
        ma, mb = _load_manifest(a), _load_manifest(b)

        def index(man):
            idx: dict[tuple, list[dict]] = {}
            for c in man["cells"]:
                idx.setdefault((c["mpr"], c["seed"]), []).append(c)
            return idx

        ia, ib = index(ma), index(mb)
        keys = sorted(set(ia) & set(ib))
        if not keys:
            print("no overlapping (mpr, seed) cells", file=sys.stderr)
            return 1

        pairs = []
        for key in keys:
            for ca in ia[key]:
                match = [cb for cb in ib[key]
                         if cb["strategy"] == ca["strategy"]]
                if not match:
                    match = [cb for cb in ib[key]
                             if cb["strategy"] != ca["strategy"]]
                for cb in match:
                    met_a = _cell_metrics(a, ca)
                    met_b = _cell_metrics(b, cb)
                    sa, sb = ca["summary"], cb["summary"]
                    pairs.append({
                        "mpr": key[0],
                        "seed": key[1],
                        "strategy_a": ca["strategy"],
                        "strategy_b": cb["strategy"],
                        "delta_q_kmh": _delta(sa["q_kmh"], sb["q_kmh"]),
                        "delta_throughput_vph": _delta(
                            sa["throughput_vph"], sb["throughput_vph"]),
                        "delta_lane_changes_per_hv": _delta(
                            met_a["lane_changes"]["per_hv_mean"],
                            met_b["lane_changes"]["per_hv_mean"]),
                    })

        ks_rows = []
        for mpr in sorted({k[0] for k in keys}):
            xa, xb = [], []
            for key in keys:
                if key[0] != mpr:
                    continue
                for c in ia[key]:
                    xa.extend(_cell_hard_brake_samples(a, c))
                for c in ib[key]:
                    xb.extend(_cell_hard_brake_samples(b, c))
            if xa and xb:
                res = analytics.ks_two_sample(xa, xb)
                ks_rows.append({"mpr": mpr, "d": res.d,
                                "reject": bool(res.reject),
                                "n_a": len(xa), "n_b": len(xb)})
            else:
                ks_rows.append({"mpr": mpr, "d": None, "reject": None,
                                "n_a": len(xa), "n_b": len(xb)})
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1

    report = {"pairs": pairs, "hard_brake_ks_by_mpr": ks_rows}
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _delta(x, y):
    if x is None or y is None:
        return None
    return y - x


def analyze(trajectory_csv, out_dir) -> int:
    try:
        frame = engine.TrajectoryFrame.from_csv(trajectory_csv)
    except Exception as exc:
        print(f"cannot read trajectory CSV: {exc}", file=sys.stderr)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = analytics.compute_metrics(frame)
    report.to_json(out / "metrics.json")
    report.hard_brake_events.to_csv(out / "hard_brake_events.csv",
                                    "accel_ms2")
    report.ttc_samples.to_csv(out / "ttc_samples.csv", "ttc_s")
    hb, ttc = report.hard_brake_events, report.ttc_samples
    analytics.write_ecdf_csv(out / "ecdf_hard_brake.csv", {
        "HV_HV": hb.values_for(analytics.InteractionTag.HV_HV),
        "HV_CAV": hb.values_for(analytics.InteractionTag.HV_CAV),
    })
    analytics.write_ecdf_csv(out / "ecdf_ttc.csv", {
        "HV_HV": ttc.values_for(analytics.InteractionTag.HV_HV),
        "HV_CAV": ttc.values_for(analytics.InteractionTag.HV_CAV),
    })
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cavsim",
        description="Mixed HV/CAV freeway microsimulation batch runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="expand and execute a scenario matrix")
    p_run.add_argument("config", help="scenario TOML")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--jobs", type=int, default=None,
                       help="parallel runs (default: CPU count)")
    p_run.add_argument("--dry-run", action="store_true",
                       help="print the expanded matrix and exit")

    p_cmp = sub.add_parser("compare", help="diff two matrix directories")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--out", required=True, help="report JSON path")

    p_an = sub.add_parser("analyze",
                          help="trajectory analytics on an external CSV")
    p_an.add_argument("trajectory", help="trajectory CSV")
    p_an.add_argument("--out", required=True, help="output directory")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_matrix(args.config, args.out, args.jobs, args.dry_run)
    if args.command == "compare":
        return compare(args.dir_a, args.dir_b, args.out)
    if args.command == "analyze":
        return analyze(args.trajectory, args.out)
    return 1


if __name__ == "__main__":
    sys.exit(main())
