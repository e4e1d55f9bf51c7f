"""Command-line runner: ``isacsim kpi|budget|simulate|sync-eval --config FILE``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import budget as bud
from . import channel as ch
from . import config as cfgmod
from . import radar
from .scenario import (
    Scenario,
    aggregate,
    ambiguity_cfo_hz,
    run_once,
    sync_trial,
)
from .sync import SyncError

log = logging.getLogger("isacsim")

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED, EXIT_CHECK = 0, 2, 3, 4


def _atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def run_checks(values: dict, checks: dict) -> list[str]:
    """Compare produced values with the file's [check] table; returns failure messages."""
    fails = []
    for key, spec in checks.items():
        if key not in values or values[key] is None:
            fails.append(f"{key}: not produced by this command")
            continue
        v = values[key]
        if "value" in spec:
            tol = spec.get("tol", abs(spec["value"]) * spec.get("rel_tol", 0.0))
            if abs(v - spec["value"]) > tol:
                fails.append(f"{key}: {v:.6g} outside {spec['value']:.6g} +- {tol:.3g}")
        if "min" in spec and v < spec["min"]:
            fails.append(f"{key}: {v:.6g} < {spec['min']:.6g}")
        if "max" in spec and v > spec["max"]:
            fails.append(f"{key}: {v:.6g} > {spec['max']:.6g}")
    return fails


def cmd_kpi(sf: cfgmod.ScenarioFile, out: Path) -> dict:
    k = bud.kpi_table(sf.system).to_dict()
    _atomic_write(out / "kpi.json", _dumps(k))
    for name, v in k.items():
        print(f"{name:16s} {v:.6g}")
    return k


def _budget_curve(sf: cfgmod.ScenarioFile) -> bud.BudgetCurve:
    bp = sf.budget_plot
    if bp is None:
        raise cfgmod.ConfigError("required table is missing", "budget")
    k = bud.kpi_table(sf.system)
    r0 = bp["r0_m"]
    if r0 is None:
        r0 = sf.scenario.reference.bistatic_range_m if sf.scenario is not None else 300.0
    rho = np.logspace(np.log10(bp["rho_min_m"]), np.log10(bp["rho_max_m"]), bp["n_points"])
    return bud.budget_curve(
        sf.budget,
        bp["rcs_m2"],
        k.gp_db,
        rho,
        sf.system.fc_hz,
        sf.system.bandwidth_hz,
        r0,
        bp["mean_sir_db"],
        bp["min_sir_db"],
        bp["pplr_db"],
    )


def cmd_budget(sf: cfgmod.ScenarioFile, out: Path) -> dict:
    curve = _budget_curve(sf)
    pts = bud.solve_rho_intersections(curve, sf.budget.sinr_min_db)
    _atomic_write(out / "budget.json", bud.budget_report(curve, pts) + "\n")
    buf = io.StringIO()
    tmp = out / ".budget_curve.csv.tmp"
    out.mkdir(parents=True, exist_ok=True)
    curve.to_csv(tmp)
    os.replace(tmp, out / "budget_curve.csv")
    values = {
        "reference_peak_dbm": curve.reference_peak_dbm,
        "awgn_dbm": curve.awgn_dbm,
        "mean_interf_dbm": curve.mean_interf_dbm,
        "artifact_dbm": curve.artifact_dbm,
    }
    print(f"reference peak {curve.reference_peak_dbm:.2f} dBm, AWGN {curve.awgn_dbm:.2f} dBm, "
          f"mean interference {curve.mean_interf_dbm:.2f} dBm, artifacts {curve.artifact_dbm:.2f} dBm")
    for p in pts:
        values[f"rho_{p.rcs_class}_{p.i_mode}_m"] = p.rho_m
        print(f"{p.rcs_class:12s} {p.i_mode:18s} rho_max = {p.rho_m / 1e3:8.3f} km", file=buf)
    print(buf.getvalue(), end="")
    return values


def _write_run(out: Path, r, outputs: dict) -> None:
    rd = out / "runs"
    _atomic_write(rd / f"run_{r.run:04d}.json", _dumps(r.record()))
    if not r.ok:
        return
    if outputs.get("periodogram") and r.periodogram is not None:
        tmp = rd / f".run_{r.run:04d}.bin.tmp"
        radar.write_periodogram(r.periodogram, tmp)
        os.replace(tmp, rd / f"run_{r.run:04d}.bin")
        os.replace(Path(str(tmp) + ".json"), rd / f"run_{r.run:04d}.bin.json")
    if outputs.get("peaks"):
        with open(rd / f".run_{r.run:04d}_peaks.csv.tmp", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["range_m", "doppler_hz", "power_w", "range_bin", "doppler_bin"])
            for q in r.peaks:
                w.writerow([q["range_m"], q["doppler_hz"], q["power"], q["range_bin"], q["doppler_bin"]])
        os.replace(rd / f".run_{r.run:04d}_peaks.csv.tmp", rd / f"run_{r.run:04d}_peaks.csv")


def _worker(args):
    scn, run, keep = args
    return run_once(scn, run, keep)


def cmd_simulate(sf: cfgmod.ScenarioFile, out: Path, jobs: int = 1) -> tuple[dict, int]:
    scn = sf.scenario
    if scn is None:
        raise cfgmod.ConfigError("simulate needs [[paths]] with one reference path", "paths")
    keep = bool(sf.outputs.get("periodogram"))
    tasks = [(scn, r, keep) for r in range(scn.runs)]
    results = []
    if jobs > 1 and scn.runs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, scn.runs)) as pool:
            for r in pool.map(_worker, tasks):
                _write_run(out, r, sf.outputs)
                results.append(r)
    else:
        for t in tasks:
            r = _worker(t)
            _write_run(out, r, sf.outputs)
            results.append(r)
    agg = aggregate(results)
    if sf.adc_fs_hz is not None:
        corr = 10 * np.log10(sf.adc_fs_hz / scn.system.bandwidth_hz)
        agg["adc_oversampling_correction_db"] = float(corr)
        if "mean_sir_db" in agg:
            agg["mean_sir_oversampled_db"] = {k: v + corr for k, v in agg["mean_sir_db"].items()}
    report = {
        "scenario": scn.name,
        "seed": scn.seed,
        "aggregate": agg,
        "runs": [r.record() for r in results],
    }
    _atomic_write(out / "metrics.json", _dumps(report))
    for r in results:
        if r.ok:
            m = r.metrics
            pplr = "n/a" if m["pplr_db"] is None else f"{m['pplr_db']:.3f}"
            print(f"run {r.run:4d}: PPLR {pplr} dB, mean SIR {m['mean_sir_db']:.2f} dB, min SIR {m['min_sir_db']:.2f} dB")
        else:
            print(f"run {r.run:4d}: FAILED {r.error}")
    values = {}
    for key in ("pplr_db", "mean_sir_db", "min_sir_db", "mean_sir_oversampled_db"):
        if key in agg:
            values[key] = agg[key]["mean"]
    if "min_sir_db" in agg:
        values["worst_min_sir_db"] = agg["min_sir_db"]["min"]
    code = EXIT_OK if agg["succeeded"] else EXIT_ALL_FAILED
    return values, code


def _sync_worker(args):
    scn, run, window = args
    try:
        return sync_trial(scn, run, window)
    except (SyncError, ValueError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


QUANTITIES = (
    ("coarse", "coarse_sto_samples", "samples"),
    ("coarse", "coarse_cfo_hz", "Hz"),
    ("sample", "sample_sto_samples", "samples"),
    ("sfo", "sfo_ppm", "ppm"),
    ("fine", "final_range_bins", "bins"),
    ("fine", "final_doppler_bins", "bins"),
)


def cmd_sync_eval(sf: cfgmod.ScenarioFile, out: Path, jobs: int = 1) -> tuple[dict, int]:
    base = sf.scenario
    se = sf.sync_eval
    if base is None:
        raise cfgmod.ConfigError("sync-eval needs [[paths]] with one reference path", "paths")
    if se is None:
        raise cfgmod.ConfigError("required table is missing", "sync_eval")
    window = radar.WindowSpec(se["window"])
    bound = ambiguity_cfo_hz(base.system)
    hw = replace(base.impairments, snr_db=se["snr_db"])
    proc = replace(base.processing, sync="pipeline")
    rows, records, n_ok = [], [], 0
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for sto in se["sto_samples"]:
            for cfo in se["cfo_hz"]:
                for sfo in se["sfo_ppm"]:
                    try:
                        off = ch.SyncOffsets(sto / base.system.sample_rate_hz, cfo, sfo * 1e-6)
                    except ValueError as exc:
                        raise cfgmod.ConfigError(str(exc), "sync_eval") from exc
                    scn: Scenario = replace(base, offsets=off, impairments=hw, processing=proc)
                    tasks = [(scn, r, window) for r in range(scn.runs)]
                    res = list(pool.map(_sync_worker, tasks)) if pool else [_sync_worker(t) for t in tasks]
                    ok = [r for r in res if "error" not in r]
                    n_ok += len(ok)
                    flag = "beyond_ambiguity" if abs(cfo) >= bound else ("near_ambiguity" if abs(cfo) >= 0.9 * bound else "")
                    for run, r in enumerate(res):
                        records.append({"sto_samples": sto, "cfo_hz": cfo, "sfo_ppm": sfo, "run": run, **r})
                    for stage, q, unit in QUANTITIES:
                        v = np.array([r[q] for r in ok])
                        rows.append(
                            {
                                "sto_samples": sto,
                                "cfo_hz": cfo,
                                "sfo_ppm": sfo,
                                "stage": stage,
                                "quantity": q,
                                "unit": unit,
                                "bias": float(v.mean()) if len(v) else float("nan"),
                                "std": float(v.std()) if len(v) else float("nan"),
                                "p90_abs": float(np.percentile(np.abs(v), 90)) if len(v) else float("nan"),
                                "n_ok": len(ok),
                                "n_failed": len(res) - len(ok),
                                "flag": flag,
                            }
                        )
    finally:
        if pool:
            pool.shutdown()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    _atomic_write(out / "sync_eval.csv", buf.getvalue())
    _atomic_write(out / "sync_eval.json", _dumps({"cfo_ambiguity_hz": bound, "rows": rows, "runs": records}))
    print(buf.getvalue(), end="")
    values = {}
    for q in ("final_range_bins", "final_doppler_bins", "sfo_ppm", "coarse_cfo_hz", "sample_sto_samples"):
        vals = [r["p90_abs"] for r in rows if r["quantity"] == q and r["n_ok"]]
        if vals:
            values[f"max_p90_abs_{q}"] = max(vals)
        bias = [abs(r["bias"]) for r in rows if r["quantity"] == q and r["n_ok"]]
        if bias:
            values[f"max_abs_bias_{q}"] = max(bias)
    return values, (EXIT_OK if n_ok else EXIT_ALL_FAILED)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isacsim", description="Bistatic OFDM ISAC simulator")
    p.add_argument("command", choices=["kpi", "budget", "simulate", "sync-eval"])
    p.add_argument("--config", required=True, type=Path, help="scenario TOML file")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=None, help="override monte_carlo.seed (u64)")
    p.add_argument("--jobs", type=int, default=1, help="parallel Monte-Carlo workers")
    p.add_argument("--check", action="store_true", help="compare results with the file's [check] table")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise cfgmod.ConfigError("seed must be an unsigned 64-bit integer", "--seed")
        if args.jobs < 1:
            raise cfgmod.ConfigError("must be >= 1", "--jobs")
        sf = cfgmod.load(args.config)
        if args.seed is not None and sf.scenario is not None:
            sf.scenario = sf.scenario.with_seed(args.seed)
        code = EXIT_OK
        if args.command == "kpi":
            values = cmd_kpi(sf, args.out)
        elif args.command == "budget":
            values = cmd_budget(sf, args.out)
        elif args.command == "simulate":
            values, code = cmd_simulate(sf, args.out, args.jobs)
        else:
            values, code = cmd_sync_eval(sf, args.out, args.jobs)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_ALL_FAILED:
        print("all runs failed", file=sys.stderr)
        return code
    if args.check:
        if not sf.check:
            print("check: the config has no [check] table", file=sys.stderr)
            return EXIT_CHECK
        fails = run_checks(values, sf.check)
        for f in fails:
            print(f"CHECK FAIL {f}", file=sys.stderr)
        if fails:
            return EXIT_CHECK
        print(f"check: {len(sf.check)} value(s) within tolerance")
    return code


if __name__ == "__main__":
    sys.exit(main())
