"""Command line entry point.

    galerkin-ldp run CONFIG.json [--out DIR] [--workers N] [--seed S]
    galerkin-ldp preset NAME > CONFIG.json

Exit codes: 0 success, 2 invalid configuration, 3 numerical blowup.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import statsmodels

from . import __version__
from .action import find_skeletons, initial_path, minimize_action
from .config import PRESETS, ConfigError, Experiment, load, preset, validate
from .diagnostics import exptight_constant, regime_check, smoothing_scan, tail_table
from .drift import approx_error_scan, default_mollify_params
from .dynamics import BlowupError, exptight_ratio, integrate_mild
from .noise import convolve, sample_increments
from .rare_event import eps_sweep, json_safe, write_rows_csv, write_verdict_json

OUTPUT_ROOT_ENV = "LDPSIM_OUTPUT_ROOT"
MANIFEST_SCHEMA = 1


def _write_json(path: Path, doc):
    path.write_text(json.dumps(json_safe(doc), indent=2, sort_keys=True) + "\n")


def _write_path_csv(path: Path, t, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"mode_{n}" for n in range(values.shape[-1])])
        for tk, row in zip(t, values):
            w.writerow([repr(float(tk))] + [repr(float(v)) for v in row])


def _config_digest(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _task_simulate(exp: Experiment, out: Path, workers: int) -> list[str]:
    sim = exp.raw["simulate"]
    cfg = exp.sim_config(sim["eps"])
    incs = sample_increments(exp.seed, exp.op.n_modes, cfg.n_steps, cfg.dt, int(sim["n_samples"]))
    paths = integrate_mild(cfg, incs)
    terminal = paths.terminal
    with open(out / "simulate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"mode_{n}" for n in range(exp.op.n_modes)])
        for i, row in enumerate(terminal):
            w.writerow([i] + [repr(float(v)) for v in row])
    _write_json(out / "simulate.json", {
        "eps": cfg.eps,
        "n_samples": int(sim["n_samples"]),
        "terminal_mean": terminal.mean(axis=0),
        "terminal_var": terminal.var(axis=0),
        "exptight_ratio": exptight_ratio(cfg, paths, convolve(exp.op, incs)),
    })
    return ["simulate.csv", "simulate.json"]


def _skeleton_report(exp: Experiment) -> list[dict]:
    sk = exp.raw["skeletons"]
    if int(sk["n_starts"]) < 1:
        return []
    cfg = exp.sim_config()
    found = find_skeletons(exp.op, exp.drift, exp.x0, cfg.T, cfg.n_steps, int(sk["n_starts"]),
                           exp.seed, float(sk["action_tol"]), exp.optimizer,
                           float(sk["min_separation"]), float(sk["amplitude"]))
    return [{"action": c.action, "smoothed_action": c.smoothed_action, "grad_norm": c.grad_norm,
             "distance_from_flow": c.distance_from_flow,
             "terminal": c.path.terminal} for c in found]


def _minimize(exp: Experiment):
    cfg = exp.sim_config()
    init = initial_path(exp.op, exp.x0, exp.event, cfg.T, cfg.n_steps)
    return minimize_action(exp.op, exp.drift, exp.x0, exp.event, init, exp.optimizer)


def _task_minimize(exp: Experiment, out: Path, workers: int) -> list[str]:
    res = _minimize(exp)
    _write_path_csv(out / "minimizer.csv", res.path.t, res.path.values)
    _write_json(out / "minimize.json", {"event": exp.event.to_config(), **res.summary(),
                                        "skeletons": _skeleton_report(exp)})
    return ["minimizer.csv", "minimize.json"]


def _task_sweep(exp: Experiment, out: Path, workers: int) -> list[str]:
    sw = exp.raw["sweep"]
    res = _minimize(exp)
    report = eps_sweep(exp.sim_config(), exp.event, sw["eps_list"], None, sw["methods"], exp.seed,
                       exp.optimizer, exp.sweep, workers, minimizer=res)
    report.config = exp.raw
    write_rows_csv(out / "sweep.csv", report.rows)
    write_verdict_json(out / "verdict.json", report, {"skeletons": _skeleton_report(exp)})
    _write_path_csv(out / "minimizer.csv", res.path.t, res.path.values)
    return ["sweep.csv", "verdict.json", "minimizer.csv"]


def _task_approx_scan(exp: Experiment, out: Path, workers: int) -> list[str]:
    sc = exp.raw["approx_scan"]
    inner = exp.drift

    def schedule(R):
        return default_mollify_params(exp.op, inner, R, int(sc["n_mc"]), exp.seed, sc["alpha"])

    scan = approx_error_scan(exp.op, inner, sc["R_list"], schedule, int(sc["sample_budget"]),
                             exp.seed, sc["alpha"])
    with open(out / "approx_scan.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["R", "max_error", "delta_R", "tau_R"])
        for r in scan.rows():
            w.writerow([r["R"], repr(r["max_error"]), repr(r["delta_R"]), repr(r["tau_R"])])
    _write_json(out / "approx_scan.json", {"rows": scan.rows(), "loglog_slope": scan.slope,
                                           "strictly_decreasing": scan.strictly_decreasing})
    return ["approx_scan.csv", "approx_scan.json"]


def _task_diagnostics(exp: Experiment, out: Path, workers: int) -> list[str]:
    d = exp.raw["diagnostics"]
    cfg = exp.sim_config(d["eps"])
    alpha = exp.op.delta / 4.0 if d["alpha"] is None else float(d["alpha"])
    n = int(d["n_samples"])
    rows, fit = tail_table(exp.op, alpha, cfg.T, cfg.n_steps, d["eps_list"], d["R_list"], n,
                           exp.seed, workers)
    with open(out / "tail.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["eps", "R", "n", "hits", "p_hat", "ci_lo", "ci_hi"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
    _write_json(out / "diagnostics.json", {
        "alpha": alpha,
        "fernique_fit": fit,
        "exptight_constant": exptight_constant(cfg, n, exp.seed + 1, workers),
        "regime": regime_check(fit["c"], exp.drift.envelope[1], cfg.T),
        "smoothing": smoothing_scan(exp.op, d["betas"], d["times"], 32, exp.seed),
    })
    return ["tail.csv", "diagnostics.json"]


TASK_RUNNERS = {
    "simulate": _task_simulate,
    "minimize": _task_minimize,
    "sweep": _task_sweep,
    "approx_scan": _task_approx_scan,
    "diagnostics": _task_diagnostics,
}


def run(config_path, out: str | None = None, workers: int = 1, seed: int | None = None) -> Path:
    """Validate, execute and write outputs; returns the run directory."""
    raw = load(config_path)
    if seed is not None:
        raw["seed"] = int(seed)
    exp = validate(raw)
    if out is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out_dir = root / f"{raw.get('name', 'run')}-{_config_digest(raw)[:12]}"
    else:
        out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    files = TASK_RUNNERS[exp.task](exp, out_dir, max(1, int(workers)))
    manifest = {
        "kind": "manifest",
        "schema_version": MANIFEST_SCHEMA,
        "config": raw,
        "config_sha256": _config_digest(raw),
        "seeds": {"master": exp.seed, "optimizer": exp.optimizer.seed},
        "versions": {
            "galerkin_ldp": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "statsmodels": statsmodels.__version__,
        },
        "workers": int(workers),
        "outputs": files,
        "started_utc": stamp,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    _write_json(out_dir / "manifest.json", manifest)
    return out_dir


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="galerkin-ldp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config or manifest")
    r.add_argument("config")
    r.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed", type=int, default=None)
    s = sub.add_parser("preset", help="print a preset config")
    s.add_argument("name", choices=PRESETS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset":
        json.dump(preset(args.name), sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    try:
        out = run(args.config, args.out, args.workers, args.seed)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except BlowupError as exc:
        print(f"blowup: {exc}", file=sys.stderr)
        return 3
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
