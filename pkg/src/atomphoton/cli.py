"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 physically infeasible request.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import experiments as exp
from .config import ConfigError, RunConfig, load_anchors, parse_override
from .measurement import (
    CountsTable, Estimate, UndefinedEstimate, bell_settings_rad, chsh_S, visibility_from_g2,
)
from .montecarlo import ClickRecords, RecordFormatError, RngSpec, counts_from_records, run_experiment
from .source import PhysicsError, chain_counts, mode_match, photonic_state

EXIT_INPUT = 2
EXIT_PHYSICS = 3
SETTINGS_SCHEMA = "atomphoton.settings/1"
SUMMARY_SCHEMA = "atomphoton.summary/1"
SWEEP_COLUMNS = {
    "visibility": ("p_AS", "V", "V_err"),
    "bell": ("tau_us", "S", "S_err", "sigma_violation"),
    "decay": ("tau_us", "eta_retrieve", "eta_err", "g2", "g2_err"),
}


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _metadata(command: str) -> dict:
    return {"command": command, "version": _version(),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _num(x) -> float | None:
    """JSON-safe float: non-finite values become null."""
    x = float(x)
    return x if math.isfinite(x) else None


def _est(e: Estimate | None) -> dict | None:
    if e is None:
        return None
    return {"value": _num(e.value), "std_err": _num(e.std_err)}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False)


# -- estimates over a counts table ------------------------------------------------

def simulation_settings() -> list[tuple[float, float]]:
    """Setting ids in order: H/V pair check, four CHSH settings, then the fringe scan."""
    fringe = [(exp.FRINGE_THETA_AS, t) for t in exp.FRINGE_THETA_S]
    return [exp.G2_SETTING] + bell_settings_rad() + fringe


def _try(fn):
    try:
        return fn()
    except (UndefinedEstimate, KeyError):
        return None


def estimates_from_table(table: CountsTable) -> dict[str, Any]:
    """Apply every estimator the recorded settings support; missing ones are null."""
    g2 = _try(lambda: table.find(*exp.G2_SETTING).g2("AS+", "S-"))
    es = [_try(lambda a=a, b=b: table.find(a, b).correlation()) for a, b in bell_settings_rad()]
    s = chsh_S(*es) if all(e is not None for e in es) else None
    fringe = sorted((c for c in table.settings.values() if abs(c.theta_AS - exp.FRINGE_THETA_AS) < 1e-9),
                    key=lambda c: c.theta_S)
    analytic = all(c.analytic for c in table.settings.values())
    v = _try(lambda: exp.fringe_from_counts(fringe, analytic)) if len(fringe) >= 4 else None
    n_as = sum(c.single("AS+") + c.single("AS-") for c in table.settings.values())
    trials = sum(c.trials for c in table.settings.values())
    p_as = None
    if trials > 0:
        err = 0.0 if analytic else math.sqrt(max(n_as, 1.0)) / (2.0 * trials)
        p_as = Estimate(n_as / (2.0 * trials), err)
    rows = []
    for sid, c in sorted(table.settings.items()):
        rows.append({"id": sid, "theta_AS_deg": math.degrees(c.theta_AS), "theta_S_deg": math.degrees(c.theta_S),
                     "trials": c.trials, "n_pp": c.n_pp, "n_pm": c.n_pm, "n_mp": c.n_mp, "n_mm": c.n_mm,
                     "singles": list(c.singles)})
    return {
        "g2": _est(g2),
        "g2_defined": g2 is not None,
        "V_from_g2": _est(visibility_from_g2(g2)) if g2 is not None else None,
        "V": _est(v),
        "S": _est(s),
        "E": [_est(e) for e in es],
        "p_AS": _est(p_as),
        "settings": rows,
    }


# -- commands ----------------------------------------------------------------------

def _check_geometry(cfg) -> dict:
    out = {}
    for arm in ("L", "R"):
        m = mode_match(cfg.geometry, arm)
        if not m.counter_propagating:
            raise PhysicsError(f"arm {arm} is not phase matched (residual {m.residual:.3g})")
        out[arm] = m.residual
    return out


def cmd_simulate(run: RunConfig, out=None) -> int:
    cfg = run.chain()
    geometry = _check_geometry(cfg)
    tau = run["tau_us"]
    settings = simulation_settings()
    leak = photonic_state(cfg.source, cfg.memory, cfg.detector, tau, cfg.n_max).leaked_population()
    files = {}
    if run["mode"] == "analytic":
        counts = chain_counts(cfg, tau, settings)
        table = CountsTable(dict(enumerate(counts)))
    else:
        table, records = run_experiment(cfg, settings, run["trials"], RngSpec(run["seed"]), tau,
                                        workers=run["workers"], return_records=True)
        out_dir = Path(run["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        records.to_csv(out_dir / "records.csv")
        write_settings(out_dir / "settings.json", settings)
        files = {"records": str(out_dir / "records.csv"), "settings": str(out_dir / "settings.json")}
    summary = {
        "schema": SUMMARY_SCHEMA,
        "mode": run["mode"],
        "tau_us": tau,
        "estimates": estimates_from_table(table),
        "leaked_population": leak,
        "mode_match_residual": geometry,
        "files": files,
        "config": run.echo(),
        "metadata": _metadata("simulate"),
    }
    (out or sys.stdout).write(_dump(summary) + "\n")
    return 0


def write_settings(path, settings: Sequence[tuple[float, float]]) -> None:
    body = {"schema": SETTINGS_SCHEMA, "units": "rad",
            "settings": {str(i): [float(a), float(b)] for i, (a, b) in enumerate(settings)}}
    Path(path).write_text(json.dumps(body, indent=2) + "\n")


def read_settings(path) -> dict[int, tuple[float, float]]:
    try:
        body = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(body, dict) or body.get("schema") != SETTINGS_SCHEMA:
        raise ConfigError(f"settings file needs schema {SETTINGS_SCHEMA!r}")
    try:
        return {int(k): (float(v[0]), float(v[1])) for k, v in body["settings"].items()}
    except (KeyError, TypeError, ValueError, IndexError):
        raise ConfigError("settings must map setting id to [theta_AS, theta_S]") from None


def cmd_analyze(records_path, settings_path=None, out=None) -> int:
    settings = read_settings(settings_path) if settings_path else dict(enumerate(simulation_settings()))
    try:
        records = ClickRecords.from_csv(records_path)
    except OSError as exc:
        raise ConfigError(f"cannot read {records_path}: {exc.strerror}") from None
    if len(records) == 0:
        raise RecordFormatError("no records in file")
    try:
        table = counts_from_records(records, settings)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    result = {"schema": SUMMARY_SCHEMA, "records": len(records), "estimates": estimates_from_table(table),
              "metadata": _metadata("analyze")}
    (out or sys.stdout).write(_dump(result) + "\n")
    return 0


def parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        start, stop, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"grid {text!r} is not start:stop:steps") from None
    if steps < 1 or not (math.isfinite(start) and math.isfinite(stop)):
        raise ConfigError("grid out of range")
    if steps > 1 and stop <= start:
        raise ConfigError("grid out of range: stop must exceed start")
    return np.linspace(start, stop, steps) if steps > 1 else np.array([start])


def _row(values) -> str:
    return ",".join("nan" if v is None or not math.isfinite(v) else repr(float(v)) for v in values)


def sweep_rows(result: exp.SweepResult) -> list[list[float]]:
    g = result.grid.tolist()
    if result.kind == "visibility":
        return [[x, e.value, e.std_err] for x, e in zip(g, result.columns["V"])]
    if result.kind == "bell":
        return [[x, s.value, s.std_err, z.value]
                for x, s, z in zip(g, result.columns["S"], result.columns["sigma_violation"])]
    return [[x, n.value, n.std_err, q.value, q.std_err]
            for x, n, q in zip(g, result.columns["eta_retrieve"], result.columns["g2"])]


def write_sweep_csv(path, result: exp.SweepResult) -> None:
    lines = [",".join(SWEEP_COLUMNS[result.kind])] + [_row(r) for r in sweep_rows(result)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_sweep(kind: str, run: RunConfig, grid: np.ndarray | None = None, out=None) -> int:
    cfg = run.chain()
    _check_geometry(cfg)
    common = {"mode": run["mode"], "trials": run["trials"], "seed": run["seed"]}
    if kind == "visibility":
        grid = np.array(exp.DEFAULT_PAS_GRID) if grid is None else grid
        if np.any(grid <= 0) or np.any(grid > cfg.detector.eta_AS):
            raise ConfigError("grid out of range: p_AS must lie in (0, eta_AS]")
        result = exp.sweep_visibility_vs_pas(cfg, grid, tau=run["tau_us"], **common)
    else:
        grid = np.array(exp.DEFAULT_TAU_GRID) if grid is None else grid
        if np.any(grid < 0):
            raise ConfigError("grid out of range: storage times must be >= 0")
        scan = exp.scan_bell_vs_tau if kind == "bell" else exp.scan_retrieval_g2_vs_tau
        result = scan(cfg, grid, **common)
    out_dir = Path(run["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{kind}.csv", out_dir / f"{kind}.json"
    write_sweep_csv(csv_path, result)
    summary = {"schema": SUMMARY_SCHEMA, "kind": kind, "variable": result.variable, "points": len(result.grid),
               "fit": result.fit, "provenance": result.provenance, "files": {"csv": str(csv_path)},
               "config": run.echo()}
    json_path.write_text(_dump(summary) + "\n")
    summary["files"]["json"] = str(json_path)
    summary["metadata"] = _metadata("sweep")
    (out or sys.stdout).write(_dump(summary) + "\n")
    return 0


def calibration_dict(cal: exp.Calibration, anchors: exp.Anchors) -> dict:
    return {
        "T": cal.memory.T, "shape": cal.memory.shape, "eta_r0": cal.memory.eta_r0, "eta_S": cal.detector.eta_S,
        "dephase_T": cal.memory.dephase_T, "background_S": cal.detector.background_S,
        "background_S_rate": cal.detector.background_S_rate, "mode_overlap": cal.mode_overlap,
        "intrinsic_visibility": cal.intrinsic_visibility, "chi": cal.chi, "eta_AS": anchors.eta_AS,
        "residuals": cal.residuals,
    }


def cmd_calibrate(anchors_path=None, out_dir=None, out=None) -> int:
    anchors = load_anchors(anchors_path)
    cal = exp.calibrate(anchors)
    body = calibration_dict(cal, anchors)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "calibration.json").write_text(_dump(body) + "\n")
    body["metadata"] = _metadata("calibrate")
    (out or sys.stdout).write(_dump(body) + "\n")
    return 0


# -- argument parsing --------------------------------------------------------------

def _run_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML config file layered over the shipped defaults")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--mode", choices=("analytic", "sampled"))
    p.add_argument("--out-dir")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atomphoton", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run_opts = _run_options()
    sub.add_parser("simulate", parents=[run_opts], help="one chain evaluation, JSON summary on stdout")
    sw = sub.add_parser("sweep", parents=[run_opts], help="visibility / Bell / decay sweeps to CSV")
    sw.add_argument("kind", choices=tuple(SWEEP_COLUMNS))
    sw.add_argument("--grid", metavar="START:STOP:STEPS")
    an = sub.add_parser("analyze", help="estimates from a click-record CSV")
    an.add_argument("records")
    an.add_argument("--settings", help="settings JSON mapping setting id to basis angles in radians")
    ca = sub.add_parser("calibrate", help="fit memory and noise constants to an anchors file")
    ca.add_argument("anchors", nargs="?", help="anchors TOML (default: shipped anchors)")
    ca.add_argument("--out-dir")
    return parser


def _resolve(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set)
    for key in ("seed", "trials", "mode", "out_dir"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    return RunConfig.load(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(_resolve(args))
        if args.command == "sweep":
            run = _resolve(args)
            grid = parse_grid(args.grid) if args.grid else None
            return cmd_sweep(args.kind, run, grid)
        if args.command == "analyze":
            return cmd_analyze(args.records, args.settings)
        return cmd_calibrate(args.anchors, args.out_dir)
    except (ConfigError, RecordFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PhysicsError, UndefinedEstimate) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_PHYSICS


if __name__ == "__main__":
    sys.exit(main())
