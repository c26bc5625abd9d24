"""
experiment_runner.py - Orchestrates one experiment end to end
-------------------------------------------------------------
Resolved config → problem and grids → mode (run, divergence, convergence,
consistency, identity) → checks → steps.csv / convergence.csv /
identity.csv, summary.json and the optional report.xlsx.

Every entry point returns a result dictionary; experiment failures never
raise out of run().
"""

import functools
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

import config as settings
import excel_module
from grid_module import SpatialGrid, TimeGrid
from problems_module import BUILDERS, MultiplierProblem, instantiate, preset_data
from scheme_module import stencil_dry_run
from solver_module import SolverConfig, integrate
from utils import run_header, to_jsonable, write_csv
from verify_module import (CSV_COLUMNS, algebraic_identity, consistency_order, expected_order,
                           identity_slope, solution_convergence)

logger = logging.getLogger(__name__)


# ═══════════════════════════════════════════════════════════════
# SETUP
# ═══════════════════════════════════════════════════════════════

def build_spatial_grid(config: Dict, problem: MultiplierProblem) -> SpatialGrid:
    if problem.n == 0:
        return SpatialGrid.ode()
    grid = config["grid"]
    return SpatialGrid.from_domain(grid["domain"], grid["extent"], grid.get("boundary", "periodic"))


def build_time_grid(config: Dict) -> TimeGrid:
    if config.get("N") is not None:
        return TimeGrid.from_steps(config["t0"], config["T"], config["N"])
    return TimeGrid.from_horizon(config["t0"], config["tau"], config["T"])


def build_initial_data(config: Dict, problem: MultiplierProblem, grid: SpatialGrid) -> Dict:
    """Preset or inline initial data, shaped (m, *extent)."""
    initial = config.get("initial") or {}
    if "preset" in initial:
        data = preset_data(problem, grid, initial["preset"])
    else:
        data = {key: np.asarray(initial[key], dtype=float)
                for key in ("u0", "ut0", "u1") if initial.get(key) is not None}
    shaped = {}
    for key, value in data.items():
        value = np.asarray(value, dtype=float)
        if grid.dim and value.ndim == 1:
            value = value.reshape((-1,) + (1,) * grid.dim)
        shaped[key] = np.broadcast_to(value, (problem.m,) + tuple(grid.extent)).copy()
    return shaped


def output_dir(config: Dict) -> str:
    outputs = config["outputs"]
    tag = outputs.get("tag") or f"{config.get('problem', 'all')}-{config['mode']}"
    return os.path.join(outputs["dir"], tag)


# ═══════════════════════════════════════════════════════════════
# MODES
# ═══════════════════════════════════════════════════════════════

def _integration(config: Dict, problem: MultiplierProblem) -> Tuple[Dict, Dict, pd.DataFrame]:
    grid = build_spatial_grid(config, problem)
    time_grid = build_time_grid(config)
    data = build_initial_data(config, problem, grid)
    solver = SolverConfig.from_dict(config["solver"])

    print(f"[1/3] Integrating {problem.name}: {time_grid.steps} steps, tau={time_grid.tau:g}"
          + (f", grid {'x'.join(map(str, grid.extent))}" if grid.dim else ""))
    result = integrate(problem, data, None, (time_grid, grid), solver)
    summary = result.report.summary()
    summary["aborted"] = result.aborted

    flux_free = grid.dim == 0 or all(grid.periodic)
    spread = np.asarray(summary["density_spread"])
    scale = np.asarray(summary["density_scale"])
    checks = {
        "completed": not result.aborted,
        "divergence": summary["divergence_failures"] == 0,
    }
    if flux_free:
        checks["conservation"] = bool(np.all(spread <= config["checks"]["spread_tol"] * scale))
    return summary, checks, result.report.frame()


def _run_mode(config: Dict, problem: MultiplierProblem, out_dir: str, header: Dict) -> Dict:
    summary, checks, frame = _integration(config, problem)
    if config["mode"] == "divergence":
        checks.pop("conservation", None)

    print("[2/3] Writing per-step table...")
    write_csv(frame[CSV_COLUMNS], os.path.join(out_dir, "steps.csv"), header)
    return {"summary": summary, "checks": checks, "steps": frame}


def _convergence_mode(config: Dict, problem: MultiplierProblem, out_dir: str, header: Dict) -> Dict:
    block = config["convergence"]
    study = {
        "t0": config["t0"],
        "T": config["T"],
        "initial": functools.partial(build_initial_data, config),
        "config": SolverConfig.from_dict(config["solver"]),
    }
    if problem.n:
        study["domain"] = config["grid"]["domain"]
        study["boundary"] = config["grid"].get("boundary", "periodic")
    resolutions = block["N"] if problem.n == 0 else list(zip(block["N"], map(tuple, block["extent"])))
    sub_run_dir = os.path.join(out_dir, "sub_runs")
    print(f"[1/3] Convergence study over {len(resolutions)} resolutions "
          f"({block['reference']} reference, {block['metric']} metric)...")
    result = solution_convergence(problem, study, resolutions, block["reference"], block["metric"],
                                  sub_run_dir=sub_run_dir)
    outcome = _order_outcome(config, problem, result, out_dir, header)
    outcome["summary"]["sub_runs"] = [os.path.join("sub_runs", f"run_{i:02d}.csv")
                                      for i in range(len(resolutions))]
    return outcome


def _consistency_mode(config: Dict, problem: MultiplierProblem, out_dir: str, header: Dict) -> Dict:
    block = config["consistency"]
    print(f"[1/3] Consistency study: tau0={block['tau0']:g}, h0={block['h0']:g}, {block['levels']} levels...")
    result = consistency_order(problem, tau0=block["tau0"], h0=block["h0"], levels=block["levels"])
    return _order_outcome(config, problem, result, out_dir, header)


def _order_outcome(config, problem, result, out_dir, header) -> Dict:
    expected = expected_order(problem)
    frame = result.frame()
    print("[2/3] Writing convergence table...")
    write_csv(frame, os.path.join(out_dir, "convergence.csv"), header)
    passed = result.within(expected, config["checks"]["order_tol"])
    summary = {
        "kind": result.kind,
        "expected_order": expected,
        "orders": result.orders,
        "errors": result.errors,
        "failure": result.failure,
    }
    return {"summary": summary, "checks": {"order": passed}, "convergence": frame}


def _identity_mode(config: Dict, problem: Optional[MultiplierProblem], out_dir: str, header: Dict) -> Dict:
    names = [problem.name] if problem is not None else list(BUILDERS)
    block = config["identity"]
    target, slack = config["checks"]["identity_slope"], config["checks"]["slope_tol"]
    rows = []
    for i, name in enumerate(names, 1):
        current = problem if problem is not None else instantiate(name)
        slope = identity_slope(current, steps=block["steps"])
        algebra = algebraic_identity(current, seed=block["seed"])
        stencil = stencil_dry_run(current, seed=block["seed"])
        passed = abs(slope["slope"] - target) <= slack and algebra["passed"] and stencil["ok"]
        print(f"   [{i}/{len(names)}] {name}: slope {slope['slope']:.2f}, "
              f"algebraic ratio {algebra['worst_ratio']:.2e}, stencil {'ok' if stencil['ok'] else 'VIOLATED'}"
              f" {'✅' if passed else '❌'}")
        rows.append({
            "problem": name,
            "slope": slope["slope"],
            "finest_residual": slope["residuals"][-1],
            "algebraic_worst_ratio": algebra["worst_ratio"],
            "stencil_ok": stencil["ok"],
            "passed": passed,
        })
    frame = pd.DataFrame(rows)
    write_csv(frame, os.path.join(out_dir, "identity.csv"), header)
    checks = {f"identity:{row['problem']}": bool(row["passed"]) for row in rows}
    return {"summary": {"identity": rows}, "checks": checks, "identity": frame}


MODE_HANDLERS = {
    "run": _run_mode,
    "divergence": _run_mode,
    "convergence": _convergence_mode,
    "consistency": _consistency_mode,
    "identity": _identity_mode,
}


# ═══════════════════════════════════════════════════════════════
# ENTRY POINT
# ═══════════════════════════════════════════════════════════════

def run(config: Dict) -> Dict:
    """
    Execute one resolved experiment configuration.

    Args:
        config: output of config.parse_config

    Returns:
        Dictionary with:
            - success: bool (every enabled check passed)
            - message: str
            - output_dir: str
            - summary: dict (also written to summary.json)
            - checks: dict of check name -> bool
    """
    mode = config["mode"]
    out_dir = output_dir(config)
    try:
        problem = instantiate(config["problem"], config["params"]) if config.get("problem") else None
        header = run_header(config, settings.VERSION)

        print(f"\n{'═' * 80}")
        print(f"EXPERIMENT: {mode} / {problem.name if problem else 'all problems'}")
        print(f"{'═' * 80}")
        logger.info("mode %s, problem %s, output %s", mode, config.get("problem"), out_dir)

        outcome = MODE_HANDLERS[mode](config, problem, out_dir, header)
        checks = outcome["checks"]
        success = bool(checks) and all(checks.values())

        summary = dict(header)
        summary.update({"mode": mode, "checks": checks, "success": success, "result": outcome["summary"]})
        print("[3/3] Writing summary...")
        settings.save_json(os.path.join(out_dir, "summary.json"), to_jsonable(summary))
        if config["outputs"].get("xlsx"):
            excel_module.write_report(os.path.join(out_dir, "report.xlsx"), outcome.get("steps"),
                                      to_jsonable({"mode": mode, "checks": checks, "result": outcome["summary"]}),
                                      outcome.get("convergence", outcome.get("identity")))

        failed = [name for name, ok in checks.items() if not ok]
        message = "all checks passed" if success else f"failed checks: {', '.join(failed) or 'none enabled'}"
        print(f"{'✅' if success else '❌'} {message}")
        print(f"{'─' * 80}")
        return {"success": success, "message": message, "output_dir": out_dir,
                "summary": summary, "checks": checks}

    except Exception as e:
        logger.exception(f"experiment failed: {e}")
        return {"success": False, "message": f"Experiment failed: {e}", "output_dir": out_dir,
                "summary": None, "checks": {}}
