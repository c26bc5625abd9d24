"""
verify_module.py - Executable checks of the multiplier method's guarantees
--------------------------------------------------------------------------
Handles:
- ConservationReport: per-step density totals, boundary flux sums and the
  discrete divergence residual, plus run-level spreads and the conditioning
  diagnostic gamma = max ||Lambda~^-1||
- identity_check / identity_slope: continuous multiplier identity on smooth
  trial fields with 6th-order central differences
- algebraic_identity: Lambda applied to the assembled residual reproduces
  the conservative form on random states
- divergence_check: one report row against its tolerance
- consistency_order: local truncation error under joint tau/h halving
- solution_convergence: error at the final time against an exact or
  self-converged reference; sub-runs go through a process pool and write
  their rows to sub_runs/run_NN.csv
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from grid_module import FieldState, SpatialGrid, TimeGrid
from problems_module import MultiplierProblem, TrigField, instantiate
from scheme_module import EPS, NOISE_FACTOR, assemble_residual_field, state_times
from utils import write_csv

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "time", "component", "total_density", "boundary_flux_sum",
               "divergence_residual", "newton_iters", "residual_norm"]
ROW_COLUMNS = CSV_COLUMNS + ["divergence_tolerance"]

# 6th-order central first derivative, offsets -3..3
CENTRAL6 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])
FD_STEP = EPS ** (1 / 8)
IDENTITY_STEPS = (0.2, 0.1, 0.05, 0.025)


# ═══════════════════════════════════════════════════════════════
# CONSERVATION ACCOUNTING
# ═══════════════════════════════════════════════════════════════

@dataclass
class ConservationReport:
    problem: str
    components: int
    rows: List[Dict] = field(default_factory=list)
    max_gamma: float = 0.0
    max_tolerance: float = 0.0
    raised_steps: int = 0
    failure: Optional[Dict] = None

    def add_rows(self, rows: Sequence[Dict]):
        self.rows.extend(rows)

    def note_gamma(self, value: float):
        if np.isfinite(value):
            self.max_gamma = max(self.max_gamma, float(value))

    def note_tolerance(self, tolerance: float, residual_tol: float):
        """Track the per-step bound; steps held above residual_tol are counted."""
        self.max_tolerance = max(self.max_tolerance, float(tolerance))
        if tolerance > residual_tol:
            self.raised_steps += 1

    def fail(self, outcome):
        self.failure = {
            "step": outcome.step,
            "time": outcome.time,
            "reason": outcome.rejection_reason,
            "message": outcome.message,
        }

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=ROW_COLUMNS)

    def totals(self) -> np.ndarray:
        """(steps, components) total density history."""
        frame = self.frame()
        if frame.empty:
            return np.zeros((0, self.components))
        table = frame.pivot(index="step", columns="component", values="total_density")
        return table.sort_index().to_numpy()

    def density_spread(self) -> np.ndarray:
        totals = self.totals()
        if totals.shape[0] == 0:
            return np.zeros(self.components)
        return totals.max(axis=0) - totals.min(axis=0)

    def density_scale(self) -> np.ndarray:
        totals = self.totals()
        if totals.shape[0] == 0:
            return np.ones(self.components)
        return np.maximum(1.0, np.abs(totals).max(axis=0))

    def divergence_results(self) -> List[Dict]:
        return [divergence_check(row) for row in self.rows]

    def summary(self) -> Dict:
        checks = [c for c in self.divergence_results() if c["applicable"]]
        failed = [c for c in checks if not c["passed"]]
        return {
            "problem": self.problem,
            "steps": int(max((r["step"] for r in self.rows), default=0)),
            "density_spread": self.density_spread().tolist(),
            "density_scale": self.density_scale().tolist(),
            "max_gamma": self.max_gamma,
            "max_tolerance": self.max_tolerance,
            "raised_tolerance_steps": self.raised_steps,
            "divergence_checks": len(checks),
            "divergence_failures": len(failed),
            "first_divergence_failure": failed[0] if failed else None,
            "failure": self.failure,
        }


def _box_sum(values: np.ndarray, box: Tuple[slice, ...]) -> np.ndarray:
    """Sum the spatial axes of (s, *shape) over the box."""
    inside = values[(slice(None),) + box]
    return inside.reshape(inside.shape[0], -1).sum(axis=1)


def boundary_flux_sum(problem: MultiplierProblem, levels: np.ndarray, times: np.ndarray,
                      tau: float, grid: SpatialGrid, box: Tuple[slice, ...]) -> np.ndarray:
    """(1/h) sum over the faces of the box of phi . nu, an s-vector."""
    total = np.zeros(problem.s)
    if problem.discrete.flux is None or grid.dim == 0:
        return total
    faces = grid.flux_faces(box)
    if not faces:
        return total
    width = levels.shape[0] - 1
    phi = problem.discrete.flux(levels[:width], times[:width], tau, grid)
    for axis, index, sign in faces:
        face = list(box)
        face[axis] = slice(index, index + 1)
        part = phi[(slice(None), axis) + tuple(face)]
        total += sign * part.reshape(problem.s, -1).sum(axis=1) / grid.h
    return total


def _newest_totals(problem: MultiplierProblem, state: FieldState, times: np.ndarray,
                   tau: float, grid: SpatialGrid, box) -> np.ndarray:
    width = state.levels - 1
    psi = problem.discrete.density(state.values[:width], times[:width], tau, grid)
    return _box_sum(psi, box)


def startup_rows(problem: MultiplierProblem, state: FieldState, time_grid: TimeGrid,
                 grid: SpatialGrid) -> List[Dict]:
    """Density totals of the starting levels; divergence columns are not applicable."""
    times = state_times(state, time_grid)
    box = grid.equation_box(problem.stencil.reach)
    totals = _newest_totals(problem, state, times, time_grid.tau, grid, box)
    return [{
        "step": state.step,
        "time": float(times[0]),
        "component": j,
        "total_density": float(totals[j]),
        "boundary_flux_sum": math.nan,
        "divergence_residual": math.nan,
        "newton_iters": 0,
        "residual_norm": math.nan,
        "divergence_tolerance": math.nan,
    } for j in range(problem.s)]


def step_rows(problem: MultiplierProblem, state: FieldState, time_grid: TimeGrid,
              grid: SpatialGrid, outcome) -> List[Dict]:
    """
    Report rows of one accepted step.

    The divergence residual is sum_box D_t psi + boundary flux sum. Its
    tolerance is points * (||Lambda||-scale * the step tolerance + twice the
    rounding floor of the summed terms).
    """
    assembly = outcome.assembly
    times = state_times(state, time_grid)
    tau = time_grid.tau
    box = grid.equation_box(problem.stencil.reach)
    sel = (slice(None),) + box

    totals = _newest_totals(problem, state, times, tau, grid, box)
    flux_sum = boundary_flux_sum(problem, state.values, times, tau, grid, box)
    divergence = _box_sum(assembly.time_derivative, box) + flux_sum

    points = grid.n_points if grid.dim == 0 else int(np.prod([b.stop - b.start for b in box]))
    lam = np.abs(assembly.multiplier[(slice(None), slice(None)) + box]).sum(axis=1)
    lam_scale = lam.reshape(problem.s, -1).max(axis=1)
    term_scale = assembly.term_scale[sel].reshape(problem.s, -1).max(axis=1)
    entry_tol = max(outcome.tolerance, assembly.level_floor)
    tolerance = points * (lam_scale * entry_tol + 2.0 * NOISE_FACTOR * EPS * term_scale)

    return [{
        "step": state.step,
        "time": float(times[0]),
        "component": j,
        "total_density": float(totals[j]),
        "boundary_flux_sum": float(flux_sum[j]),
        "divergence_residual": float(divergence[j]),
        "newton_iters": outcome.iterations,
        "residual_norm": outcome.residual_norm,
        "divergence_tolerance": float(tolerance[j]),
    } for j in range(problem.s)]


def divergence_check(report_row: Dict) -> Dict:
    """
    Discrete divergence identity of one report row.

    Rows without a divergence residual (the startup row) are not applicable.
    """
    residual = report_row.get("divergence_residual", math.nan)
    tolerance = report_row.get("divergence_tolerance", math.nan)
    applicable = not (math.isnan(residual) or math.isnan(tolerance))
    return {
        "step": report_row.get("step"),
        "component": report_row.get("component"),
        "applicable": applicable,
        "passed": bool(abs(residual) <= tolerance) if applicable else None,
        "residual": residual,
        "tolerance": tolerance,
    }


# ═══════════════════════════════════════════════════════════════
# CONTINUOUS MULTIPLIER IDENTITY
# ═══════════════════════════════════════════════════════════════

def identity_check(problem: MultiplierProblem, trial_field: TrigField, t: float,
                   x: Sequence[float] = (), step: float = FD_STEP, corrupt: bool = False) -> float:
    """
    |Lambda[u] F[u] - D_t psi[u] - D_x . Phi[u]| at (t, x), max over components.

    Lambda and F read exact jets of the trial field; the total derivatives of
    psi and Phi are 6th-order central differences with spacing `step`.
    corrupt=True adds u to psi (negative control).
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    ops = problem.continuous

    def density(tt: float) -> np.ndarray:
        D = trial_field.evaluator(tt, x)
        value = ops.density(tt, D)
        return value + D(0)[:problem.s] if corrupt else value

    def flux(axis: int, offset: float) -> np.ndarray:
        point = x.copy()
        point[axis] += offset
        return ops.flux(t, trial_field.evaluator(t, point))[:, axis]

    D = trial_field.evaluator(t, x)
    lhs = ops.multiplier(t, D) @ ops.equation(t, D)

    offsets = np.arange(-3, 4) * step
    dt_psi = sum(w * density(t + o) for w, o in zip(CENTRAL6, offsets) if w) / step
    div_phi = np.zeros(problem.s)
    if problem.n and ops.flux is not None:
        for axis in range(problem.n):
            div_phi = div_phi + sum(w * flux(axis, o) for w, o in zip(CENTRAL6, offsets) if w) / step
    return float(np.max(np.abs(lhs - dt_psi - div_phi)))


def identity_slope(problem: MultiplierProblem, trial_field: Optional[TrigField] = None,
                   steps: Sequence[float] = IDENTITY_STEPS) -> Dict:
    """
    Order of identity_check in the difference step, over the problem's sample points.

    Returns:
        dict with steps, residuals, pairwise slopes and the least-squares slope
    """
    trial_field = trial_field or problem.manufactured_field()
    residuals = []
    for step in steps:
        residuals.append(max(identity_check(problem, trial_field, t, x, step=step)
                             for t, x in problem.sample_points))
    logs = np.log2(np.maximum(residuals, np.finfo(float).tiny))
    spacing = np.log2(np.asarray(steps, dtype=float))
    pairwise = (np.diff(logs) / np.diff(spacing)).tolist()
    slope = float(np.polyfit(spacing, logs, 1)[0])
    return {"problem": problem.name, "steps": list(steps), "residuals": residuals,
            "pairwise": pairwise, "slope": slope}


def algebraic_identity(problem: MultiplierProblem, samples: int = 10_000, seed: int = 0,
                       tau: float = 0.1, h: float = 0.1) -> Dict:
    """
    Lambda . F^{tau,h} = D_t psi + D_x . Phi on random states, at every point
    where the multiplier branch is taken.

    ODE operators are elementwise, so a trailing batch axis evaluates many
    states at once. PDEs use a random periodic field of the same size.
    """
    rng = np.random.default_rng(seed)
    if problem.n == 0:
        shape = (samples,)
        grid = SpatialGrid.ode()
    else:
        side = int(round(samples ** (1.0 / problem.n)))
        shape = (side,) * problem.n
        grid = SpatialGrid(dim=problem.n, h=h, extent=shape, boundary_mode=("periodic",) * problem.n)
    levels = problem.state_sampler(rng, shape)
    times = np.array([1.0 - l * tau for l in range(levels.shape[0])])
    assembly = assemble_residual_field(problem, levels, times, tau, grid)

    applied = np.einsum("ij...,j...->i...", assembly.multiplier, assembly.residual)
    scale = assembly.term_scale + np.einsum("ij...,j...->i...", np.abs(assembly.multiplier),
                                            np.abs(assembly.residual))
    ratio = np.abs(applied - assembly.conservative) / (1e3 * EPS * scale)
    ratio = np.where(assembly.multiplier_branch, ratio, 0.0)
    worst = float(np.max(ratio))
    return {"problem": problem.name, "points": int(np.prod(shape)),
            "multiplier_points": int(np.sum(assembly.multiplier_branch)),
            "worst_ratio": worst, "passed": worst <= 1.0}


# ═══════════════════════════════════════════════════════════════
# ORDER STUDIES
# ═══════════════════════════════════════════════════════════════

@dataclass
class ConvergenceResult:
    """Resolutions with their error; orders are pairwise log ratios."""
    kind: str
    problem: str
    resolutions: List[str] = field(default_factory=list)
    taus: List[float] = field(default_factory=list)
    hs: List[float] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)
    failure: Optional[str] = None

    def add(self, resolution: str, tau: float, h: float, error: float):
        self.resolutions.append(resolution)
        self.taus.append(float(tau))
        self.hs.append(float(h))
        self.errors.append(float(error))

    @property
    def orders(self) -> List[float]:
        orders = []
        for i in range(len(self.errors) - 1):
            e0, e1 = self.errors[i], self.errors[i + 1]
            ratio = self.taus[i] / self.taus[i + 1]
            if e0 > 0 and e1 > 0 and ratio > 1:
                orders.append(math.log(e0 / e1) / math.log(ratio))
            else:
                orders.append(math.nan)
        return orders

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "resolution": self.resolutions,
            "tau": self.taus,
            "h": self.hs,
            "error": self.errors,
            "order": [math.nan] + self.orders if self.errors else [],
        })

    def within(self, expected: float, tolerance: float) -> bool:
        """Every pairwise order within expected +- tolerance (needs 3+ errors)."""
        orders = self.orders
        if self.failure or len(self.errors) < 3:
            return False
        return all(abs(order - expected) <= tolerance for order in orders)


def expected_order(problem: MultiplierProblem) -> int:
    """Joint tau/h order: the smaller of the declared space and time orders."""
    space, time = problem.orders
    return time if space is None else min(space, time)


def _window_grid(problem: MultiplierProblem, x: Sequence[float], h: float) -> Tuple[SpatialGrid, Tuple[int, ...]]:
    """Small periodic grid whose centre point sits at x."""
    if problem.n == 0:
        return SpatialGrid.ode(), ()
    radius = max(max(abs(lo), abs(hi)) for lo, hi in problem.stencil.reach)
    extent = (2 * radius + 3,) * problem.n
    centre = (radius + 1,) * problem.n
    origin = tuple(float(xi) - c * h for xi, c in zip(x, centre))
    grid = SpatialGrid(dim=problem.n, h=h, extent=extent,
                       boundary_mode=("periodic",) * problem.n, origin=origin)
    return grid, centre


def consistency_order(problem: MultiplierProblem, manufactured_field: Optional[TrigField] = None,
                      resolutions: Optional[Sequence[Tuple[float, float]]] = None,
                      tau0: float = 0.1, h0: float = 0.2, levels: int = 4) -> ConvergenceResult:
    """
    max |F[u] - F^{tau,h}[u]| over the sample points of a smooth field.

    Three-level schemes are centred on the middle level, two-level schemes on
    the newer one. resolutions defaults to `levels` joint halvings of
    (tau0, h0).
    """
    manufactured_field = manufactured_field or problem.manufactured_field()
    if resolutions is None:
        resolutions = [(tau0 / 2 ** i, h0 / 2 ** i) for i in range(levels)]
    result = ConvergenceResult(kind="consistency", problem=problem.name)

    for tau, h in resolutions:
        error = 0.0
        for t, x in problem.sample_points:
            grid, centre = _window_grid(problem, x, h)
            if problem.second_order_in_time:
                times = np.array([t + tau, t, t - tau])
            else:
                times = np.array([t, t - tau])
            values = np.stack([manufactured_field.sample(tt, grid) for tt in times])
            assembly = assemble_residual_field(problem, values, times, tau, grid)
            discrete = assembly.residual[(slice(None),) + centre]
            exact = problem.continuous.equation(t, manufactured_field.evaluator(t, x))
            error = max(error, float(np.max(np.abs(discrete - exact))))
        label = f"tau={tau:g}" if problem.n == 0 else f"tau={tau:g},h={h:g}"
        result.add(label, tau, h if problem.n else math.nan, error)
        logger.debug("%s consistency %s: %.3e", problem.name, label, error)
    return result


def _convergence_job(job: Tuple) -> Dict:
    """
    Worker for one resolution of a convergence study.

    The problem is rebuilt from its name and parameters so the job pickles;
    the run's report rows go to sub_run_path when one is given.
    """
    from solver_module import integrate

    name, params, settings, resolution, metric, sub_run_path = job
    problem = instantiate(name, params)
    N, extent = resolution if isinstance(resolution, (tuple, list)) else (resolution, None)
    if extent:
        grid = SpatialGrid.from_domain(settings["domain"], extent, settings.get("boundary", "periodic"))
    else:
        grid = SpatialGrid.ode()
    initial = settings["initial"](problem, grid)
    time_grid = TimeGrid.from_steps(settings.get("t0", 0.0), settings["T"], int(N))
    run = integrate(problem, initial, None, (time_grid, grid), settings.get("config"))
    label = f"N={N}" if extent is None else f"N={N},extent={'x'.join(map(str, extent))}"
    if sub_run_path:
        write_csv(run.report.frame()[CSV_COLUMNS], sub_run_path,
                  {"problem": name, "resolution": label, "summary": run.report.summary()})

    if run.aborted:
        return {"label": label, "failure": f"step {run.failure.step} rejected ({run.failure.rejection_reason})"}
    if metric == "density":
        cell = grid.h ** grid.dim if grid.dim else 1.0
        value = run.report.totals()[-1] * cell
    else:
        value = run.final
    return {"label": label, "failure": None, "time_grid": time_grid, "grid": grid,
            "initial": initial, "value": value}


def solution_convergence(problem: MultiplierProblem, settings: Dict,
                         resolutions: Sequence, reference: str = "exact",
                         metric: str = "solution", max_workers: Optional[int] = None,
                         sub_run_dir: Optional[str] = None) -> ConvergenceResult:
    """
    Final-time error per resolution.

    Sub-runs are independent and execute in a process pool; results merge in
    resolution order, so the outcome does not depend on completion order.

    Args:
        settings: t0, T, initial (picklable callable (problem, grid) -> initial
            data), domain and boundary (PDEs only), config (SolverConfig)
        resolutions: step counts N (ODEs) or (N, extent) pairs, refined by 2
        reference: "exact" (closed form or, for the density metric, the
            conserved continuous density) or "self" (successive differences
            of nested resolutions sampled at the coarse points)
        metric: "solution" or "density"
        max_workers: pool size; 1 runs every sub-run in this process
        sub_run_dir: where each sub-run writes its report rows
    """
    if reference == "exact" and metric == "solution" and problem.exact_solution is None:
        raise ValueError(f"{problem.name} has no exact solution; use reference='self'")
    result = ConvergenceResult(kind=f"convergence-{reference}-{metric}", problem=problem.name)

    jobs = []
    for index, resolution in enumerate(resolutions):
        path = os.path.join(sub_run_dir, f"run_{index:02d}.csv") if sub_run_dir else None
        jobs.append((problem.name, problem.params, settings, resolution, metric, path))

    workers = min(len(jobs), max_workers or os.cpu_count() or 1)
    if workers <= 1:
        runs = [_convergence_job(job) for job in jobs]
    else:
        runs = [None] * len(jobs)
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(_convergence_job, job): index for index, job in enumerate(jobs)}
            for future in as_completed(futures):
                runs[futures[future]] = future.result()
                logger.debug("%s convergence: %s done", problem.name, runs[futures[future]]["label"])

    for run in runs:
        if run["failure"]:
            result.failure = f"{run['label']}: {run['failure']}"
            logger.warning("%s convergence aborted: %s", problem.name, result.failure)
            return result

    t0 = settings.get("t0", 0.0)
    if reference == "exact":
        for run in runs:
            time_grid, grid = run["time_grid"], run["grid"]
            if metric == "density":
                exact = problem.continuous.density(t0, _initial_jet(run["initial"]))
            else:
                exact = problem.exact_solution(time_grid.horizon, dict(run["initial"], t0=t0), grid)
            result.add(run["label"], time_grid.tau, grid.h if grid.dim else math.nan,
                       float(np.max(np.abs(run["value"] - exact))))
        return result

    for coarse, fine in zip(runs[:-1], runs[1:]):
        grid, finer = coarse["grid"], fine["value"]
        if metric == "solution" and grid.dim:
            stride = tuple(slice(None, None, f // c) for f, c in zip(fine["grid"].extent, grid.extent))
            finer = finer[(slice(None),) + stride]
        result.add(coarse["label"], coarse["time_grid"].tau, grid.h if grid.dim else math.nan,
                   float(np.max(np.abs(coarse["value"] - finer))))
    return result


def _initial_jet(initial: Dict) -> Callable:
    """Derivative evaluator of the initial data (value and first time derivative)."""
    u0 = np.asarray(initial["u0"], dtype=float)
    ut0 = np.asarray(initial.get("ut0", np.zeros_like(u0)), dtype=float)

    def D(nt: int = 0, nx: Sequence[int] = ()) -> np.ndarray:
        if nt == 0:
            return u0
        if nt == 1:
            return ut0
        raise ValueError("initial data carries only value and velocity")
    return D
