"""
solver_module.py - Implicit time stepping for multiplier-method schemes
-----------------------------------------------------------------------
Handles:
- startup of two- and three-level schemes (taylor2, exact_solution, given)
- one step: predictor, damped Newton on the assembled residual for every
  newest-level unknown in the equation box, acceptance or rejection
- integrate(): startup + N steps with conservation accounting and observers

Jacobians are finite differences: dense for ODEs (scipy.linalg LU), column
colored and sparse for PDEs (scipy.sparse + splu), one residual evaluation
per color.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from errors import InadmissibleStateError, InitialDataError, SingularMultiplierError
from grid_module import FieldState, SpatialGrid, TimeGrid
from problems_module import MultiplierProblem
from scheme_module import Assembly, MultiplierGuard, assemble_residual_field, state_times
from verify_module import ConservationReport, startup_rows, step_rows

logger = logging.getLogger(__name__)

PREDICTORS = ("copy", "linear_extrapolation")
STARTUP_MODES = ("exact_solution", "taylor2", "given")

REJECT_SINGULAR = "multiplier-singular"
REJECT_NONCONVERGENCE = "nonconvergence"
REJECT_INADMISSIBLE = "inadmissible-state"


# ═══════════════════════════════════════════════════════════════
# CONFIG AND OUTCOMES
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class SolverConfig:
    residual_tol: float = 1e-12
    max_iters: int = 50
    jacobian_fd_eps: float = 1e-7
    predictor: str = "linear_extrapolation"
    startup: str = "taylor2"
    polish: bool = True
    max_halvings: int = 10
    max_floor_ratio: float = 1e6

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError(f"residual_tol must be positive, got {self.residual_tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 1e-10 <= self.jacobian_fd_eps <= 1e-4:
            raise ValueError(f"jacobian_fd_eps must lie in [1e-10, 1e-4], got {self.jacobian_fd_eps}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.startup not in STARTUP_MODES:
            raise ValueError(f"startup must be one of {STARTUP_MODES}, got {self.startup!r}")
        if not self.max_floor_ratio >= 1:
            raise ValueError(f"max_floor_ratio must be >= 1, got {self.max_floor_ratio}")

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "SolverConfig":
        return cls(**(data or {}))


@dataclass
class StepOutcome:
    """
    Result of one advance_step call.

    `tolerance` is the bound the step was held to: residual_tol, or the
    step's floating-point floor when that is higher (Assembly.floor, or the
    stagnated residual when `floor_limited`). Accepted steps always have
    residual_norm <= tolerance; `acceptance` is their ratio.
    """
    step: int
    time: float
    accepted: bool
    iterations: int
    residual_norm: float
    tolerance: float
    acceptance: float = np.inf
    floor_limited: bool = False
    rejection_reason: Optional[str] = None
    message: str = ""
    gamma: float = 0.0
    assembly: Optional[Assembly] = field(default=None, repr=False)


@dataclass
class IntegrationResult:
    problem: str
    times: np.ndarray
    trajectory: np.ndarray          # (K, m, *shape) newest level after startup and every step
    report: ConservationReport
    outcomes: List[StepOutcome]
    aborted: bool = False
    failure: Optional[StepOutcome] = None

    @property
    def final(self) -> np.ndarray:
        return self.trajectory[-1]


# ═══════════════════════════════════════════════════════════════
# STARTUP
# ═══════════════════════════════════════════════════════════════

def startup_levels(problem: MultiplierProblem, initial_data: Dict, config: SolverConfig,
                   time_grid: TimeGrid, grid: SpatialGrid) -> FieldState:
    """
    Build the starting FieldState.

    Two-level schemes start from u(t0) alone (step 0). Three-level schemes get
    level 1 from the startup mode and start at step 1 with values [u1, u0, -].

    Raises:
        InitialDataError: missing u0, missing ut0 for taylor2, missing u1 for
            given, or no exact solution for exact_solution
    """
    if "u0" not in initial_data:
        raise InitialDataError(f"{problem.name}: initial data needs u0")
    shape = (problem.m,) + tuple(grid.extent)
    u0 = np.broadcast_to(np.asarray(initial_data["u0"], dtype=float), shape).copy()
    values = np.full((problem.stencil.time_levels,) + shape, np.nan)
    values[0] = u0
    state = FieldState(values=values, step=0)
    if not problem.second_order_in_time:
        return state

    tau = time_grid.tau
    t0 = time_grid.t0
    data = dict(initial_data, u0=u0, t0=t0)
    if config.startup == "taylor2":
        if initial_data.get("ut0") is None:
            raise InitialDataError(f"{problem.name}: taylor2 startup needs the initial velocity ut0")
        ut0 = np.broadcast_to(np.asarray(initial_data["ut0"], dtype=float), shape)
        utt0 = problem.acceleration(t0, u0, ut0)
        u1 = u0 + tau * ut0 + 0.5 * tau ** 2 * utt0
    elif config.startup == "exact_solution":
        if problem.exact_solution is None:
            raise InitialDataError(f"{problem.name} has no exact solution for startup")
        if initial_data.get("ut0") is None:
            raise InitialDataError(f"{problem.name}: exact_solution startup needs ut0")
        u1 = problem.exact_solution(t0 + tau, data, grid)
    else:
        if initial_data.get("u1") is None:
            raise InitialDataError(f"{problem.name}: given startup needs u1")
        u1 = initial_data["u1"]

    state.rotate(np.broadcast_to(np.asarray(u1, dtype=float), shape))
    logger.debug("%s startup (%s): u1 = %s", problem.name, config.startup,
                 np.array2string(np.asarray(u1).ravel()[:4]))
    return state


def _predict(state: FieldState, predictor: str) -> np.ndarray:
    newest = state.values[0]
    if predictor == "copy":
        return newest.copy()
    previous = state.values[1] if state.levels > 1 else None
    if previous is None or not np.all(np.isfinite(previous)):
        previous = state.history
    if previous is None or not np.all(np.isfinite(previous)):
        return newest.copy()
    return 2.0 * newest - previous


# ═══════════════════════════════════════════════════════════════
# JACOBIANS
# ═══════════════════════════════════════════════════════════════

def _axis_colors(n: int, width: int, periodic: bool) -> np.ndarray:
    """Colors along one axis such that points sharing a color are >= width apart (cyclically if periodic)."""
    j = np.arange(n)
    if not periodic:
        return j % width
    if n < width:
        return j
    full = width * (n // width)
    colors = j % width
    colors[full:] = width + np.arange(n - full)
    return colors


class ColoredJacobian:
    """
    Sparse finite-difference Jacobian of a stencil residual on a box.

    Unknowns and equations are laid out (component, *box) in C order.
    """

    def __init__(self, problem: MultiplierProblem, grid: SpatialGrid, box: Tuple[slice, ...]):
        self.m = problem.m
        self.box_shape = tuple(b.stop - b.start for b in box)
        self.points = int(np.prod(self.box_shape))
        reach = problem.stencil.reach

        per_axis = []
        for axis, n in enumerate(self.box_shape):
            lo, hi = reach[axis]
            per_axis.append(_axis_colors(n, hi - lo + 1, grid.periodic[axis]))
        counts = [int(c.max()) + 1 for c in per_axis]
        grids = np.meshgrid(*per_axis, indexing="ij")
        self.colors = np.ravel_multi_index(tuple(grids), counts).ravel()
        self.n_colors = int(np.prod(counts))

        # For residual point J, the unknown at P = J + o can influence it.
        index = np.indices(self.box_shape).reshape(len(self.box_shape), -1)
        self.offsets = []
        for offset in itertools.product(*(range(lo, hi + 1) for lo, hi in reach)):
            target = index + np.array(offset)[:, None]
            valid = np.ones(self.points, dtype=bool)
            for axis, n in enumerate(self.box_shape):
                if grid.periodic[axis]:
                    target[axis] %= n
                else:
                    valid &= (target[axis] >= 0) & (target[axis] < n)
                    target[axis] = np.clip(target[axis], 0, n - 1)
            self.offsets.append((np.ravel_multi_index(tuple(target), self.box_shape), valid))

    @property
    def evaluations(self) -> int:
        return self.m * self.n_colors

    def matrix(self, residual: Callable, x: np.ndarray, r0: np.ndarray,
               fd_eps: float) -> scipy.sparse.csc_matrix:
        size = self.m * self.points
        rows, cols, vals = [], [], []
        for q in range(self.m):
            block = slice(q * self.points, (q + 1) * self.points)
            for color in range(self.n_colors):
                chosen = self.colors == color
                if not np.any(chosen):
                    continue
                delta = np.zeros(self.points)
                delta[chosen] = fd_eps * np.maximum(1.0, np.abs(x[block][chosen]))
                trial = x.copy()
                trial[block] += delta
                diff = (residual(trial) - r0).reshape(self.m, self.points)
                for target, valid in self.offsets:
                    hit = valid & (self.colors[target] == color)
                    js = np.nonzero(hit)[0]
                    if js.size == 0:
                        continue
                    ps = target[js]
                    for i in range(self.m):
                        rows.append(i * self.points + js)
                        cols.append(q * self.points + ps)
                        vals.append(diff[i, js] / delta[ps])
        matrix = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
        return matrix.tocsc()

    def build(self, residual: Callable, x: np.ndarray, r0: np.ndarray, fd_eps: float):
        return scipy.sparse.linalg.splu(self.matrix(residual, x, r0, fd_eps))


def _dense_jacobian(residual: Callable, x: np.ndarray, r0: np.ndarray, fd_eps: float):
    matrix = np.empty((r0.size, x.size))
    for j in range(x.size):
        trial = x.copy()
        step = fd_eps * max(1.0, abs(x[j]))
        trial[j] += step
        matrix[:, j] = (residual(trial) - r0) / step
    return scipy.linalg.lu_factor(matrix, check_finite=True)


# ═══════════════════════════════════════════════════════════════
# ONE STEP
# ═══════════════════════════════════════════════════════════════

def advance_step(problem: MultiplierProblem, state: FieldState,
                 grids: Tuple[TimeGrid, SpatialGrid], config: SolverConfig) -> StepOutcome:
    """
    Advance `state` by one level.

    The predictor fills the new level, then damped Newton drives the residual
    at every equation-box point below tolerance. Points outside the box (on
    bounded axes) keep their previous values. On rejection `state` is left
    exactly as it was.

    Returns:
        StepOutcome (accepted or with a rejection_reason)
    """
    time_grid, grid = grids
    backup = state.copy()
    box = grid.equation_box(problem.stencil.reach)
    sel = (slice(None),) + box

    predicted = _predict(state, config.predictor)
    newest = state.values[0].copy()
    newest[sel] = predicted[sel]
    state.rotate(newest)

    times = state_times(state, time_grid)
    tau = time_grid.tau
    work = state.values.copy()
    guard = MultiplierGuard()
    box_shape = work[0][sel].shape

    def evaluate(x: np.ndarray) -> Tuple[np.ndarray, Assembly]:
        work[0][sel] = x.reshape(box_shape)
        assembly = assemble_residual_field(problem, work, times, tau, grid, guard=guard, region=box)
        return assembly.residual[sel].ravel(), assembly

    def residual_only(x: np.ndarray) -> np.ndarray:
        return evaluate(x)[0]

    tol = config.residual_tol

    def reject(reason: str, message: str, iterations: int = 0, norm: float = np.inf,
               bound: float = tol) -> StepOutcome:
        state.values[...] = backup.values
        state.step = backup.step
        state.history = backup.history
        logger.warning("%s step %d rejected (%s): %s", problem.name, backup.step + 1, reason, message)
        return StepOutcome(step=backup.step + 1, time=float(times[0]), accepted=False,
                           iterations=iterations, residual_norm=norm, tolerance=bound,
                           acceptance=norm / bound, rejection_reason=reason, message=message)

    x = work[0][sel].ravel().copy()
    try:
        r, assembly = evaluate(x)
    except SingularMultiplierError as exc:
        return reject(REJECT_SINGULAR, str(exc))
    except InadmissibleStateError as exc:
        return reject(REJECT_INADMISSIBLE, str(exc))

    norm = float(np.max(np.abs(r))) if r.size else 0.0
    bound = assembly.tolerance(tol, box)
    colored = ColoredJacobian(problem, grid, box) if grid.dim else None
    factor = None
    iterations = 0
    polishing = False

    while iterations < config.max_iters:
        if norm <= bound:
            if not config.polish or polishing:
                break
            polishing = True
        if not np.isfinite(norm):
            return reject(REJECT_NONCONVERGENCE, "residual not finite", iterations, norm, bound)

        try:
            if factor is None:
                factor = (colored.build(residual_only, x, r, config.jacobian_fd_eps) if colored
                          else _dense_jacobian(residual_only, x, r, config.jacobian_fd_eps))
            dx = factor.solve(-r) if colored else scipy.linalg.lu_solve(factor, -r)
        except (SingularMultiplierError, InadmissibleStateError, RuntimeError, ValueError,
                np.linalg.LinAlgError) as exc:
            if polishing:
                break
            return reject(REJECT_NONCONVERGENCE, f"Jacobian failed: {exc}", iterations, norm, bound)
        if not np.all(np.isfinite(dx)):
            if polishing:
                break
            return reject(REJECT_NONCONVERGENCE, "singular Jacobian", iterations, norm, bound)

        alpha = 1.0
        accepted_trial = None
        last_error = None
        for _ in range(config.max_halvings + 1):
            trial = x + alpha * dx
            try:
                r_trial, assembly_trial = evaluate(trial)
            except (SingularMultiplierError, InadmissibleStateError) as exc:
                last_error = exc
                alpha *= 0.5
                continue
            norm_trial = float(np.max(np.abs(r_trial)))
            bound_trial = assembly_trial.tolerance(tol, box)
            within = norm_trial <= bound_trial
            decreased = norm_trial < norm
            if (decreased and within) if polishing else (decreased or within):
                accepted_trial = (trial, r_trial, assembly_trial, norm_trial, bound_trial)
                break
            last_error = None
            alpha *= 0.5

        if accepted_trial is None:
            work[0][sel] = x.reshape(box_shape)
            # stagnation at rounding is settled by the final check
            if polishing or assembly.at_rounding(tol, box):
                break
            if isinstance(last_error, SingularMultiplierError):
                return reject(REJECT_SINGULAR, str(last_error), iterations, norm, bound)
            if isinstance(last_error, InadmissibleStateError):
                return reject(REJECT_INADMISSIBLE, str(last_error), iterations, norm, bound)
            return reject(REJECT_NONCONVERGENCE, f"no decrease from {norm:.3e}", iterations, norm, bound)

        previous = norm
        x, r, assembly, norm, bound = accepted_trial
        iterations += 1
        logger.debug("%s step %d newton %d: |F| %.3e (alpha %.3g)",
                     problem.name, state.step, iterations, norm, alpha)
        if polishing:
            break
        # keep the factorization while convergence is fast
        if alpha < 1.0 or norm > 0.25 * previous:
            factor = None

    work[0][sel] = x.reshape(box_shape)
    floor_limited = False
    if not norm <= bound:
        if not (np.isfinite(norm) and assembly.at_rounding(tol, box)):
            return reject(REJECT_NONCONVERGENCE,
                          f"|F| {norm:.3e} not within {bound:.3e} after {iterations} iterations",
                          iterations, norm, bound)
        bound = norm
        floor_limited = True
    reference = max(tol, assembly.level_floor)
    # zero-compatible problems bound the amplification through their guard instead
    if problem.zero_compat is None and bound > config.max_floor_ratio * reference:
        return reject(REJECT_SINGULAR,
                      f"attainable residual {bound:.3e} exceeds {config.max_floor_ratio:g} x {reference:.3e}"
                      f" (gamma {assembly.gamma:.3e})", iterations, norm, bound)
    if bound > tol:
        logger.debug("%s step %d: tolerance raised to %.3e%s", problem.name, state.step, bound,
                     " (stagnated at rounding)" if floor_limited else "")
    state.values[0][sel] = x.reshape(box_shape)
    if not state.is_finite():
        return reject(REJECT_NONCONVERGENCE, "non-finite values in the accepted state", iterations, norm, bound)
    return StepOutcome(step=state.step, time=float(times[0]), accepted=True, iterations=iterations,
                       residual_norm=norm, tolerance=bound, acceptance=norm / bound,
                       floor_limited=floor_limited, gamma=assembly.gamma, assembly=assembly)


# ═══════════════════════════════════════════════════════════════
# INTEGRATION
# ═══════════════════════════════════════════════════════════════

def integrate(problem: MultiplierProblem, initial_data: Dict, T: Optional[float],
              grids: Tuple[TimeGrid, SpatialGrid], config: Optional[SolverConfig] = None,
              observers: Sequence[Callable] = ()) -> IntegrationResult:
    """
    Startup plus N = floor(T / tau) steps.

    Args:
        T: horizon; None keeps time_grid.steps
        grids: (TimeGrid, SpatialGrid)
        observers: called as observer(k, t_k, read-only state, report rows)
            after every accepted step

    Returns:
        IntegrationResult; aborted=True with the failing outcome when a step
        is rejected
    """
    config = config or SolverConfig()
    time_grid, grid = grids
    if T is not None:
        time_grid = TimeGrid.from_horizon(time_grid.t0, time_grid.tau, T)
    if grid.dim:
        grid.check_extent(problem.stencil.reach)

    state = startup_levels(problem, initial_data, config, time_grid, grid)
    report = ConservationReport(problem=problem.name, components=problem.s)
    times = [time_grid.time(k) for k in range(state.step + 1)]
    trajectory = [state.values[l].copy() for l in range(state.step, -1, -1)]
    report.add_rows(startup_rows(problem, state, time_grid, grid))

    outcomes: List[StepOutcome] = []
    failure = None
    while state.step < time_grid.steps:
        outcome = advance_step(problem, state, (time_grid, grid), config)
        if not outcome.accepted:
            failure = outcome
            report.fail(outcome)
            break
        rows = step_rows(problem, state, time_grid, grid, outcome)
        report.add_rows(rows)
        report.note_gamma(outcome.gamma)
        report.note_tolerance(outcome.tolerance, config.residual_tol)
        outcome.assembly = None
        outcomes.append(outcome)
        trajectory.append(state.values[0].copy())
        times.append(outcome.time)
        for observer in observers:
            observer(state.step, outcome.time, state.read_only(), rows)

    logger.debug("%s: %d steps, aborted=%s", problem.name, len(outcomes), failure is not None)
    return IntegrationResult(problem=problem.name, times=np.array(times), trajectory=np.array(trajectory),
                             report=report, outcomes=outcomes, aborted=failure is not None, failure=failure)
