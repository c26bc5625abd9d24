"""
scheme_module.py - Multiplier-method residual assembly
------------------------------------------------------
Builds the conservative form D_t psi + D_x.Phi from a problem's discrete
density and flux, then recovers the scheme residual by solving with the
discrete multiplier at every mesh point:

- scalar:       F = (D_t psi + D_x.phi) / lambda
- system:       Lambda F = D_t psi + D_x.Phi            (per-point m x m solve)
- rectangular:  Lambda~ F~ = D_t psi + D_x.Phi - Sigma G, output (F~, G)

Points where the multiplier is numerically singular switch to the problem's
zero-compatible branch; without one the assembly raises.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import SingularMultiplierError, StencilRangeError
from grid_module import FieldState, SpatialGrid, TimeGrid
from problems_module import MultiplierProblem

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
GUARD_FACTOR = 1e6 * EPS
NOISE_FACTOR = 64.0


# ═══════════════════════════════════════════════════════════════
# TYPES
# ═══════════════════════════════════════════════════════════════

@dataclass
class MultiplierGuard:
    """
    Singularity threshold for one step.

    The threshold is factor * scale where scale is the largest multiplier
    magnitude seen so far in the step (never below 1).
    """
    factor: float = GUARD_FACTOR
    scale: float = 1.0

    def update(self, magnitude: float):
        if np.isfinite(magnitude):
            self.scale = max(self.scale, float(magnitude))

    def threshold(self, problem: MultiplierProblem) -> float:
        factor = self.factor
        if problem.zero_compat is not None:
            factor = max(factor, problem.zero_compat.guard)
        return factor * self.scale


@dataclass
class Assembly:
    """Residual field plus what the solver and the accounting need from it."""
    residual: np.ndarray            # (m, *shape)
    conservative: np.ndarray        # (s, *shape)
    time_derivative: np.ndarray     # (s, *shape)
    multiplier: np.ndarray          # (s, m, *shape)
    g: Optional[np.ndarray]         # (m - s, *shape)
    multiplier_branch: np.ndarray   # bool (*shape)
    rhs: np.ndarray                 # (s, *shape) Lambda~ F~ = conservative - Sigma G
    term_scale: np.ndarray          # (s, *shape) magnitude of the summed terms
    inverse_norm: np.ndarray        # (*shape) ||Lambda~^-1||_2 on multiplier-branch points, else 0
    gamma: float                    # max of inverse_norm
    level_floor: float              # rounding floor of G and of the zero-compatible branch

    def floor(self, box: Tuple[slice, ...]) -> float:
        """
        Smallest residual norm floating point can certify on the box.

        F~ entries inherit the rounding of their summed terms amplified by
        ||Lambda~^-1||; G entries and zero-compatible points carry the level floor.
        """
        sel = (slice(None),) + tuple(box)
        s = self.rhs.shape[0]
        amplified = np.sqrt(s) * self.inverse_norm[tuple(box)] * np.max(self.term_scale[sel], axis=0)
        floor = NOISE_FACTOR * EPS * float(np.max(amplified, initial=0.0))
        if self.g is not None or not np.all(self.multiplier_branch[tuple(box)]):
            floor = max(floor, self.level_floor)
        return floor

    def tolerance(self, residual_tol: float, box: Tuple[slice, ...]) -> float:
        """residual_tol, raised to the floor where the floor is higher."""
        return max(residual_tol, self.floor(box))

    def at_rounding(self, residual_tol: float, box: Tuple[slice, ...]) -> bool:
        """
        True when every entry is down to the rounding of the terms it is
        solved from: the conservative residual of each F~ entry within
        64 eps of its terms, G and zero-compatible entries within the level floor.
        """
        sel = (slice(None),) + tuple(box)
        s = self.rhs.shape[0]
        loose = max(residual_tol, self.level_floor)
        head = np.abs(self.residual[:s][sel])
        noise = NOISE_FACTOR * EPS * np.maximum(self.term_scale[sel], np.finfo(float).tiny)
        settled = (head <= residual_tol) | (np.abs(self.rhs[sel]) <= noise)
        settled = np.where(self.multiplier_branch[tuple(box)], settled, head <= loose)
        if self.residual.shape[0] > s:
            return bool(np.all(settled)) and bool(np.all(np.abs(self.residual[s:][sel]) <= loose))
        return bool(np.all(settled))


def state_times(state: FieldState, time_grid: TimeGrid) -> np.ndarray:
    return np.array([time_grid.time(state.step - l) for l in range(state.levels)])


def _region_mask(shape: Tuple[int, ...], region) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=bool)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        return region
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(region)] = True
    return mask


# ═══════════════════════════════════════════════════════════════
# CONSERVATIVE FORM (whole field)
# ═══════════════════════════════════════════════════════════════

def time_derivative_field(problem: MultiplierProblem, levels: np.ndarray, times: np.ndarray,
                          tau: float, grid: SpatialGrid) -> Tuple[np.ndarray, np.ndarray]:
    """(psi(newer window) - psi(older window)) / tau and the magnitude of its terms."""
    width = levels.shape[0] - 1
    density = problem.discrete.density
    newer = density(levels[:width], times[:width], tau, grid)
    older = density(levels[1:], times[1:], tau, grid)
    return (newer - older) / tau, (np.abs(newer) + np.abs(older)) / tau


def flux_divergence_field(problem: MultiplierProblem, levels: np.ndarray, times: np.ndarray,
                          tau: float, grid: SpatialGrid) -> Tuple[np.ndarray, np.ndarray]:
    """sum_i (phi_i[J] - phi_i[J - e_i]) / h on the newer window."""
    width = levels.shape[0] - 1
    if problem.discrete.flux is None or grid.dim == 0:
        zero = np.zeros((problem.s,) + levels.shape[2:])
        return zero, zero
    phi = problem.discrete.flux(levels[:width], times[:width], tau, grid)
    divergence = np.zeros((problem.s,) + levels.shape[2:])
    magnitude = np.zeros_like(divergence)
    for axis in range(grid.dim):
        here = phi[:, axis]
        behind = grid.shifted(here, axis, -1)
        divergence = divergence + (here - behind) / grid.h
        magnitude = magnitude + (np.abs(here) + np.abs(behind)) / grid.h
    return divergence, magnitude


# ═══════════════════════════════════════════════════════════════
# RESIDUAL ASSEMBLY (whole field)
# ═══════════════════════════════════════════════════════════════

def assemble_residual_field(problem: MultiplierProblem, levels: np.ndarray, times: np.ndarray,
                            tau: float, grid: SpatialGrid,
                            guard: Optional[MultiplierGuard] = None,
                            region=None) -> Assembly:
    """
    Assemble F^{tau,h} at every point of the field.

    Args:
        levels: (L, m, *shape) with levels[0] the newest
        times: (L,) level times
        guard: step-wide multiplier guard (fresh one if None)
        region: slices or boolean mask where equations are enforced;
            singularities outside it are ignored

    Raises:
        InadmissibleStateError, SingularMultiplierError
    """
    problem.check_admissible(levels)
    guard = guard or MultiplierGuard()
    shape = levels.shape[2:]
    mask = _region_mask(shape, region)
    s, m = problem.s, problem.m

    dt, dt_scale = time_derivative_field(problem, levels, times, tau, grid)
    dx, dx_scale = flux_divergence_field(problem, levels, times, tau, grid)
    conservative = dt + dx
    term_scale = dt_scale + dx_scale

    lam = problem.discrete.multiplier(levels, times, tau, grid)
    g = None
    rhs = conservative
    if problem.rectangular:
        g = problem.discrete.g(levels, times, tau, grid)
        sigma = lam[:, s:]
        rhs = conservative - np.einsum("ij...,j...->i...", sigma, g)
        term_scale = term_scale + np.einsum("ij...,j...->i...", np.abs(sigma), np.abs(g))
    block = lam[:, :s]

    if s == 1:
        sigma_min = np.abs(block[0, 0])
        sigma_max = sigma_min
    else:
        matrices = np.moveaxis(block, (0, 1), (-2, -1))
        singular_values = np.linalg.svd(matrices, compute_uv=False)
        sigma_min = singular_values[..., -1]
        sigma_max = singular_values[..., 0]

    guard.update(np.max(np.where(mask, sigma_max, 0.0)))
    threshold = guard.threshold(problem)
    singular = (sigma_min <= threshold) & mask

    if np.any(singular) and problem.zero_compat is None:
        point = tuple(int(i) for i in np.argwhere(np.atleast_1d(singular))[0]) if shape else ()
        value = float(np.min(np.where(singular, sigma_min, np.inf)))
        raise SingularMultiplierError(
            f"{problem.name}: multiplier singular at {point} (|lambda| ~ {value:.3e}, guard {threshold:.3e})",
            point=point, value=value)

    if s == 1:
        solved = rhs / np.where(singular, 1.0, block[0, 0])
    else:
        identity = np.eye(s)
        safe = np.where(singular[..., None, None], identity, matrices)
        solution = np.linalg.solve(safe, np.moveaxis(rhs, 0, -1)[..., None])[..., 0]
        solved = np.moveaxis(solution, -1, 0)

    residual = np.concatenate([solved, g], axis=0) if g is not None else solved
    if np.any(singular):
        limit = problem.zero_compat.limit_eval(levels, times, tau, grid)
        residual = np.where(singular, limit, residual)
        logger.debug("%s: zero-compatible branch at %d point(s)", problem.name, int(np.sum(singular)))

    regular = mask & ~singular
    inverse_norm = np.where(regular, 1.0 / np.where(regular, sigma_min, 1.0), 0.0)
    gamma = float(np.max(inverse_norm)) if np.any(regular) else 0.0

    level_scale = float(np.max(np.abs(levels[:, :, mask]))) if np.any(mask) else 0.0
    level_scale /= tau ** (problem.stencil.time_levels - 1)

    return Assembly(
        residual=residual,
        conservative=conservative,
        time_derivative=dt,
        multiplier=lam,
        g=g,
        multiplier_branch=~singular,
        rhs=rhs,
        term_scale=term_scale,
        inverse_norm=inverse_norm,
        gamma=gamma,
        level_floor=NOISE_FACTOR * EPS * level_scale,
    )


# ═══════════════════════════════════════════════════════════════
# POINT OPERATIONS
# ═══════════════════════════════════════════════════════════════

def _check_point(problem: MultiplierProblem, grid: SpatialGrid, J: Sequence[int]):
    if grid.dim == 0:
        return
    box = grid.equation_box(problem.stencil.reach)
    for axis, j in enumerate(J):
        if not box[axis].start <= j < box[axis].stop:
            raise StencilRangeError(
                f"{problem.name}: stencil at J={tuple(J)} leaves bounded axis {axis}")


def _point_region(grid: SpatialGrid, J: Sequence[int]):
    return tuple(slice(j, j + 1) for j in J)


def _point_assembly(problem, state, grid, J, time_grid, report):
    _check_point(problem, grid, J)
    assembly = assemble_residual_field(problem, state.values, state_times(state, time_grid),
                                       time_grid.tau, grid, region=_point_region(grid, J))
    if report is not None:
        report.note_gamma(assembly.gamma)
    return assembly


def discrete_time_derivative(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                             J: Sequence[int], time_grid: TimeGrid) -> np.ndarray:
    """(psi_k,J - psi_{k-1},J) / tau, an s-vector."""
    dt, _ = time_derivative_field(problem, state.values, state_times(state, time_grid),
                                  time_grid.tau, grid)
    return dt[(slice(None),) + tuple(J)]


def discrete_flux_divergence(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                             J: Sequence[int], time_grid: TimeGrid) -> np.ndarray:
    """sum_i (phi_i,J - phi_i,J-e_i) / h, an s-vector."""
    if problem.n == 0:
        raise ValueError(f"{problem.name} has no spatial flux")
    _check_point(problem, grid, J)
    dx, _ = flux_divergence_field(problem, state.values, state_times(state, time_grid),
                                  time_grid.tau, grid)
    return dx[(slice(None),) + tuple(J)]


def conservative_form_residual(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                               J: Sequence[int], time_grid: TimeGrid) -> np.ndarray:
    """
    D_t psi + D_x.Phi at J (s-vector).

    Equals the full multiplier (Lambda~ | Sigma) applied to the assembled residual.
    """
    _check_point(problem, grid, J)
    times = state_times(state, time_grid)
    dt, _ = time_derivative_field(problem, state.values, times, time_grid.tau, grid)
    dx, _ = flux_divergence_field(problem, state.values, times, time_grid.tau, grid)
    return (dt + dx)[(slice(None),) + tuple(J)]


def assemble_scalar_residual(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                             J: Sequence[int], time_grid: TimeGrid, report=None) -> float:
    if not problem.m == problem.s == 1:
        raise ValueError(f"{problem.name} is not a scalar problem (m={problem.m}, s={problem.s})")
    assembly = _point_assembly(problem, state, grid, J, time_grid, report)
    return float(assembly.residual[(0,) + tuple(J)])


def assemble_system_residual(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                             J: Sequence[int], time_grid: TimeGrid, report=None) -> np.ndarray:
    if problem.m != problem.s:
        raise ValueError(f"{problem.name} is rectangular; use assemble_rectangular_residual")
    assembly = _point_assembly(problem, state, grid, J, time_grid, report)
    return assembly.residual[(slice(None),) + tuple(J)]


def assemble_rectangular_residual(problem: MultiplierProblem, state: FieldState, grid: SpatialGrid,
                                  J: Sequence[int], time_grid: TimeGrid, report=None) -> np.ndarray:
    """Stacked (F~, G); with s = m this is the square-system residual."""
    assembly = _point_assembly(problem, state, grid, J, time_grid, report)
    return assembly.residual[(slice(None),) + tuple(J)]


# ═══════════════════════════════════════════════════════════════
# STENCIL DRY RUN
# ═══════════════════════════════════════════════════════════════

def stencil_dry_run(problem: MultiplierProblem, tau: float = 0.1, h: float = 0.1,
                    seed: int = 0) -> dict:
    """
    Perturb one point per level and component; every residual that moves must
    lie within the declared reach.

    Returns:
        dict with "ok" and a list of "violations" (level, offset)
    """
    rng = np.random.default_rng(seed)
    reach = problem.stencil.reach
    extent = tuple(2 * (hi - lo + 1) + 5 for lo, hi in reach)
    grid = SpatialGrid(dim=problem.n, h=h, extent=extent, boundary_mode=("periodic",) * problem.n)
    levels = problem.state_sampler(rng, extent)
    times = np.array([1.0 - l * tau for l in range(levels.shape[0])])
    base = assemble_residual_field(problem, levels, times, tau, grid).residual

    centre = tuple(n // 2 for n in extent)
    violations = []
    for level, component in itertools.product(range(levels.shape[0]), range(problem.m)):
        bumped = levels.copy()
        bumped[(level, component) + centre] += 1e-3
        moved = assemble_residual_field(problem, bumped, times, tau, grid).residual
        changed = np.any(np.abs(moved - base) > 0.0, axis=0)
        for J in np.argwhere(np.atleast_1d(changed)) if extent else []:
            offset = tuple(int(c - j) for c, j in zip(centre, J))
            if any(not lo <= o <= hi for o, (lo, hi) in zip(offset, reach)):
                violations.append({"level": level, "component": component, "offset": offset})
    if violations:
        logger.warning("%s: stencil reach %s violated: %s", problem.name, reach, violations[:5])
    return {"ok": not violations, "reach": reach, "violations": violations}
