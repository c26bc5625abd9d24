"""
grid_module.py - Uniform time/space meshes and discrete field storage
---------------------------------------------------------------------
Handles:
- TimeGrid: uniform steps t_k = t0 + k*tau
- SpatialGrid: rectangular, 0-2 dimensional, periodic or bounded per axis
- FieldState: (level, component, *multi-index) array, level 0 = newest
- boundary enumeration, stencil shifts and the equation box of a stencil

Arrays carry the spatial axes LAST so the same code serves ODEs (no spatial
axes) and PDEs.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import StencilRangeError

logger = logging.getLogger(__name__)

PERIODIC = "periodic"
BOUNDARY = "boundary"

# (min offset, max offset) per spatial axis
Reach = Tuple[Tuple[int, int], ...]


# ═══════════════════════════════════════════════════════════════
# TIME GRID
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TimeGrid:
    t0: float
    tau: float
    steps: int

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")

    @classmethod
    def from_horizon(cls, t0: float, tau: float, T: float) -> "TimeGrid":
        """N = floor(T/tau), tolerant to the rounding of T/tau."""
        ratio = T / tau
        steps = int(math.floor(ratio + 1e-9 * max(1.0, ratio)))
        return cls(t0=float(t0), tau=float(tau), steps=max(steps, 0))

    @classmethod
    def from_steps(cls, t0: float, T: float, steps: int) -> "TimeGrid":
        if steps < 1:
            raise ValueError("steps must be >= 1 when the step count is given")
        return cls(t0=float(t0), tau=float(T) / steps, steps=int(steps))

    def time(self, k: int) -> float:
        return self.t0 + k * self.tau

    def times(self) -> np.ndarray:
        return np.array([self.time(k) for k in range(self.steps + 1)])

    @property
    def horizon(self) -> float:
        return self.time(self.steps)


# ═══════════════════════════════════════════════════════════════
# SPATIAL GRID
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class SpatialGrid:
    """
    Uniform rectangular mesh.

    dim 0 is the ODE case: no spatial axes, h unused.
    """
    dim: int = 0
    h: float = 1.0
    extent: Tuple[int, ...] = ()
    boundary_mode: Tuple[str, ...] = ()
    origin: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim not in (0, 1, 2):
            raise ValueError(f"spatial dimension must be 0, 1 or 2, got {self.dim}")
        if len(self.extent) != self.dim or len(self.boundary_mode) != self.dim:
            raise ValueError("extent and boundary_mode need one entry per axis")
        if self.dim and not self.h > 0:
            raise ValueError(f"mesh width must be positive, got {self.h}")
        for mode in self.boundary_mode:
            if mode not in (PERIODIC, BOUNDARY):
                raise ValueError(f"unknown boundary mode {mode!r}")
        if not self.origin:
            object.__setattr__(self, "origin", (0.0,) * self.dim)

    @classmethod
    def ode(cls) -> "SpatialGrid":
        return cls()

    @classmethod
    def from_domain(cls, domain: Sequence[Sequence[float]], extent: Sequence[int],
                    boundary: str = PERIODIC) -> "SpatialGrid":
        """
        Build a grid over a box.

        Periodic axes exclude the right end point (h = L/N); bounded axes
        include both ends (h = L/(N-1)). All axes must share one h.
        """
        widths = []
        for (lo, hi), n in zip(domain, extent):
            span = float(hi) - float(lo)
            widths.append(span / n if boundary == PERIODIC else span / (n - 1))
        if any(abs(w - widths[0]) > 1e-12 * abs(widths[0]) for w in widths):
            raise ValueError(f"axes need equal mesh widths, got {widths}")
        dim = len(extent)
        return cls(dim=dim, h=widths[0], extent=tuple(int(n) for n in extent),
                   boundary_mode=(boundary,) * dim,
                   origin=tuple(float(lo) for lo, _ in domain))

    @property
    def periodic(self) -> Tuple[bool, ...]:
        return tuple(mode == PERIODIC for mode in self.boundary_mode)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.extent)) if self.dim else 1

    def coordinates(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.h * np.arange(self.extent[axis])

    def mesh(self) -> List[np.ndarray]:
        """Coordinate arrays shaped like the grid (ij indexing)."""
        axes = [self.coordinates(i) for i in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij")) if axes else []

    def point(self, J: Sequence[int]) -> np.ndarray:
        return np.array([self.origin[i] + self.h * J[i] for i in range(self.dim)])

    def shifted(self, arr: np.ndarray, axis: int, offset: int) -> np.ndarray:
        """
        Whole-field shift: result[..., J] = arr[..., J + offset*e_axis].

        Always wraps; on bounded axes the wrapped values are only garbage
        outside the equation box and never reach an enforced equation.
        """
        if offset == 0:
            return arr
        return np.roll(arr, -offset, axis=arr.ndim - self.dim + axis)

    def equation_box(self, reach: Reach) -> Tuple[slice, ...]:
        """Index box where a stencil with the given reach stays inside the grid."""
        box = []
        for axis in range(self.dim):
            n = self.extent[axis]
            lo_off, hi_off = reach[axis] if axis < len(reach) else (0, 0)
            if self.periodic[axis]:
                box.append(slice(0, n))
                continue
            lo = max(0, -lo_off)
            hi = n - 1 - max(0, hi_off)
            if hi < lo:
                raise StencilRangeError(
                    f"axis {axis}: extent {n} too small for stencil reach {reach[axis]}")
            box.append(slice(lo, hi + 1))
        return tuple(box)

    def flux_faces(self, box: Tuple[slice, ...]) -> List[Tuple[int, int, int]]:
        """
        Faces of the equation box as (axis, index, outward sign).

        Summing backward differences over the box leaves phi at the last box
        index (sign +1) minus phi just below the first one (sign -1).
        """
        faces = []
        for axis in range(self.dim):
            if self.periodic[axis]:
                continue
            faces.append((axis, box[axis].start - 1, -1))
            faces.append((axis, box[axis].stop - 1, +1))
        return faces

    def check_extent(self, reach: Reach):
        """Every axis must hold the full stencil width."""
        for axis in range(self.dim):
            lo_off, hi_off = reach[axis]
            width = hi_off - lo_off + 1
            if self.extent[axis] < width:
                raise StencilRangeError(
                    f"axis {axis}: extent {self.extent[axis]} below stencil width {width}")


# ═══════════════════════════════════════════════════════════════
# BOUNDARY AND STENCIL ACCESS
# ═══════════════════════════════════════════════════════════════

def boundary_indices(grid: SpatialGrid) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """
    Enumerate boundary points with their outward normals.

    Args:
        grid: spatial grid with dim >= 1

    Returns:
        list of (J, nu) with nu[i] = -1/+1 where J sits on the lower/upper
        face of a bounded axis i, 0 elsewhere; corners appear once carrying
        every face they touch. Empty when all axes are periodic.
    """
    if grid.dim == 0:
        raise ValueError("boundary_indices needs a spatial grid (dim >= 1)")

    result = []
    for J in itertools.product(*(range(n) for n in grid.extent)):
        normal = [0] * grid.dim
        for axis, j in enumerate(J):
            if grid.periodic[axis]:
                continue
            if j == 0:
                normal[axis] = -1
            elif j == grid.extent[axis] - 1:
                normal[axis] = 1
        if any(normal):
            result.append((tuple(J), tuple(normal)))
    return result


def interior_indices(grid: SpatialGrid) -> List[Tuple[int, ...]]:
    on_boundary = {J for J, _ in boundary_indices(grid)}
    return [J for J in itertools.product(*(range(n) for n in grid.extent))
            if J not in on_boundary]


def shift(state: "FieldState", grid: SpatialGrid, J: Sequence[int], axis: int,
          offset: int, level: int = 0) -> np.ndarray:
    """
    Value (m-vector) at J + offset*e_axis on one time level.

    Periodic axes wrap; bounded axes raise StencilRangeError out of range.
    """
    index = list(J)
    n = grid.extent[axis]
    target = index[axis] + offset
    if grid.periodic[axis]:
        target %= n
    elif not 0 <= target < n:
        raise StencilRangeError(
            f"index {target} outside axis {axis} of extent {n} (J={tuple(J)}, offset {offset})")
    index[axis] = target
    return state.values[(level, slice(None)) + tuple(index)].copy()


# ═══════════════════════════════════════════════════════════════
# FIELD STATE
# ═══════════════════════════════════════════════════════════════

@dataclass
class FieldState:
    """
    Retained time levels of an m-component discrete solution.

    values[0] is level `step` (the newest), values[l] is level step - l.
    `history` keeps the level dropped by the last rotation so two-level
    schemes can still extrapolate.
    """
    values: np.ndarray
    step: int = 0
    history: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def levels(self) -> int:
        return self.values.shape[0]

    @property
    def components(self) -> int:
        return self.values.shape[1]

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return self.values.shape[2:]

    def level(self, l: int) -> np.ndarray:
        return self.values[l]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def rotate(self, newest: np.ndarray):
        """Shift k -> k-1 -> k-2 by copying, then place `newest` in slot 0."""
        self.history = self.values[-1].copy()
        self.values[1:] = self.values[:-1].copy()
        self.values[0] = newest
        self.step += 1

    def copy(self) -> "FieldState":
        return FieldState(values=self.values.copy(), step=self.step,
                          history=None if self.history is None else self.history.copy())

    def read_only(self) -> "FieldState":
        view = self.values.view()
        view.flags.writeable = False
        return FieldState(values=view, step=self.step, history=self.history)
