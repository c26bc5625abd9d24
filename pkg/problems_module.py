"""
problems_module.py - Built-in multiplier-method problems
--------------------------------------------------------
Each problem bundles:
- the continuous equation F, multiplier Lambda, density psi and flux Phi
  (evaluated from the derivatives of a smooth field at one point)
- the discrete counterparts on the mesh (density, flux, multiplier, G)
- stencil, admissible set, startup data and experiment defaults

Discrete operator signatures (arrays carry spatial axes last):
    density(window, times, tau, grid)   -> (s, *shape)
    flux(window, times, tau, grid)      -> (s, n, *shape)
    multiplier(levels, times, tau, grid) -> (s, m, *shape)
    g(levels, times, tau, grid)         -> (m - s, *shape)
`levels[0]` is the newest level. `window` is the slice of levels a single
density value reads (levels[0:L-1] for the newer one).

Continuous operator signatures take (t, D) where D(nt, nx) returns the
m-vector of partial derivatives d^nt/dt^nt d^nx/dx^nx of the field.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import InadmissibleStateError, ParameterRangeError, UnknownProblemError
from grid_module import Reach, SpatialGrid

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
ZERO_COMPAT_GUARD = math.sqrt(EPS)
TWO_PI = 2.0 * math.pi


# ═══════════════════════════════════════════════════════════════
# DOMAIN TYPES
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class Stencil:
    """time_levels: 2 or 3; reach: per-axis (min, max) offsets the residual reads."""
    time_levels: int
    reach: Reach = ()


@dataclass(frozen=True)
class DiscreteOperators:
    density: Callable
    multiplier: Callable
    flux: Optional[Callable] = None
    g: Optional[Callable] = None


@dataclass(frozen=True)
class ZeroCompatData:
    """
    Guarded branch for multiplier zeros.

    limit_eval returns the full residual (m, *shape). For scalar schemes it is
    the ratio of order-th derivatives of D_t psi and lambda with respect to the
    newest unknown; for systems only an exact algebraic factorization of the
    scheme qualifies. guard is relative to the multiplier scale.
    """
    order: int
    limit_eval: Callable
    guard: float = ZERO_COMPAT_GUARD


@dataclass(frozen=True)
class ContinuousOperators:
    equation: Callable
    multiplier: Callable
    density: Callable
    flux: Optional[Callable] = None


@dataclass(frozen=True)
class ParamSpec:
    default: float
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    exclusive_minimum: bool = False
    integer: bool = False

    def check(self, name: str, value) -> float:
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ParameterRangeError(f"parameter {name!r} must be a number, got {value!r}")
        if not math.isfinite(value):
            raise ParameterRangeError(f"parameter {name!r} must be finite")
        if self.integer:
            if value != int(value):
                raise ParameterRangeError(f"parameter {name!r} must be an integer, got {value}")
            value = int(value)
        if self.minimum is not None:
            if value < self.minimum or (self.exclusive_minimum and value == self.minimum):
                bound = ">" if self.exclusive_minimum else ">="
                raise ParameterRangeError(f"parameter {name!r} must be {bound} {self.minimum}, got {value}")
        if self.maximum is not None and value > self.maximum:
            raise ParameterRangeError(f"parameter {name!r} must be <= {self.maximum}, got {value}")
        return value


@dataclass(frozen=True)
class MultiplierProblem:
    name: str
    m: int
    s: int
    n: int
    params: Dict[str, float]
    continuous: ContinuousOperators
    discrete: DiscreteOperators
    stencil: Stencil
    orders: Tuple[Optional[int], int]
    zero_compat: Optional[ZeroCompatData] = None
    admissible: Callable = field(default=lambda levels: True, repr=False)
    acceleration: Optional[Callable] = field(default=None, repr=False)
    exact_solution: Optional[Callable] = field(default=None, repr=False)
    initial_presets: Dict[str, Callable] = field(default_factory=dict, repr=False)
    defaults: Dict = field(default_factory=dict, repr=False)
    manufactured_field: Optional[Callable] = field(default=None, repr=False)
    sample_points: Tuple = ()
    state_sampler: Optional[Callable] = field(default=None, repr=False)
    trial_offset: Tuple[float, ...] = ()
    description: str = ""

    @property
    def rectangular(self) -> bool:
        return self.s < self.m

    @property
    def second_order_in_time(self) -> bool:
        return self.stencil.time_levels == 3

    def check_admissible(self, levels: np.ndarray):
        if not self.admissible(levels):
            raise InadmissibleStateError(f"{self.name}: state outside the admissible set")


# ═══════════════════════════════════════════════════════════════
# SMOOTH TRIAL FIELDS
# ═══════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TrigField:
    """
    u_i(t, x) = offset_i + sum_k amp_ik cos(omega_ik t + wave_ik . x + phase_ik)

    Every partial derivative is exact, so identity and consistency checks only
    approximate the operators under test.
    """
    offset: np.ndarray
    amplitude: np.ndarray
    omega: np.ndarray
    wave: np.ndarray
    phase: np.ndarray

    @classmethod
    def from_terms(cls, n: int, components: Sequence[Tuple[float, Sequence[Tuple]]]) -> "TrigField":
        """components: [(offset, [(amp, omega, wave, phase), ...]), ...]"""
        width = max(1, max(len(terms) for _, terms in components))
        m = len(components)
        amp = np.zeros((m, width))
        omega = np.zeros((m, width))
        wave = np.zeros((m, width, n))
        phase = np.zeros((m, width))
        offset = np.zeros(m)
        for i, (off, terms) in enumerate(components):
            offset[i] = off
            for k, (a, w, kv, ph) in enumerate(terms):
                amp[i, k], omega[i, k], phase[i, k] = a, w, ph
                wave[i, k, :] = kv
        return cls(offset, amp, omega, wave, phase)

    @classmethod
    def random(cls, m: int, n: int, rng: np.random.Generator, terms: int = 3,
               offset: Optional[Sequence[float]] = None, amplitude: float = 1.0) -> "TrigField":
        """Random trigonometric polynomial with sum of |amplitudes| <= amplitude per component."""
        amp = rng.uniform(0.2, 1.0, size=(m, terms))
        amp *= amplitude / amp.sum(axis=1, keepdims=True)
        return cls(
            offset=np.zeros(m) if offset is None else np.asarray(offset, dtype=float),
            amplitude=amp,
            omega=rng.uniform(-2.0, 2.0, size=(m, terms)),
            wave=rng.integers(-2, 3, size=(m, terms, n)).astype(float),
            phase=rng.uniform(0.0, TWO_PI, size=(m, terms)),
        )

    @property
    def components(self) -> int:
        return self.offset.shape[0]

    def derivative(self, t: float, x: Sequence[float], nt: int = 0, nx: Sequence[int] = ()) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        nx = tuple(nx) + (0,) * (self.wave.shape[2] - len(nx))
        order = nt + sum(nx)
        factor = self.omega ** nt
        for axis, p in enumerate(nx):
            factor = factor * self.wave[:, :, axis] ** p
        theta = self.omega * t + self.wave @ x + self.phase if x.size else self.omega * t + self.phase
        value = np.sum(self.amplitude * factor * np.cos(theta + order * math.pi / 2), axis=1)
        return value + self.offset if order == 0 else value

    def evaluator(self, t: float, x: Sequence[float]) -> Callable:
        def D(nt: int = 0, nx: Sequence[int] = ()) -> np.ndarray:
            return self.derivative(t, x, nt, nx)
        return D

    def sample(self, t: float, grid: SpatialGrid) -> np.ndarray:
        """Field values on the grid, shape (m, *extent)."""
        theta = self.omega * t + self.phase
        theta = theta.reshape(theta.shape + (1,) * grid.dim)
        for axis, coords in enumerate(grid.mesh()):
            theta = theta + self.wave[:, :, axis].reshape(self.wave.shape[:2] + (1,) * grid.dim) * coords
        amp = self.amplitude.reshape(self.amplitude.shape + (1,) * grid.dim)
        off = self.offset.reshape((-1,) + (1,) * grid.dim)
        return off + np.sum(amp * np.cos(theta), axis=1)


# ═══════════════════════════════════════════════════════════════
# SMALL HELPERS
# ═══════════════════════════════════════════════════════════════

def _rows(*rows):
    """Stack nested lists of equally shaped arrays into (rows, cols, *shape)."""
    return np.stack([np.stack(list(np.broadcast_arrays(*row))) for row in rows])


def _ode_preset(u0: Sequence[float], ut0: Optional[Sequence[float]] = None) -> Callable:
    def preset(grid: SpatialGrid, params: Dict) -> Dict:
        data = {"u0": np.array(u0, dtype=float)}
        if ut0 is not None:
            data["ut0"] = np.array(ut0, dtype=float)
        return data
    return preset


def _uniform_sampler(time_levels: int, lows: Sequence[float], highs: Sequence[float]) -> Callable:
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)

    def sampler(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
        size = (time_levels, lows.size) + tuple(shape)
        lo = lows.reshape((1, -1) + (1,) * len(shape))
        hi = highs.reshape((1, -1) + (1,) * len(shape))
        return lo + (hi - lo) * rng.random(size)
    return sampler


def _positive(levels: np.ndarray, components: Sequence[int]) -> bool:
    return bool(np.all(levels[:, list(components)] > 0))


# ═══════════════════════════════════════════════════════════════
# 1. PENDULUM
# ═══════════════════════════════════════════════════════════════

def _build_pendulum(p: Dict) -> MultiplierProblem:
    gl = p["g_over_l"]

    def density(w, times, tau, grid):
        new, old = w[0, 0], w[1, 0]
        return (0.5 * ((new - old) / tau) ** 2 - 0.5 * gl * (np.cos(new) + np.cos(old)))[None]

    def multiplier(u, times, tau, grid):
        return ((u[0, 0] - u[2, 0]) / (2 * tau))[None, None]

    def limit(u, times, tau, grid):
        # d(D_t psi)/d theta_new over d(lambda)/d theta_new
        return (2 * (u[0, 0] - u[1, 0]) / tau ** 2 + gl * np.sin(u[0, 0]))[None]

    continuous = ContinuousOperators(
        equation=lambda t, D: np.array([D(2)[0] + gl * np.sin(D(0)[0])]),
        multiplier=lambda t, D: np.array([[D(1)[0]]]),
        density=lambda t, D: np.array([0.5 * D(1)[0] ** 2 - gl * np.cos(D(0)[0])]),
    )
    return MultiplierProblem(
        name="pendulum", m=1, s=1, n=0, params=p,
        continuous=continuous,
        discrete=DiscreteOperators(density=density, multiplier=multiplier),
        stencil=Stencil(time_levels=3),
        orders=(None, 2),
        zero_compat=ZeroCompatData(order=1, limit_eval=limit),
        acceleration=lambda t, u, ut: -gl * np.sin(u),
        initial_presets={"default": _ode_preset([0.5], [0.0])},
        defaults={"T": 10.0, "N": 1000, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, [(0.0, [(0.5, 1.0, (), -math.pi / 2)])]),
        sample_points=((0.4, ()), (2.5, ()), (3.6, ())),
        state_sampler=_uniform_sampler(3, [-1.0], [1.0]),
        trial_offset=(0.0,),
        description="nonlinear pendulum, energy density",
    )


# ═══════════════════════════════════════════════════════════════
# 2. DAMPED HARMONIC OSCILLATOR
# ═══════════════════════════════════════════════════════════════

def _build_dho(p: Dict) -> MultiplierProblem:
    mass, k, gamma = p["m"], p["k"], p["gamma"]
    rate = gamma / (2 * mass)
    kappa = k - gamma ** 2 / (4 * mass)

    def density(w, times, tau, grid):
        y_new = np.exp(rate * times[0]) * w[0, 0]
        y_old = np.exp(rate * times[1]) * w[1, 0]
        return (0.5 * mass * ((y_new - y_old) / tau) ** 2
                + 0.5 * kappa * (0.5 * (y_new + y_old)) ** 2)[None]

    def multiplier(u, times, tau, grid):
        y_next = np.exp(rate * times[0]) * u[0, 0]
        y_prev = np.exp(rate * times[2]) * u[2, 0]
        return (np.exp(rate * times[1]) * (y_next - y_prev) / (2 * tau))[None, None]

    def factored(u, times, tau, grid):
        a = math.exp(rate * tau)
        nxt, cur, prv = a * u[0, 0], u[1, 0], u[2, 0] / a
        return (mass * (nxt - 2 * cur + prv) / tau ** 2 + kappa * (nxt + 2 * cur + prv) / 4)[None]

    def equation(t, D):
        return np.array([mass * D(2)[0] + gamma * D(1)[0] + k * D(0)[0]])

    def cont_multiplier(t, D):
        return np.array([[math.exp(2 * rate * t) * (D(1)[0] + rate * D(0)[0])]])

    def cont_density(t, D):
        x, xt = D(0)[0], D(1)[0]
        return np.array([0.5 * math.exp(2 * rate * t) * (mass * (xt + rate * x) ** 2 + kappa * x ** 2)])

    def exact(t, data, grid):
        if kappa <= 0:
            raise ParameterRangeError("closed-form solution needs an underdamped oscillator")
        omega = math.sqrt(kappa / mass)
        x0, v0 = float(data["u0"][0]), float(data["ut0"][0])
        s = t - data.get("t0", 0.0)
        b = (v0 + rate * x0) / omega
        return np.array([math.exp(-rate * s) * (x0 * math.cos(omega * s) + b * math.sin(omega * s))])

    return MultiplierProblem(
        name="dho", m=1, s=1, n=0, params=p,
        continuous=ContinuousOperators(equation, cont_multiplier, cont_density),
        discrete=DiscreteOperators(density=density, multiplier=multiplier),
        stencil=Stencil(time_levels=3),
        orders=(None, 2),
        zero_compat=ZeroCompatData(order=1, limit_eval=factored),
        acceleration=lambda t, u, ut: -(gamma * ut + k * u) / mass,
        exact_solution=exact,
        initial_presets={"default": _ode_preset([1.0], [0.0])},
        defaults={"T": 10.0, "N": 200, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, [(0.0, [(1.0, 1.0, (), -math.pi / 2)])]),
        sample_points=((0.3, ()), (1.0, ()), (2.6, ())),
        state_sampler=_uniform_sampler(3, [-1.0], [1.0]),
        trial_offset=(0.0,),
        description="damped oscillator via exponential transformation",
    )


# ═══════════════════════════════════════════════════════════════
# 3. TWO-BODY PROBLEM IN 1-D
# ═══════════════════════════════════════════════════════════════

def _build_two_body(p: Dict) -> MultiplierProblem:
    beta = p["beta"]

    def V(z):
        return 0.5 * z ** 2 + 0.25 * beta * z ** 4

    def dV(z):
        return z + beta * z ** 3

    def quotient(a, b):
        # (V(a) - V(b)) / (a - b) without the division
        return 0.5 * (a + b) + 0.25 * beta * (a + b) * (a * a + b * b)

    def density(w, times, tau, grid):
        d1 = w[0, 0] - w[1, 0]
        d2 = w[0, 1] - w[1, 1]
        z_new = w[0, 0] - w[0, 1]
        z_old = w[1, 0] - w[1, 1]
        momentum = (d1 + d2) / tau
        energy = 0.5 * (d1 / tau) ** 2 + 0.5 * (d2 / tau) ** 2 + 0.5 * (V(z_new) + V(z_old))
        return np.stack([momentum, energy])

    def multiplier(u, times, tau, grid):
        v1 = (u[0, 0] - u[2, 0]) / (2 * tau)
        v2 = (u[0, 1] - u[2, 1]) / (2 * tau)
        one = np.ones_like(v1)
        return _rows([one, one], [v1, v2])

    def factored(u, times, tau, grid):
        q = quotient(u[0, 0] - u[0, 1], u[2, 0] - u[2, 1])
        a1 = (u[0, 0] - 2 * u[1, 0] + u[2, 0]) / tau ** 2
        a2 = (u[0, 1] - 2 * u[1, 1] + u[2, 1]) / tau ** 2
        return np.stack([a1 + q, a2 - q])

    def equation(t, D):
        x, xtt = D(0), D(2)
        z = x[0] - x[1]
        return np.array([xtt[0] + dV(z), xtt[1] - dV(z)])

    def cont_multiplier(t, D):
        v = D(1)
        return np.array([[1.0, 1.0], [v[0], v[1]]])

    def cont_density(t, D):
        x, v = D(0), D(1)
        return np.array([v[0] + v[1], 0.5 * v[0] ** 2 + 0.5 * v[1] ** 2 + V(x[0] - x[1])])

    def acceleration(t, u, ut):
        force = dV(u[0] - u[1])
        return np.array([-force, force])

    def exact(t, data, grid):
        x0, v0 = np.asarray(data["u0"], float), np.asarray(data["ut0"], float)
        s = t - data.get("t0", 0.0)
        omega = math.sqrt(2.0)
        centre = 0.5 * (x0[0] + x0[1]) + 0.5 * (v0[0] + v0[1]) * s
        z = (x0[0] - x0[1]) * math.cos(omega * s) + (v0[0] - v0[1]) / omega * math.sin(omega * s)
        return np.array([centre + 0.5 * z, centre - 0.5 * z])

    field_terms = [
        (0.2, [(0.7, 1.3, (), -math.pi / 2)]),
        (0.0, [(0.4, 0.9, (), 0.0)]),
    ]
    return MultiplierProblem(
        name="two_body", m=2, s=2, n=0, params=p,
        continuous=ContinuousOperators(equation, cont_multiplier, cont_density),
        discrete=DiscreteOperators(density=density, multiplier=multiplier),
        stencil=Stencil(time_levels=3),
        orders=(None, 2),
        zero_compat=ZeroCompatData(order=1, limit_eval=factored),
        acceleration=acceleration,
        exact_solution=exact if beta == 0 else None,
        initial_presets={"default": _ode_preset([0.5, -0.5], [0.3, -0.1])},
        defaults={"T": 10.0, "N": 1000, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, field_terms),
        sample_points=((0.5, ()), (1.0, ()), (2.5, ())),
        state_sampler=_uniform_sampler(3, [-1.0, -1.0], [1.0, 1.0]),
        trial_offset=(0.0, 0.0),
        description="two bodies on a line, momentum and energy",
    )


# ═══════════════════════════════════════════════════════════════
# 4. LOTKA-VOLTERRA (rectangular, s=1 < m=2)
# ═══════════════════════════════════════════════════════════════

def _build_lotka_volterra(p: Dict) -> MultiplierProblem:
    a, b, c, d = p["a"], p["b"], p["c"], p["d"]

    def density(w, times, tau, grid):
        x, y = w[0, 0], w[0, 1]
        return (c * np.log(x) + a * np.log(y) - d * x - b * y)[None]

    def multiplier(u, times, tau, grid):
        x, y = u[0, 0], u[0, 1]
        return _rows([c / x - d, a / y - b])

    def g(u, times, tau, grid):
        x, y = u[0, 0], u[0, 1]
        return ((y - u[1, 1]) / tau + y * (c - d * x))[None]

    def equation(t, D):
        x, y = D(0)
        xt, yt = D(1)
        return np.array([xt - x * (a - b * y), yt + y * (c - d * x)])

    def cont_multiplier(t, D):
        x, y = D(0)
        return np.array([[c / x - d, a / y - b]])

    def cont_density(t, D):
        x, y = D(0)
        return np.array([c * math.log(x) + a * math.log(y) - d * x - b * y])

    field_terms = [
        (2.0, [(0.3, 1.0, (), -math.pi / 2)]),
        (1.2, [(0.4, 1.5, (), 0.0)]),
    ]
    return MultiplierProblem(
        name="lotka_volterra", m=2, s=1, n=0, params=p,
        continuous=ContinuousOperators(equation, cont_multiplier, cont_density),
        discrete=DiscreteOperators(density=density, multiplier=multiplier, g=g),
        stencil=Stencil(time_levels=2),
        orders=(None, 1),
        admissible=lambda levels: _positive(levels, (0, 1)),
        initial_presets={"default": _ode_preset([2.0, 1.0])},
        defaults={"T": 10.0, "tau": 1e-3, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, field_terms),
        sample_points=((0.3, ()), (1.1, ()), (2.0, ())),
        state_sampler=_uniform_sampler(2, [0.3, 0.3], [3.0, 3.0]),
        trial_offset=(2.5, 1.5),
        description="predator-prey, one conservation law for two equations",
    )


# ═══════════════════════════════════════════════════════════════
# 5. NON-DISSIPATIVE LORENZ (rectangular, s=2 < m=3)
# ═══════════════════════════════════════════════════════════════

def _build_lorenz(p: Dict) -> MultiplierProblem:
    sigma, r = p["sigma"], p["r"]

    def density(w, times, tau, grid):
        x, y, z = w[0, 0], w[0, 1], w[0, 2]
        return np.stack([z - x ** 2 / (2 * sigma), 0.5 * y ** 2 + 0.5 * z ** 2 - r * z])

    def _means(u):
        return [0.5 * (u[0, i] + u[1, i]) for i in range(3)]

    def multiplier(u, times, tau, grid):
        xm, ym, zm = _means(u)
        zero, one = np.zeros_like(xm), np.ones_like(xm)
        return _rows([-xm / sigma, zero, one], [zero, ym, zm - r])

    def g(u, times, tau, grid):
        xm, ym, _ = _means(u)
        return ((u[0, 2] - u[1, 2]) / tau - xm * ym)[None]

    def factored(u, times, tau, grid):
        xm, ym, zm = _means(u)
        return np.stack([
            (u[0, 0] - u[1, 0]) / tau - sigma * ym,
            (u[0, 1] - u[1, 1]) / tau - xm * (r - zm),
            (u[0, 2] - u[1, 2]) / tau - xm * ym,
        ])

    def equation(t, D):
        x, y, z = D(0)
        xt, yt, zt = D(1)
        return np.array([xt - sigma * y, yt - x * (r - z), zt - x * y])

    def cont_multiplier(t, D):
        x, y, z = D(0)
        return np.array([[-x / sigma, 0.0, 1.0], [0.0, y, z - r]])

    def cont_density(t, D):
        x, y, z = D(0)
        return np.array([z - x ** 2 / (2 * sigma), 0.5 * y ** 2 + 0.5 * z ** 2 - r * z])

    field_terms = [
        (2.0, [(0.5, 1.0, (), -math.pi / 2)]),
        (1.5, [(0.5, 1.2, (), 0.0)]),
        (1.0, [(0.5, 0.7, (), -math.pi / 2)]),
    ]
    return MultiplierProblem(
        name="lorenz", m=3, s=2, n=0, params=p,
        continuous=ContinuousOperators(equation, cont_multiplier, cont_density),
        discrete=DiscreteOperators(density=density, multiplier=multiplier, g=g),
        stencil=Stencil(time_levels=2),
        orders=(None, 1),
        zero_compat=ZeroCompatData(order=1, limit_eval=factored),
        initial_presets={"default": _ode_preset([1.0, 1.0, 1.0])},
        defaults={"T": 10.0, "tau": 1e-3, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, field_terms),
        sample_points=((0.2, ()), (0.9, ()), (1.7, ())),
        state_sampler=_uniform_sampler(2, [-2.0, -2.0, -2.0], [2.0, 2.0, 2.0]),
        trial_offset=(0.0, 0.0, 0.0),
        description="non-dissipative Lorenz system, midpoint multipliers",
    )


# ═══════════════════════════════════════════════════════════════
# 6. INVISCID BURGERS, p-FAMILY
# ═══════════════════════════════════════════════════════════════

def _build_burgers(p: Dict) -> MultiplierProblem:
    power = int(p["p"])

    def density(w, times, tau, grid):
        return (w[0, 0] ** power / power)[None]

    def flux(w, times, tau, grid):
        return (w[0, 0] ** (power + 1) / (power + 1))[None, None]

    def multiplier(u, times, tau, grid):
        new, old = u[0, 0], u[1, 0]
        total = np.zeros_like(new)
        for k in range(power):
            total = total + new ** (power - 1 - k) * old ** k
        return ((1.0 / power) * total)[None, None]

    def equation(t, D):
        return np.array([D(1, (0,))[0] + D(0)[0] * D(0, (1,))[0]])

    def smooth(grid, params):
        x = grid.mesh()[0]
        return {"u0": (1.0 + 0.5 * np.sin(x))[None]}

    return MultiplierProblem(
        name="burgers", m=1, s=1, n=1, params=p,
        continuous=ContinuousOperators(
            equation=equation,
            multiplier=lambda t, D: np.array([[D(0)[0] ** (power - 1)]]),
            density=lambda t, D: np.array([D(0)[0] ** power / power]),
            flux=lambda t, D: np.array([[D(0)[0] ** (power + 1) / (power + 1)]]),
        ),
        discrete=DiscreteOperators(density=density, multiplier=multiplier, flux=flux),
        stencil=Stencil(time_levels=2, reach=((-1, 0),)),
        orders=(1, 1),
        initial_presets={"smooth": smooth},
        defaults={"T": 1.0, "tau": 0.01, "initial": {"preset": "smooth"},
                  "grid": {"extent": [64], "domain": [[0.0, TWO_PI]], "boundary": "periodic"}},
        manufactured_field=lambda: TrigField.from_terms(1, [(1.5, [(0.5, -1.0, (1.0,), -math.pi / 2)])]),
        sample_points=((0.2, (0.5,)), (0.7, (2.0,)), (1.1, (4.0,))),
        state_sampler=_uniform_sampler(2, [0.5], [2.0]),
        trial_offset=(1.5,),
        description="inviscid Burgers with multiplier u^(p-1)",
    )


# ═══════════════════════════════════════════════════════════════
# 7. KORTEWEG-DE VRIES
# ═══════════════════════════════════════════════════════════════

def _build_kdv(p: Dict) -> MultiplierProblem:

    def density(w, times, tau, grid):
        return (0.5 * w[0, 0] ** 2)[None]

    def flux(w, times, tau, grid):
        u = w[0, 0]
        right = grid.shifted(u, 0, 1)
        left = grid.shifted(u, 0, -1)
        h = grid.h
        phi = (u ** 3 / 3
               + 0.5 * (right + u) * (right - 2 * u + left) / h ** 2
               - 0.5 * ((right - u) / h) ** 2)
        return phi[None, None]

    def multiplier(u, times, tau, grid):
        return (0.5 * (u[0, 0] + u[1, 0]))[None, None]

    def equation(t, D):
        u = D(0)[0]
        return np.array([D(1, (0,))[0] + u * D(0, (1,))[0] + D(0, (3,))[0]])

    def cont_flux(t, D):
        u, ux, uxx = D(0)[0], D(0, (1,))[0], D(0, (2,))[0]
        return np.array([[u ** 3 / 3 + u * uxx - 0.5 * ux ** 2]])

    def wave(grid, params):
        x = grid.mesh()[0]
        return {"u0": (1.0 + 0.1 * np.sin(x))[None]}

    return MultiplierProblem(
        name="kdv", m=1, s=1, n=1, params=p,
        continuous=ContinuousOperators(
            equation=equation,
            multiplier=lambda t, D: np.array([[D(0)[0]]]),
            density=lambda t, D: np.array([0.5 * D(0)[0] ** 2]),
            flux=cont_flux,
        ),
        discrete=DiscreteOperators(density=density, multiplier=multiplier, flux=flux),
        stencil=Stencil(time_levels=2, reach=((-2, 1),)),
        orders=(1, 1),
        initial_presets={"default": wave},
        defaults={"T": 10.0, "tau": 1e-2, "initial": {"preset": "default"},
                  "grid": {"extent": [64], "domain": [[0.0, TWO_PI]], "boundary": "periodic"}},
        manufactured_field=lambda: TrigField.from_terms(1, [(0.0, [(1.0, -1.0, (1.0,), -math.pi / 2)])]),
        sample_points=((0.3, (1.9,)), (1.0, (2.4,)), (0.1, (1.5,))),
        state_sampler=_uniform_sampler(2, [0.5], [1.5]),
        trial_offset=(0.0,),
        description="KdV, L2 density u^2/2",
    )


# ═══════════════════════════════════════════════════════════════
# 8. SHALLOW WATER 2-D
# ═══════════════════════════════════════════════════════════════

def _build_shallow_water(p: Dict) -> MultiplierProblem:

    def density(w, times, tau, grid):
        u, v, eta = w[0, 0], w[0, 1], w[0, 2]
        return np.stack([eta * u, eta * v, eta])

    def flux(w, times, tau, grid):
        u, v, eta = w[0, 0], w[0, 1], w[0, 2]
        return _rows(
            [eta * u ** 2 + 0.5 * eta ** 2, eta * u * v],
            [eta * u * v, eta * v ** 2 + 0.5 * eta ** 2],
            [eta * u, eta * v],
        )

    def multiplier(lv, times, tau, grid):
        um, vm, em = (0.5 * (lv[0, i] + lv[1, i]) for i in range(3))
        zero, one = np.zeros_like(em), np.ones_like(em)
        return _rows([em, zero, um], [zero, em, vm], [zero, zero, one])

    def equation(t, D):
        u, v, eta = D(0)
        ux, vx, ex = D(0, (1, 0))
        uy, vy, ey = D(0, (0, 1))
        ut, vt, et = D(1)
        return np.array([
            ut + u * ux + v * uy + ex,
            vt + u * vx + v * vy + ey,
            et + ex * u + eta * ux + ey * v + eta * vy,
        ])

    def cont_multiplier(t, D):
        u, v, eta = D(0)
        return np.array([[eta, 0.0, u], [0.0, eta, v], [0.0, 0.0, 1.0]])

    def cont_density(t, D):
        u, v, eta = D(0)
        return np.array([eta * u, eta * v, eta])

    def cont_flux(t, D):
        u, v, eta = D(0)
        return np.array([
            [eta * u ** 2 + 0.5 * eta ** 2, eta * u * v],
            [eta * u * v, eta * v ** 2 + 0.5 * eta ** 2],
            [eta * u, eta * v],
        ])

    def bump(grid, params):
        x, y = grid.mesh()
        eta = 1.0 + 0.01 * np.cos(x) * np.cos(y)
        return {"u0": np.stack([np.zeros_like(x), np.zeros_like(x), eta])}

    field_terms = [
        (0.0, [(0.3, -1.0, (1.0, 0.5), -math.pi / 2)]),
        (0.0, [(0.2, 0.7, (0.5, -1.0), 0.0)]),
        (1.0, [(0.2, -0.8, (1.0, 1.0), -math.pi / 2)]),
    ]
    return MultiplierProblem(
        name="shallow_water", m=3, s=3, n=2, params=p,
        continuous=ContinuousOperators(equation, cont_multiplier, cont_density, cont_flux),
        discrete=DiscreteOperators(density=density, multiplier=multiplier, flux=flux),
        stencil=Stencil(time_levels=2, reach=((-1, 0), (-1, 0))),
        orders=(1, 1),
        admissible=lambda levels: _positive(levels, (2,)),
        initial_presets={"default": bump},
        defaults={"T": 1.0, "tau": 0.01, "initial": {"preset": "default"},
                  "grid": {"extent": [32, 32], "domain": [[0.0, TWO_PI], [0.0, TWO_PI]],
                           "boundary": "periodic"}},
        manufactured_field=lambda: TrigField.from_terms(2, field_terms),
        sample_points=((0.2, (0.4, 1.0)), (0.6, (2.0, 0.3)), (1.0, (3.5, 2.5))),
        state_sampler=_uniform_sampler(2, [-1.0, -1.0, 0.5], [1.0, 1.0, 1.5]),
        trial_offset=(0.0, 0.0, 1.0),
        description="shallow water, momentum and mass densities",
    )


# ═══════════════════════════════════════════════════════════════
# 9. FACTORED HARMONIC OSCILLATOR
# ═══════════════════════════════════════════════════════════════

def _build_factored_oscillator(p: Dict) -> MultiplierProblem:
    mass, k = p["m"], p["k"]

    def density(w, times, tau, grid):
        new, old = w[0, 0], w[1, 0]
        return (0.5 * mass * ((new - old) / tau) ** 2 + 0.5 * k * (0.5 * (new + old)) ** 2)[None]

    def multiplier(u, times, tau, grid):
        return ((u[0, 0] - u[2, 0]) / (2 * tau))[None, None]

    def factored(u, times, tau, grid):
        nxt, cur, prv = u[0, 0], u[1, 0], u[2, 0]
        return (mass * (nxt - 2 * cur + prv) / tau ** 2 + k * (nxt + 2 * cur + prv) / 4)[None]

    def exact(t, data, grid):
        x0, v0 = float(data["u0"][0]), float(data["ut0"][0])
        s = t - data.get("t0", 0.0)
        if k == 0:
            return np.array([x0 + v0 * s])
        omega = math.sqrt(k / mass)
        return np.array([x0 * math.cos(omega * s) + v0 / omega * math.sin(omega * s)])

    return MultiplierProblem(
        name="factored_oscillator", m=1, s=1, n=0, params=p,
        continuous=ContinuousOperators(
            equation=lambda t, D: np.array([mass * D(2)[0] + k * D(0)[0]]),
            multiplier=lambda t, D: np.array([[D(1)[0]]]),
            density=lambda t, D: np.array([0.5 * mass * D(1)[0] ** 2 + 0.5 * k * D(0)[0] ** 2]),
        ),
        discrete=DiscreteOperators(density=density, multiplier=multiplier),
        stencil=Stencil(time_levels=3),
        orders=(None, 2),
        zero_compat=ZeroCompatData(order=1, limit_eval=factored),
        acceleration=lambda t, u, ut: -k * u / mass,
        exact_solution=exact,
        initial_presets={"default": _ode_preset([1.0], [0.0])},
        defaults={"T": 10.0, "N": 200, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(0, [(0.2, [(1.0, 1.3, (), -math.pi / 2)])]),
        sample_points=((0.3, ()), (0.8, ()), (3.0, ())),
        state_sampler=_uniform_sampler(3, [-1.0], [1.0]),
        trial_offset=(0.0,),
        description="harmonic oscillator whose scheme factors exactly",
    )


# ═══════════════════════════════════════════════════════════════
# 10. MANUFACTURED SCALAR u_t = A cos(omega t)
# ═══════════════════════════════════════════════════════════════

def _build_manufactured_scalar(p: Dict) -> MultiplierProblem:
    amp, omega = p["amplitude"], p["omega"]

    def density(w, times, tau, grid):
        return (w[0, 0] - amp / omega * np.sin(omega * times[0]))[None]

    def multiplier(u, times, tau, grid):
        return np.ones_like(u[0, 0])[None, None]

    def exact(t, data, grid):
        t0 = data.get("t0", 0.0)
        return np.asarray(data["u0"], float) + amp / omega * (math.sin(omega * t) - math.sin(omega * t0))

    return MultiplierProblem(
        name="manufactured_scalar", m=1, s=1, n=0, params=p,
        continuous=ContinuousOperators(
            equation=lambda t, D: np.array([D(1)[0] - amp * math.cos(omega * t)]),
            multiplier=lambda t, D: np.array([[1.0]]),
            density=lambda t, D: np.array([D(0)[0] - amp / omega * math.sin(omega * t)]),
        ),
        discrete=DiscreteOperators(density=density, multiplier=multiplier),
        stencil=Stencil(time_levels=2),
        orders=(None, 1),
        exact_solution=exact,
        initial_presets={"default": _ode_preset([0.0])},
        defaults={"T": 1.0, "tau": 0.01, "initial": {"preset": "default"}},
        manufactured_field=lambda: TrigField.from_terms(
            0, [(0.0, [(0.5, 2.0, (), -math.pi / 2), (1.0, 0.5, (), 0.0)])]),
        sample_points=((0.2, ()), (0.9, ()), (1.6, ())),
        state_sampler=_uniform_sampler(2, [-1.0], [1.0]),
        trial_offset=(0.0,),
        description="harness self-test, scheme reproduces the exact solution",
    )


# ═══════════════════════════════════════════════════════════════
# CATALOG
# ═══════════════════════════════════════════════════════════════

PARAMETERS: Dict[str, Dict[str, ParamSpec]] = {
    "pendulum": {"g_over_l": ParamSpec(1.0, 0.0, exclusive_minimum=True)},
    "dho": {"m": ParamSpec(1.0, 0.0, exclusive_minimum=True),
            "k": ParamSpec(5.0, 0.0),
            "gamma": ParamSpec(0.5, 0.0)},
    "two_body": {"beta": ParamSpec(0.0, 0.0)},
    "lotka_volterra": {name: ParamSpec(1.0, 0.0, exclusive_minimum=True) for name in "abcd"},
    "lorenz": {"sigma": ParamSpec(10.0, 0.0, exclusive_minimum=True), "r": ParamSpec(28.0)},
    "burgers": {"p": ParamSpec(1, 1, integer=True)},
    "kdv": {},
    "shallow_water": {},
    "factored_oscillator": {"m": ParamSpec(1.0, 0.0, exclusive_minimum=True), "k": ParamSpec(1.0, 0.0)},
    "manufactured_scalar": {"amplitude": ParamSpec(1.0),
                            "omega": ParamSpec(1.0, 0.0, exclusive_minimum=True)},
}

BUILDERS: Dict[str, Callable[[Dict], MultiplierProblem]] = {
    "pendulum": _build_pendulum,
    "dho": _build_dho,
    "two_body": _build_two_body,
    "lotka_volterra": _build_lotka_volterra,
    "lorenz": _build_lorenz,
    "burgers": _build_burgers,
    "kdv": _build_kdv,
    "shallow_water": _build_shallow_water,
    "factored_oscillator": _build_factored_oscillator,
    "manufactured_scalar": _build_manufactured_scalar,
}


def resolve_params(name: str, params: Optional[Dict] = None) -> Dict:
    """Defaults merged with `params`, each checked against its range."""
    if name not in BUILDERS:
        raise UnknownProblemError(f"unknown problem {name!r}; available: {', '.join(BUILDERS)}")
    specs = PARAMETERS[name]
    params = dict(params or {})
    unknown = sorted(set(params) - set(specs))
    if unknown:
        raise ParameterRangeError(f"{name}: unknown parameter(s) {', '.join(unknown)}")
    return {key: spec.check(key, params.get(key, spec.default)) for key, spec in specs.items()}


def instantiate(name: str, params: Optional[Dict] = None) -> MultiplierProblem:
    """
    Build a fully wired problem.

    Args:
        name: catalog name
        params: parameter overrides (missing ones take their defaults)

    Returns:
        MultiplierProblem
    """
    resolved = resolve_params(name, params)
    problem = BUILDERS[name](resolved)
    logger.debug("instantiated %s with %s", name, resolved)
    return problem


def preset_data(problem: MultiplierProblem, grid, preset: str = "default") -> Dict:
    """Initial data of a named preset on `grid`."""
    if preset not in problem.initial_presets:
        raise KeyError(f"{problem.name} has no initial preset {preset!r}")
    return problem.initial_presets[preset](grid, problem.params)


def catalog() -> List[Dict]:
    """Descriptors of every built-in problem."""
    entries = []
    for name in BUILDERS:
        problem = instantiate(name)
        entries.append({
            "name": name,
            "m": problem.m,
            "s": problem.s,
            "n": problem.n,
            "time_levels": problem.stencil.time_levels,
            "orders": problem.orders,
            "params": {key: {"default": spec.default, "minimum": spec.minimum,
                             "maximum": spec.maximum, "integer": spec.integer}
                       for key, spec in PARAMETERS[name].items()},
            "defaults": problem.defaults,
            "presets": sorted(problem.initial_presets),
            "exact_solution": problem.exact_solution is not None,
            "zero_compat": problem.zero_compat is not None,
            "description": problem.description,
        })
    return entries
