import numpy as np
import pytest
from scipy.optimize import brentq

from errors import InitialDataError
from grid_module import FieldState, SpatialGrid, TimeGrid
from problems_module import instantiate
from scheme_module import assemble_residual_field
from solver_module import (REJECT_INADMISSIBLE, REJECT_SINGULAR, ColoredJacobian, SolverConfig, _axis_colors,
                           advance_step, integrate, startup_levels)


def _dho_data():
    return {"u0": np.array([1.0]), "ut0": np.array([0.0])}


# ═══════════════════════════════════════════════════════════════
# STARTUP
# ═══════════════════════════════════════════════════════════════

def test_dho_taylor_startup(ode_grid):
    problem = instantiate("dho", {"m": 1.0, "k": 5.0, "gamma": 0.5})
    time_grid = TimeGrid(t0=0.0, tau=0.05, steps=10)
    state = startup_levels(problem, _dho_data(), SolverConfig(), time_grid, ode_grid)
    assert state.step == 1
    assert state.values[0, 0] == pytest.approx(0.99375, abs=1e-15)
    assert state.values[1, 0] == 1.0
    assert np.isnan(state.values[2, 0])


def test_pendulum_taylor_startup(ode_grid):
    problem = instantiate("pendulum")
    time_grid = TimeGrid(t0=0.0, tau=0.01, steps=10)
    state = startup_levels(problem, {"u0": np.array([0.5]), "ut0": np.array([0.0])},
                           SolverConfig(), time_grid, ode_grid)
    assert state.values[0, 0] == pytest.approx(0.5 - 0.5 * 0.01 ** 2 * np.sin(0.5), abs=1e-15)


def test_exact_and_given_startup(ode_grid):
    problem = instantiate("factored_oscillator")
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    exact = startup_levels(problem, _dho_data(), SolverConfig(startup="exact_solution"), time_grid, ode_grid)
    assert exact.values[0, 0] == pytest.approx(np.cos(0.1), abs=1e-15)
    given = startup_levels(problem, dict(_dho_data(), u1=np.array([0.75])), SolverConfig(startup="given"),
                           time_grid, ode_grid)
    assert given.values[0, 0] == 0.75


def test_two_level_startup_keeps_step_zero(ode_grid):
    problem = instantiate("lotka_volterra")
    state = startup_levels(problem, {"u0": np.array([2.0, 1.0])}, SolverConfig(),
                           TimeGrid(t0=0.0, tau=1e-3, steps=5), ode_grid)
    assert state.step == 0
    np.testing.assert_array_equal(state.values[0], [2.0, 1.0])


@pytest.mark.parametrize("startup, data", [
    ("taylor2", {"u0": np.array([1.0])}),
    ("given", {"u0": np.array([1.0]), "ut0": np.array([0.0])}),
    ("taylor2", {"ut0": np.array([0.0])}),
])
def test_startup_missing_data(ode_grid, startup, data):
    problem = instantiate("pendulum")
    with pytest.raises(InitialDataError):
        startup_levels(problem, data, SolverConfig(startup=startup),
                       TimeGrid(t0=0.0, tau=0.1, steps=5), ode_grid)


def test_exact_startup_needs_closed_form(ode_grid):
    with pytest.raises(InitialDataError):
        startup_levels(instantiate("pendulum"), {"u0": np.array([0.5]), "ut0": np.array([0.0])},
                       SolverConfig(startup="exact_solution"), TimeGrid(t0=0.0, tau=0.1, steps=5), ode_grid)


@pytest.mark.parametrize("field, value", [
    ("residual_tol", 0.0),
    ("max_iters", 0),
    ("jacobian_fd_eps", 1e-3),
    ("predictor", "quadratic"),
    ("startup", "euler"),
])
def test_solver_config_rejects(field, value):
    with pytest.raises(ValueError):
        SolverConfig(**{field: value})


# ═══════════════════════════════════════════════════════════════
# ONE STEP
# ═══════════════════════════════════════════════════════════════

@pytest.mark.parametrize("predictor", ["copy", "linear_extrapolation"])
def test_factored_oscillator_newton_matches_closed_form(ode_grid, predictor):
    problem = instantiate("factored_oscillator", {"m": 1.0, "k": 5.0})
    time_grid = TimeGrid(t0=0.0, tau=0.05, steps=10)
    state = FieldState(values=np.array([[1.0], [1.0], [np.nan]]), step=1)
    state.history = np.array([np.nan])
    outcome = advance_step(problem, state, (time_grid, ode_grid), SolverConfig(predictor=predictor))
    assert outcome.accepted, outcome.message
    expected = (797.5 - 401.25) / 401.25
    assert state.values[0, 0] == pytest.approx(expected, abs=1e-12)
    assert state.values[0, 0] == pytest.approx(0.987539, abs=1e-6)
    assert state.step == 2


def test_linear_problem_converges_immediately(ode_grid):
    # k = 0: the factored scheme is linear in the newest level
    problem = instantiate("factored_oscillator", {"m": 1.0, "k": 0.0})
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    state = FieldState(values=np.array([[1.0], [0.5], [0.0]]), step=2)
    outcome = advance_step(problem, state, (time_grid, ode_grid), SolverConfig())
    assert outcome.accepted
    assert outcome.iterations <= 2
    assert state.values[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_pendulum_newton_matches_bracketed_root(ode_grid):
    problem = instantiate("pendulum")
    tau = 0.1
    time_grid = TimeGrid(t0=0.0, tau=tau, steps=10)

    def conservative(theta_next):
        new = 0.5 * ((theta_next - 0.1) / tau) ** 2 - 0.5 * (np.cos(theta_next) + np.cos(0.1))
        old = 0.5 * (0.1 / tau) ** 2 - 0.5 * (np.cos(0.1) + np.cos(0.0))
        return (new - old) / tau

    oracle = brentq(conservative, 0.1, 0.3, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    state = FieldState(values=np.array([[0.1], [0.0], [np.nan]]), step=1)
    outcome = advance_step(problem, state, (time_grid, ode_grid), SolverConfig(residual_tol=1e-13))
    assert outcome.accepted
    assert state.values[0, 0] == pytest.approx(oracle, abs=1e-12)


def test_rejection_restores_state(ode_grid):
    # the copy predictor lands on x = c/d where the LV multiplier vanishes
    problem = instantiate("lotka_volterra")
    time_grid = TimeGrid(t0=0.0, tau=1e-3, steps=10)
    state = FieldState(values=np.array([[1.0, 2.0], [1.2, 2.0]]), step=3)
    before = state.copy()
    outcome = advance_step(problem, state, (time_grid, ode_grid), SolverConfig(predictor="copy"))
    assert not outcome.accepted
    assert outcome.rejection_reason == REJECT_SINGULAR
    assert state.step == before.step
    assert np.array_equal(state.values, before.values)


def test_inadmissible_start_is_rejected(ode_grid):
    problem = instantiate("lotka_volterra")
    time_grid = TimeGrid(t0=0.0, tau=1e-3, steps=10)
    state = FieldState(values=np.array([[-1.0, 2.0], [-1.0, 2.0]]), step=1)
    outcome = advance_step(problem, state, (time_grid, ode_grid), SolverConfig())
    assert outcome.rejection_reason == REJECT_INADMISSIBLE
    assert state.step == 1


# ═══════════════════════════════════════════════════════════════
# JACOBIAN COLORING
# ═══════════════════════════════════════════════════════════════

@pytest.mark.parametrize("n, width, periodic", [(10, 4, True), (9, 4, True), (3, 4, True), (10, 4, False)])
def test_axis_colors_keep_stencil_distance(n, width, periodic):
    colors = _axis_colors(n, width, periodic)
    for a in range(n):
        for b in range(a + 1, n):
            if colors[a] != colors[b]:
                continue
            gap = b - a
            if periodic:
                gap = min(gap, n - gap)
            assert gap >= width


def test_colored_jacobian_matches_dense():
    problem = instantiate("kdv")
    grid = SpatialGrid(dim=1, h=0.3, extent=(11,), boundary_mode=("periodic",))
    rng = np.random.default_rng(5)
    levels = 1.0 + 0.2 * rng.random((2, 1, 11))

    def residual(x):
        work = levels.copy()
        work[0, 0] = x
        return assemble_residual_field(problem, work, np.array([0.1, 0.0]), 0.1, grid).residual.ravel()

    x = levels[0, 0].copy()
    r0 = residual(x)
    box = grid.equation_box(problem.stencil.reach)
    colored = ColoredJacobian(problem, grid, box)
    sparse = colored.matrix(residual, x, r0, 1e-7).toarray()
    dense = np.empty((11, 11))
    for j in range(11):
        trial = x.copy()
        step = 1e-7 * max(1.0, abs(x[j]))
        trial[j] += step
        dense[:, j] = (residual(trial) - r0) / step
    np.testing.assert_allclose(sparse, dense, atol=1e-5)
    assert colored.evaluations < 11


# ═══════════════════════════════════════════════════════════════
# INTEGRATION
# ═══════════════════════════════════════════════════════════════

def test_horizon_shorter_than_step_gives_startup_only(ode_grid):
    problem = instantiate("dho")
    result = integrate(problem, _dho_data(), 0.05, (TimeGrid(t0=0.0, tau=0.1, steps=0), ode_grid))
    assert not result.aborted
    assert result.trajectory.shape == (2, 1)
    np.testing.assert_allclose(result.times, [0.0, 0.1])
    assert result.outcomes == []


def test_dho_conservation_and_observers(ode_grid):
    problem = instantiate("dho", {"m": 1.0, "k": 5.0, "gamma": 0.5})
    seen = []

    def observer(k, t, state, rows):
        assert not state.values.flags.writeable
        seen.append((k, t, len(rows)))

    result = integrate(problem, _dho_data(), 10.0, (TimeGrid(t0=0.0, tau=0.05, steps=0), ode_grid),
                       SolverConfig(residual_tol=1e-12), observers=[observer])
    assert not result.aborted
    assert result.trajectory.shape == (201, 1)
    assert len(seen) == 199
    assert seen[0][0] == 2 and seen[-1][0] == 200
    assert result.report.density_spread()[0] <= 1e-11
    assert all(c["passed"] for c in result.report.divergence_results() if c["applicable"])
    assert all(o.acceptance <= 1.0 for o in result.outcomes)


def test_manufactured_scalar_reproduces_exact_solution(ode_grid):
    problem = instantiate("manufactured_scalar")
    result = integrate(problem, {"u0": np.array([0.0])}, 1.0, (TimeGrid(t0=0.0, tau=0.01, steps=0), ode_grid))
    exact = problem.exact_solution(1.0, {"u0": np.array([0.0]), "t0": 0.0}, ode_grid)
    np.testing.assert_allclose(result.final, exact, atol=1e-12)


def test_aborted_run_reports_failure(ode_grid):
    problem = instantiate("lotka_volterra")
    result = integrate(problem, {"u0": np.array([1.0, 2.0])}, 0.01,
                       (TimeGrid(t0=0.0, tau=1e-3, steps=0), ode_grid), SolverConfig(predictor="copy"))
    assert result.aborted
    assert result.failure.rejection_reason == REJECT_SINGULAR
    assert result.report.summary()["failure"]["reason"] == REJECT_SINGULAR
    assert result.trajectory.shape == (1, 2)


def test_accepted_steps_stay_within_their_tolerance(ode_grid):
    # the orbit from (2, 1) crosses x = c/d, where Lambda~ = c/x - d is small
    problem = instantiate("lotka_volterra")
    config = SolverConfig()
    result = integrate(problem, {"u0": np.array([2.0, 1.0])}, 3.0,
                       (TimeGrid(t0=0.0, tau=1e-3, steps=0), ode_grid), config)
    assert not result.aborted, result.failure
    assert all(o.residual_norm <= o.tolerance for o in result.outcomes)
    assert all(o.tolerance >= config.residual_tol for o in result.outcomes)
    assert min(abs(result.trajectory[:, 0] - 1.0)) < 1e-2
    raised = [o for o in result.outcomes if o.tolerance > config.residual_tol]
    summary = result.report.summary()
    assert summary["raised_tolerance_steps"] == len(raised)
    assert summary["max_tolerance"] == max(o.tolerance for o in result.outcomes)
    assert result.report.density_spread()[0] <= 1e-9


def test_floor_ratio_cap_rejects_as_singular(ode_grid):
    problem = instantiate("lotka_volterra")
    result = integrate(problem, {"u0": np.array([2.0, 1.0])}, 0.01,
                       (TimeGrid(t0=0.0, tau=1e-3, steps=0), ode_grid), SolverConfig(max_floor_ratio=1.0))
    assert result.aborted
    assert result.failure.rejection_reason == REJECT_SINGULAR
    assert "attainable residual" in result.failure.message


def test_two_body_runs_through_near_singular_multiplier(ode_grid):
    problem = instantiate("two_body")
    data = {"u0": np.array([0.5, -0.5]), "ut0": np.array([0.3, -0.1])}
    result = integrate(problem, data, 10.0, (TimeGrid(t0=0.0, tau=0.01, steps=0), ode_grid))
    assert not result.aborted, result.failure
    assert len(result.outcomes) == 999
    for outcome in result.outcomes:
        assert outcome.residual_norm <= outcome.tolerance
        if outcome.floor_limited:
            assert outcome.tolerance == outcome.residual_norm
    assert np.all(result.report.density_spread() <= 1e-10)


@pytest.mark.parametrize("tau, damped", [(1e-2, True), (1e-3, False)])
def test_kdv_mode_amplification_depends_on_tau(tau, damped):
    # one implicit step of a single small Fourier mode on top of u = 1
    problem = instantiate("kdv")
    grid = SpatialGrid.from_domain([[0.0, 2 * np.pi]], [64])
    x = grid.mesh()[0]
    amplitude = 1e-6
    gains = {}
    for k in (4, 8, 16):
        start = 1.0 + amplitude * np.cos(k * x)
        state = FieldState(values=np.stack([start, start])[:, None], step=0)
        outcome = advance_step(problem, state, (TimeGrid(t0=0.0, tau=tau, steps=1), grid),
                               SolverConfig(predictor="copy"))
        assert outcome.accepted, outcome.message
        coefficient = np.abs(np.fft.rfft(state.values[0, 0] - 1.0))[k]
        gains[k] = coefficient / (amplitude * 32)
    if damped:
        assert all(gain < 1.0 for gain in gains.values()), gains
    else:
        assert gains[8] > 1.0, gains


def test_burgers_periodic_total_is_constant():
    problem = instantiate("burgers", {"p": 2})
    grid = SpatialGrid.from_domain([[0.0, 2 * np.pi]], [32])
    data = problem.initial_presets["smooth"](grid, problem.params)
    result = integrate(problem, data, 0.2, (TimeGrid(t0=0.0, tau=0.01, steps=0), grid))
    assert not result.aborted
    assert result.report.density_spread()[0] <= 1e-10


def test_bounded_burgers_holds_boundary_and_balances_flux():
    problem = instantiate("burgers", {"p": 1})
    grid = SpatialGrid.from_domain([[0.0, 2.0]], [21], "boundary")
    x = grid.mesh()[0]
    data = {"u0": (1.0 + 0.1 * x + 0.05 * np.sin(np.pi * x))[None]}
    result = integrate(problem, data, 0.1, (TimeGrid(t0=0.0, tau=0.01, steps=0), grid))
    assert not result.aborted
    np.testing.assert_array_equal(result.final[:, 0], data["u0"][:, 0])
    checks = [c for c in result.report.divergence_results() if c["applicable"]]
    assert len(checks) == 10
    assert all(c["passed"] for c in checks)
    flux = result.report.frame()["boundary_flux_sum"].dropna()
    assert (flux.abs() > 0).all()
