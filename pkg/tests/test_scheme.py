import dataclasses

import numpy as np
import pytest

from errors import SingularMultiplierError, StencilRangeError
from grid_module import FieldState, SpatialGrid, TimeGrid
from problems_module import BUILDERS, Stencil, instantiate
from scheme_module import (EPS, MultiplierGuard, assemble_rectangular_residual, assemble_residual_field,
                           assemble_scalar_residual, assemble_system_residual, conservative_form_residual,
                           discrete_flux_divergence, discrete_time_derivative, stencil_dry_run)
from verify_module import ConservationReport, algebraic_identity


def _ode_state(levels, step=2):
    return FieldState(values=np.array(levels, dtype=float), step=step)


def test_lorenz_example_uses_factored_branch(unit_time, ode_grid):
    # mean y = 0 makes Lambda~ singular; the factored closed form takes over
    lorenz = instantiate("lorenz", {"sigma": 1.0, "r": 1.0})
    state = _ode_state([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], step=1)
    residual = assemble_rectangular_residual(lorenz, state, ode_grid, (), unit_time)
    np.testing.assert_allclose(residual, [0.0, -1.0, 0.0], atol=1e-15)


def test_lorenz_regular_point_matches_factored_form(unit_time, ode_grid):
    lorenz = instantiate("lorenz")
    levels = np.array([[1.3, 0.7, 2.1], [1.1, 0.9, 1.8]])
    state = _ode_state(levels, step=1)
    residual = assemble_rectangular_residual(lorenz, state, ode_grid, (), unit_time)
    factored = lorenz.zero_compat.limit_eval(levels, np.array([1.0, 0.0]), 1.0, ode_grid)
    np.testing.assert_allclose(residual, factored, rtol=1e-12, atol=1e-12)


def test_two_body_constant_state_is_at_rest(ode_grid):
    problem = instantiate("two_body")
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    state = _ode_state([[0.5, 0.5]] * 3)
    residual = assemble_system_residual(problem, state, ode_grid, (), time_grid)
    np.testing.assert_allclose(residual, [0.0, 0.0], atol=1e-15)


def test_shallow_water_constant_state():
    problem = instantiate("shallow_water")
    grid = SpatialGrid(dim=2, h=0.1, extent=(4, 4), boundary_mode=("periodic", "periodic"))
    values = np.zeros((2, 3, 4, 4))
    values[:, 0] = 0.3
    values[:, 1] = -0.2
    values[:, 2] = 1.0
    state = FieldState(values=values, step=1)
    time_grid = TimeGrid(t0=0.0, tau=0.01, steps=10)
    residual = assemble_system_residual(problem, state, grid, (1, 2), time_grid)
    np.testing.assert_allclose(residual, np.zeros(3), atol=1e-13)


def test_lotka_volterra_g_component_vanishes():
    problem = instantiate("lotka_volterra")
    levels = np.array([[1.0, 1.0], [1.0, 1.0]])
    g = problem.discrete.g(levels, np.array([1.0, 0.0]), 1.0, SpatialGrid.ode())
    np.testing.assert_array_equal(g, [0.0])


def test_lotka_volterra_singular_multiplier_raises(unit_time, ode_grid):
    # c/x - d = 0 at x = 1 and LV has no guarded branch
    problem = instantiate("lotka_volterra")
    state = _ode_state([[1.0, 2.0], [1.5, 2.0]], step=1)
    with pytest.raises(SingularMultiplierError) as caught:
        assemble_rectangular_residual(problem, state, ode_grid, (), unit_time)
    assert caught.value.point == ()


def test_floor_follows_multiplier_conditioning(ode_grid):
    # Lambda~ = c/x - d shrinks towards x = c/d and the floor grows as 1/|Lambda~|
    problem = instantiate("lotka_volterra")
    tau = 1e-3
    times = np.array([tau, 0.0])
    floors = []
    for x in (2.0, 1.01, 1.0001):
        levels = np.array([[x, 1.0], [x, 1.0]])
        floors.append(assemble_residual_field(problem, levels, times, tau, ode_grid).floor(()))
    assert floors[0] < floors[1] < floors[2]
    assert floors[2] * abs(1 / 1.0001 - 1) == pytest.approx(floors[1] * abs(1 / 1.01 - 1), rel=0.02)

    assembly = assemble_residual_field(problem, np.array([[2.0, 1.0], [2.0, 1.0]]), times, tau, ode_grid)
    assert assembly.floor(()) >= assembly.level_floor
    assert assembly.tolerance(1e-6, ()) == 1e-6
    assert assembly.tolerance(1e-12, ()) == assembly.floor(())


def test_at_rounding_separates_solved_from_unsolved(ode_grid):
    problem = instantiate("two_body")
    times = np.array([0.2, 0.1, 0.0])
    rest = assemble_residual_field(problem, np.full((3, 2), 0.5), times, 0.1, ode_grid)
    assert rest.at_rounding(1e-12, ())
    moved = assemble_residual_field(problem, np.array([[0.6, 0.5], [0.5, 0.5], [0.5, 0.5]]),
                                    times, 0.1, ode_grid)
    assert not moved.at_rounding(1e-12, ())


def test_pendulum_time_derivative_vanishes_when_symmetric(ode_grid):
    problem = instantiate("pendulum")
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    state = _ode_state([[0.3], [0.5], [0.3]])
    assert discrete_time_derivative(problem, state, ode_grid, (), time_grid)[0] == pytest.approx(0.0, abs=1e-14)
    conservative = conservative_form_residual(problem, state, ode_grid, (), time_grid)
    assert conservative[0] == pytest.approx(0.0, abs=1e-14)


def test_pendulum_zero_compatible_branch_is_continuous(ode_grid):
    problem = instantiate("pendulum")
    tau = 0.1
    time_grid = TimeGrid(t0=0.0, tau=tau, steps=10)
    z, theta = 0.3, 0.5
    limit = assemble_scalar_residual(problem, _ode_state([[z], [theta], [z]]), ode_grid, (), time_grid)
    for eps in np.logspace(-10, -4, 13):
        for sign in (-1.0, 1.0):
            value = assemble_scalar_residual(problem, _ode_state([[z + sign * eps], [theta], [z]]),
                                             ode_grid, (), time_grid)
            assert abs(value - limit) <= 1e4 * eps


def test_pendulum_limit_matches_closed_form(ode_grid):
    problem = instantiate("pendulum")
    tau = 0.1
    time_grid = TimeGrid(t0=0.0, tau=tau, steps=10)
    z, theta = 0.3, 0.5
    limit = assemble_scalar_residual(problem, _ode_state([[z], [theta], [z]]), ode_grid, (), time_grid)
    assert limit == pytest.approx(2 * (z - theta) / tau ** 2 + np.sin(z), rel=1e-14)


def test_scalar_requires_scalar_problem(unit_time, ode_grid):
    with pytest.raises(ValueError):
        assemble_scalar_residual(instantiate("two_body"), _ode_state([[0.0, 0.0]] * 3),
                                 ode_grid, (), unit_time)
    with pytest.raises(ValueError):
        assemble_system_residual(instantiate("lorenz"), _ode_state([[1.0, 1.0, 1.0]] * 2, step=1),
                                 ode_grid, (), unit_time)


@pytest.mark.parametrize("name", ["two_body", "shallow_water"])
def test_rectangular_assembly_reduces_to_square(name):
    problem = instantiate(name)
    rng = np.random.default_rng(3)
    extent = (5,) * problem.n
    grid = (SpatialGrid(dim=problem.n, h=0.1, extent=extent, boundary_mode=("periodic",) * problem.n)
            if problem.n else SpatialGrid.ode())
    state = FieldState(values=problem.state_sampler(rng, extent), step=problem.stencil.time_levels - 1)
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    J = (2,) * problem.n
    square = assemble_system_residual(problem, state, grid, J, time_grid)
    rectangular = assemble_rectangular_residual(problem, state, grid, J, time_grid)
    np.testing.assert_array_equal(square, rectangular)


def test_burgers_linear_multiplier_is_the_classical_scheme():
    problem = instantiate("burgers", {"p": 1})
    rng = np.random.default_rng(7)
    n, tau, h = 16, 0.01, 0.3
    grid = SpatialGrid(dim=1, h=h, extent=(n,), boundary_mode=("periodic",))
    levels = 0.5 + 1.5 * rng.random((2, 1, n))
    assembly = assemble_residual_field(problem, levels, np.array([tau, 0.0]), tau, grid)
    u, old = levels[0, 0], levels[1, 0]
    left = np.roll(u, 1)
    classical = (u - old) / tau + (u ** 2 - left ** 2) / (2 * h)
    assert np.array_equal(assembly.residual[0], classical)


def test_flux_divergence_point_checks():
    problem = instantiate("kdv")
    grid = SpatialGrid(dim=1, h=0.1, extent=(8,), boundary_mode=("boundary",))
    state = FieldState(values=np.ones((2, 1, 8)), step=1)
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    np.testing.assert_allclose(discrete_flux_divergence(problem, state, grid, (3,), time_grid), [0.0],
                               atol=1e-12)
    with pytest.raises(StencilRangeError):
        discrete_flux_divergence(problem, state, grid, (1,), time_grid)
    with pytest.raises(StencilRangeError):
        assemble_scalar_residual(problem, state, grid, (7,), time_grid)
    with pytest.raises(ValueError):
        discrete_flux_divergence(instantiate("dho"), _ode_state([[1.0]] * 3), SpatialGrid.ode(), (),
                                 time_grid)


def test_point_assembly_records_conditioning(ode_grid):
    problem = instantiate("dho")
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    report = ConservationReport(problem="dho", components=1)
    assemble_scalar_residual(problem, _ode_state([[1.0], [0.9], [0.7]]), ode_grid, (), time_grid, report)
    assert report.max_gamma > 0.0


def test_guard_threshold_scales_with_multiplier():
    guard = MultiplierGuard()
    guard.update(50.0)
    guard.update(float("nan"))
    assert guard.scale == 50.0
    assert guard.threshold(instantiate("lotka_volterra")) == pytest.approx(1e6 * EPS * 50.0)
    assert guard.threshold(instantiate("pendulum")) == pytest.approx(np.sqrt(EPS) * 50.0)


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_algebraic_identity_on_random_states(name):
    result = algebraic_identity(instantiate(name), samples=10_000, seed=0)
    assert result["passed"], result
    assert result["multiplier_points"] > 0


@pytest.mark.parametrize("name", ["burgers", "kdv", "shallow_water"])
def test_declared_stencils_hold(name):
    result = stencil_dry_run(instantiate(name))
    assert result["ok"], result["violations"]


def test_stencil_dry_run_catches_short_reach():
    kdv = instantiate("kdv")
    wrong = dataclasses.replace(kdv, stencil=Stencil(time_levels=2, reach=((-1, 0),)))
    result = stencil_dry_run(wrong)
    assert not result["ok"]
    assert any(v["offset"] == (-2,) or v["offset"] == (1,) for v in result["violations"])


def test_pendulum_example_value(ode_grid):
    problem = instantiate("pendulum")
    time_grid = TimeGrid(t0=0.0, tau=0.1, steps=10)
    state = _ode_state([[0.3], [0.2], [0.1]])
    value = assemble_scalar_residual(problem, state, ode_grid, (), time_grid)
    closed_form = (0.3 - 0.4 + 0.1) / 0.01 - (np.cos(0.3) - np.cos(0.1)) / (0.3 - 0.1)
    assert value == pytest.approx(closed_form, abs=1e-12)
    assert value == pytest.approx(0.198338, abs=1e-6)
