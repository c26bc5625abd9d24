import math

import numpy as np
import pytest

from errors import InadmissibleStateError, ParameterRangeError, UnknownProblemError
from grid_module import SpatialGrid
from problems_module import BUILDERS, TrigField, catalog, instantiate, resolve_params

SHAPES = {
    # name: (m, s, n, time levels)
    "pendulum": (1, 1, 0, 3),
    "dho": (1, 1, 0, 3),
    "two_body": (2, 2, 0, 3),
    "lotka_volterra": (2, 1, 0, 2),
    "lorenz": (3, 2, 0, 2),
    "burgers": (1, 1, 1, 2),
    "kdv": (1, 1, 1, 2),
    "shallow_water": (3, 3, 2, 2),
    "factored_oscillator": (1, 1, 0, 3),
    "manufactured_scalar": (1, 1, 0, 2),
}


def test_catalog_lists_every_problem():
    entries = {entry["name"]: entry for entry in catalog()}
    assert set(entries) == set(SHAPES) == set(BUILDERS)
    for name, (m, s, n, levels) in SHAPES.items():
        entry = entries[name]
        assert (entry["m"], entry["s"], entry["n"], entry["time_levels"]) == (m, s, n, levels)
        assert entry["presets"]


@pytest.mark.parametrize("name", sorted(SHAPES))
def test_discrete_operator_shapes(name):
    problem = instantiate(name)
    rng = np.random.default_rng(1)
    extent = (6,) * problem.n
    grid = (SpatialGrid(dim=problem.n, h=0.1, extent=extent, boundary_mode=("periodic",) * problem.n)
            if problem.n else SpatialGrid.ode())
    levels = problem.state_sampler(rng, extent)
    times = np.array([1.0, 0.9, 0.8][:levels.shape[0]])
    width = levels.shape[0] - 1
    assert problem.discrete.density(levels[:width], times[:width], 0.1, grid).shape == (problem.s,) + extent
    assert problem.discrete.multiplier(levels, times, 0.1, grid).shape == (problem.s, problem.m) + extent
    if problem.discrete.flux is not None:
        phi = problem.discrete.flux(levels[:width], times[:width], 0.1, grid)
        assert phi.shape == (problem.s, problem.n) + extent
    if problem.rectangular:
        assert problem.discrete.g(levels, times, 0.1, grid).shape == (problem.m - problem.s,) + extent


def test_burgers_flux_at_two():
    # p = 1: phi = u^2 / 2
    problem = instantiate("burgers", {"p": 1})
    grid = SpatialGrid(dim=1, h=0.1, extent=(3,), boundary_mode=("periodic",))
    window = np.full((1, 1, 3), 2.0)
    phi = problem.discrete.flux(window, np.array([0.0]), 0.1, grid)
    np.testing.assert_array_equal(phi[0, 0], [2.0, 2.0, 2.0])


def test_two_body_continuous_multiplier_rows():
    problem = instantiate("two_body")
    D = lambda nt=0, nx=(): np.array([0.5, -0.5]) if nt == 0 else np.array([0.3, -0.1])
    np.testing.assert_allclose(problem.continuous.multiplier(0.0, D), [[1.0, 1.0], [0.3, -0.1]])


def test_pendulum_density_at_rest():
    problem = instantiate("pendulum")
    window = np.zeros((2, 1))
    psi = problem.discrete.density(window, np.array([0.1, 0.0]), 0.1, SpatialGrid.ode())
    assert psi[0] == pytest.approx(-1.0)


def test_two_body_sign_convention():
    # x1 pulled towards x2 when x1 > x2
    problem = instantiate("two_body")
    accel = problem.acceleration(0.0, np.array([1.0, 0.0]), np.zeros(2))
    assert accel[0] < 0 < accel[1]


def test_manufactured_scalar_exact_solution():
    problem = instantiate("manufactured_scalar", {"amplitude": 2.0, "omega": 3.0})
    value = problem.exact_solution(0.7, {"u0": np.array([0.25]), "t0": 0.2}, SpatialGrid.ode())
    expected = 0.25 + 2.0 / 3.0 * (math.sin(2.1) - math.sin(0.6))
    assert value[0] == pytest.approx(expected, abs=1e-15)


def test_dho_exact_solution_starts_at_initial_data():
    problem = instantiate("dho")
    data = {"u0": np.array([1.0]), "ut0": np.array([0.0]), "t0": 0.0}
    assert problem.exact_solution(0.0, data, SpatialGrid.ode())[0] == pytest.approx(1.0)


def test_two_body_quartic_has_no_exact_solution():
    assert instantiate("two_body", {"beta": 0.5}).exact_solution is None
    assert instantiate("two_body").exact_solution is not None


def test_lotka_volterra_admissible_set():
    problem = instantiate("lotka_volterra")
    with pytest.raises(InadmissibleStateError):
        problem.check_admissible(np.array([[1.0, -0.5], [1.0, 1.0]]))
    problem.check_admissible(np.array([[1.0, 0.5], [1.0, 1.0]]))


def test_resolve_params_defaults_and_overrides():
    assert resolve_params("dho") == {"m": 1.0, "k": 5.0, "gamma": 0.5}
    assert resolve_params("burgers", {"p": 3.0}) == {"p": 3}


@pytest.mark.parametrize("name, params", [
    ("pendulum", {"g_over_l": 0.0}),
    ("burgers", {"p": 1.5}),
    ("burgers", {"p": 0}),
    ("dho", {"k": -1.0}),
    ("dho", {"mass": 1.0}),
    ("lotka_volterra", {"a": "fast"}),
])
def test_resolve_params_rejects(name, params):
    with pytest.raises(ParameterRangeError):
        resolve_params(name, params)


def test_unknown_problem():
    with pytest.raises(UnknownProblemError):
        instantiate("heat")
    with pytest.raises(KeyError):
        instantiate("heat")


def test_trig_field_sample_matches_derivative():
    field = TrigField.from_terms(1, [(1.5, [(0.5, -1.0, (1.0,), 0.3)])])
    grid = SpatialGrid(dim=1, h=0.25, extent=(8,), boundary_mode=("periodic",), origin=(0.1,))
    sampled = field.sample(0.4, grid)
    for j in (0, 3, 7):
        x = grid.point((j,))
        assert sampled[0, j] == pytest.approx(field.derivative(0.4, x)[0], abs=1e-14)


def test_trig_field_derivative_order():
    field = TrigField.from_terms(0, [(0.0, [(2.0, 3.0, (), 0.0)])])
    # d/dt 2 cos(3t) = -6 sin(3t)
    assert field.derivative(0.2, (), nt=1)[0] == pytest.approx(-6.0 * math.sin(0.6))
    assert field.derivative(0.2, (), nt=2)[0] == pytest.approx(-18.0 * math.cos(0.6))
