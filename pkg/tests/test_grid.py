import numpy as np
import pytest

from errors import StencilRangeError
from grid_module import (FieldState, SpatialGrid, TimeGrid, boundary_indices, interior_indices,
                         shift)


def test_time_grid_from_horizon_floors_steps():
    assert TimeGrid.from_horizon(0.0, 0.1, 1.0).steps == 10
    assert TimeGrid.from_horizon(0.0, 0.3, 1.0).steps == 3
    assert TimeGrid.from_horizon(0.0, 1.0, 0.5).steps == 0


def test_time_grid_from_steps():
    grid = TimeGrid.from_steps(1.0, 2.0, 4)
    assert grid.tau == pytest.approx(0.5)
    assert grid.time(4) == pytest.approx(3.0)
    assert grid.horizon == pytest.approx(3.0)
    np.testing.assert_allclose(grid.times(), [1.0, 1.5, 2.0, 2.5, 3.0])


@pytest.mark.parametrize("tau, steps", [(0.0, 1), (-1.0, 1), (0.1, -1)])
def test_time_grid_rejects_bad_values(tau, steps):
    with pytest.raises(ValueError):
        TimeGrid(t0=0.0, tau=tau, steps=steps)


def test_spatial_grid_from_domain_widths():
    periodic = SpatialGrid.from_domain([[0.0, 1.0]], [10])
    assert periodic.h == pytest.approx(0.1)
    bounded = SpatialGrid.from_domain([[0.0, 1.0]], [11], "boundary")
    assert bounded.h == pytest.approx(0.1)
    with pytest.raises(ValueError):
        SpatialGrid.from_domain([[0.0, 1.0], [0.0, 2.0]], [10, 10])


def test_boundary_indices_one_dimension():
    grid = SpatialGrid(dim=1, h=0.1, extent=(5,), boundary_mode=("boundary",))
    assert boundary_indices(grid) == [((0,), (-1,)), ((4,), (1,))]
    assert interior_indices(grid) == [(1,), (2,), (3,)]


def test_boundary_indices_corner_carries_both_normals():
    grid = SpatialGrid(dim=2, h=0.1, extent=(3, 3), boundary_mode=("boundary", "boundary"))
    found = dict(boundary_indices(grid))
    assert len(found) == 8
    assert found[(0, 0)] == (-1, -1)
    assert found[(2, 0)] == (1, -1)
    assert found[(1, 2)] == (0, 1)
    assert (1, 1) not in found


def test_boundary_indices_periodic_axis_is_skipped():
    grid = SpatialGrid(dim=2, h=0.1, extent=(3, 4), boundary_mode=("periodic", "boundary"))
    normals = {normal for _, normal in boundary_indices(grid)}
    assert normals == {(0, -1), (0, 1)}
    full = SpatialGrid(dim=1, h=0.1, extent=(6,), boundary_mode=("periodic",))
    assert boundary_indices(full) == []


def test_boundary_indices_needs_space():
    with pytest.raises(ValueError):
        boundary_indices(SpatialGrid.ode())


def _ramp_state(grid):
    values = np.zeros((2, 1) + grid.extent)
    values[0, 0] = np.arange(grid.n_points).reshape(grid.extent)
    return FieldState(values=values, step=1)


def test_shift_wraps_on_periodic_axis():
    grid = SpatialGrid(dim=1, h=0.1, extent=(5,), boundary_mode=("periodic",))
    state = _ramp_state(grid)
    assert shift(state, grid, (4,), 0, 1)[0] == 0.0
    assert shift(state, grid, (0,), 0, -1)[0] == 4.0


def test_shift_zero_offset_is_identity():
    grid = SpatialGrid(dim=1, h=0.1, extent=(5,), boundary_mode=("boundary",))
    state = _ramp_state(grid)
    assert shift(state, grid, (3,), 0, 0)[0] == 3.0


def test_shift_out_of_range_on_bounded_axis():
    grid = SpatialGrid(dim=1, h=0.1, extent=(5,), boundary_mode=("boundary",))
    state = _ramp_state(grid)
    with pytest.raises(StencilRangeError):
        shift(state, grid, (4,), 0, 1)
    with pytest.raises(IndexError):
        shift(state, grid, (0,), 0, -2)


def test_whole_field_shift_matches_point_shift():
    grid = SpatialGrid(dim=2, h=0.1, extent=(4, 3), boundary_mode=("periodic", "periodic"))
    state = _ramp_state(grid)
    moved = grid.shifted(state.values[0], 1, -1)
    for J in [(0, 0), (2, 1), (3, 2)]:
        assert moved[(0,) + J] == shift(state, grid, J, 1, -1)[0]


def test_equation_box_and_faces():
    grid = SpatialGrid(dim=1, h=0.1, extent=(10,), boundary_mode=("boundary",))
    box = grid.equation_box(((-2, 1),))
    assert box == (slice(2, 9),)
    assert grid.flux_faces(box) == [(0, 1, -1), (0, 8, 1)]
    periodic = SpatialGrid(dim=1, h=0.1, extent=(10,), boundary_mode=("periodic",))
    assert periodic.equation_box(((-2, 1),)) == (slice(0, 10),)
    assert periodic.flux_faces(periodic.equation_box(((-2, 1),))) == []


def test_equation_box_too_small():
    grid = SpatialGrid(dim=1, h=0.1, extent=(3,), boundary_mode=("boundary",))
    with pytest.raises(StencilRangeError):
        grid.equation_box(((-2, 1),))


def test_rotate_is_bit_exact_and_keeps_history():
    values = np.arange(6, dtype=float).reshape(3, 1, 2) + 0.1
    original = values.copy()
    state = FieldState(values=values, step=4)
    newest = np.array([[7.25, 8.5]])
    state.rotate(newest)
    assert state.step == 5
    assert np.array_equal(state.values[0], newest)
    assert np.array_equal(state.values[1], original[0])
    assert np.array_equal(state.values[2], original[1])
    assert np.array_equal(state.history, original[2])


def test_read_only_view_rejects_writes():
    state = FieldState(values=np.zeros((2, 1, 3)), step=0)
    view = state.read_only()
    with pytest.raises(ValueError):
        view.values[0, 0, 0] = 1.0
    state.values[0, 0, 0] = 2.0
    assert view.values[0, 0, 0] == 2.0
