import numpy as np
import pytest

from urbanrom.grid import (
    GridConfig,
    GridError,
    build_grid,
    grid_from_config,
    inner_product,
    write_grid_csv,
)


def test_full_4x4_counts():
    g = build_grid(4, 4)
    assert g.n_cells == 16
    assert g.n_interior == 24
    assert g.n_boundary == 16
    assert g.wall_cell.size == 0


def test_single_blocked_cell():
    g = build_grid(4, 4, blocked_cells=[(1, 1)])
    assert g.n_cells == 15
    assert g.cell_id[1, 1] == -1
    assert g.wall_cell.size == 4
    neighbours = {g.cell_id[1, 0], g.cell_id[1, 2], g.cell_id[0, 1], g.cell_id[2, 1]}
    assert set(g.wall_cell.tolist()) == neighbours


def test_200x200_counting_oracle():
    # six rectangles covering 1000 + 450 + 400 + 3 * 100 = 2150 cells
    rects = [
        (10, 10, 60, 30),
        (100, 20, 130, 35),
        (40, 100, 60, 120),
        (150, 150, 160, 160),
        (20, 170, 30, 180),
        (170, 60, 180, 70),
    ]
    g = build_grid(200, 200, 200.0, 200.0, obstacles=rects)
    ii, jj = np.meshgrid(np.arange(200) + 0.5, np.arange(200) + 0.5)
    mask = np.zeros((200, 200), dtype=bool)
    for x0, y0, x1, y1 in rects:
        mask |= (ii > x0) & (ii < x1) & (jj > y0) & (jj < y1)
    assert mask.sum() == 2150
    assert g.n_cells == 40000 - 2150 == 37850


def test_invariants(obstacle_grid):
    g = obstacle_grid
    assert g.n_cells == g.nx * g.ny - g.blocked.sum()
    assert np.all(g.owner < g.neighbour)
    assert np.all((g.owner >= 0) & (g.neighbour < g.n_cells))
    np.testing.assert_allclose(g.cell_face_vector_sum(), 0.0, atol=1e-14)
    assert g.road_cells.size > 0
    assert not np.any(g.blocked[g.cell_j[g.road_cells], g.cell_i[g.road_cells]])
    # each cell has exactly four faces of some kind
    count = np.bincount(g.owner, minlength=g.n_cells) + np.bincount(g.neighbour, minlength=g.n_cells)
    count += np.bincount(g.boundary_cell, minlength=g.n_cells)
    count += np.bincount(g.wall_cell, minlength=g.n_cells)
    assert np.all(count == 4)


def test_road_cells_within_half_cell():
    g = build_grid(10, 10, 10.0, 10.0, roads=[[(0.0, 2.5), (10.0, 2.5)]])
    assert set(g.cell_j[g.road_cells].tolist()) == {2}
    assert g.road_cells.size == 10
    np.testing.assert_allclose(g.road_arclength, np.arange(10) + 0.5)


def test_disconnecting_obstacle_rejected():
    with pytest.raises(GridError, match="components"):
        build_grid(10, 10, 10.0, 10.0, obstacles=[(4.0, 0.0, 6.0, 10.0)])


def test_road_through_obstacle_rejected():
    with pytest.raises(GridError, match="intersects"):
        build_grid(10, 10, 10.0, 10.0, obstacles=[(3.0, 3.0, 6.0, 6.0)],
                   roads=[[(0.0, 4.5), (10.0, 4.5)]])


def test_config_validation():
    with pytest.raises(GridError):
        GridConfig(10.0, 10.0, 3, 10).validate()
    with pytest.raises(GridError, match="outside"):
        GridConfig(10.0, 10.0, 10, 10, obstacles=((5.0, 5.0, 12.0, 6.0),)).validate()
    with pytest.raises(GridError, match="no road"):
        grid_from_config(GridConfig(10.0, 10.0, 10, 10), require_roads=True)


def test_inner_product_examples(rng):
    g = build_grid(2, 2)
    one = np.ones(4)
    assert inner_product(g, one, one) == 4.0
    a = np.array([1.0, 2.0, 0.0, 0.0])
    b = np.array([0.0, 0.0, 3.0, 4.0])
    assert inner_product(g, a, b) == 0.0


def test_inner_product_loop_oracle(rng):
    g = build_grid(10, 10, 25.0, 15.0, blocked_cells=[(4, 4), (4, 5)])
    a, b = rng.standard_normal((2, g.n_cells))
    total = 0.0
    for k in range(g.n_cells):
        total += a[k] * b[k] * g.dx * g.dy
    assert abs(inner_product(g, a, b) - total) <= 1e-12 * abs(total)


def test_inner_product_length_check():
    g = build_grid(4, 4)
    with pytest.raises(ValueError):
        inner_product(g, np.ones(15), np.ones(16))


def test_grid_csv(tmp_path, obstacle_grid):
    path = tmp_path / "grid.csv"
    write_grid_csv(obstacle_grid, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "cell,x,y,flags"
    assert len(lines) == obstacle_grid.n_cells + 1
