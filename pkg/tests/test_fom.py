import numpy as np
import pytest
import scipy.sparse as sp

from urbanrom.emission import ProfileConfig, synthesize_series
from urbanrom.flow import FluxField, WindParameter, solve_potential_flow
from urbanrom.fom import (
    SnapshotMatrix,
    TransportOperators,
    assemble_convection,
    assemble_diffusion,
    convection_closure,
    operators,
    run_fom,
    split_flux,
    step,
)
from urbanrom.grid import build_grid


def _uniform_x_flux(g, q):
    values = np.zeros(g.n_faces)
    values[: g.n_interior][g.face_axis == 0] = q
    tags = g.boundary_tag
    values[g.n_interior:][tags == 0] = -q
    values[g.n_interior:][tags == 1] = q
    return FluxField(values, g.n_interior)


def test_diffusion_textbook_stencil():
    g = build_grid(3, 1)
    A = assemble_diffusion(g, 1.0).toarray()
    np.testing.assert_array_equal(A, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_diffusion_constant_field(obstacle_grid):
    ones = np.full(obstacle_grid.n_cells, 3.25)
    assert np.all(assemble_diffusion(obstacle_grid, 1.0) @ ones == 0.0)
    A = assemble_diffusion(obstacle_grid, 0.7)
    assert np.abs(A @ ones).max() <= 1e-15
    assert abs(A - A.T).max() == 0.0
    off = A - sp.diags(A.diagonal())
    assert off.max() <= 0.0


def test_diffusion_face_loop_oracle(rng):
    g = build_grid(10, 10, 20.0, 10.0, blocked_cells=[(3, 3), (3, 4)])
    nu = 0.3
    c = rng.standard_normal(g.n_cells)
    out = np.zeros(g.n_cells)
    for f in range(g.n_interior):
        o, n = g.owner[f], g.neighbour[f]
        flux = nu * g.face_area[f] / g.face_delta[f] * (c[o] - c[n])
        out[o] += flux
        out[n] -= flux
    np.testing.assert_allclose(assemble_diffusion(g, nu) @ c, out, rtol=0, atol=1e-13 * np.abs(out).max())


def test_diffusion_rejects_nonpositive_nu(obstacle_grid):
    with pytest.raises(ValueError):
        assemble_diffusion(obstacle_grid, 0.0)


def test_convection_zero_flux(obstacle_grid):
    C = assemble_convection(obstacle_grid, FluxField.zeros(obstacle_grid))
    assert C.count_nonzero() == 0


def test_convection_upwind_stencil():
    g = build_grid(3, 1)
    q = 2.5
    C = assemble_convection(g, _uniform_x_flux(g, q)).toarray()
    np.testing.assert_array_equal(C, [[q, 0, 0], [-q, q, 0], [0, -q, q]])


def test_convection_global_balance(obstacle_grid):
    g = obstacle_grid
    phi = solve_potential_flow(g, WindParameter(2.0, 0.9))
    c = np.full(g.n_cells, 1.7)
    total = (assemble_convection(g, phi) @ c).sum()
    outflow = np.maximum(phi.boundary, 0.0).sum() * 1.7
    assert abs(total - outflow) <= 1e-12 * outflow


def test_convection_linear_in_split_flux(obstacle_grid, rng):
    g = obstacle_grid
    p1 = solve_potential_flow(g, WindParameter(1.0, 0.3))
    p2 = solve_potential_flow(g, WindParameter(2.0, 1.1))
    from urbanrom.fom import assemble_convection_split
    a1, b1 = split_flux(p1)
    a2, b2 = split_flux(p2)
    alpha, beta = 0.7, -1.3
    lhs = assemble_convection_split(g, alpha * a1 + beta * a2, alpha * b1 + beta * b2)
    rhs = alpha * assemble_convection_split(g, a1, b1) + beta * assemble_convection_split(g, a2, b2)
    assert abs(lhs - rhs).max() <= 1e-14 * abs(rhs).max()


def test_convection_row_sums_on_outflow_cells(obstacle_grid):
    g = obstacle_grid
    phi = solve_potential_flow(g, WindParameter(3.0, 2.0))
    C = assemble_convection(g, phi)
    rows = np.asarray(C.sum(axis=1)).ravel()
    net_out = np.bincount(g.boundary_cell, weights=np.maximum(phi.boundary, 0), minlength=g.n_cells)
    mask = net_out > 0
    assert np.all(rows[mask] >= -1e-12)


def test_convection_warns_on_divergent_flux():
    g = build_grid(4, 4)
    values = np.zeros(g.n_faces)
    values[0] = 1.0
    with pytest.warns(RuntimeWarning, match="divergence"):
        assemble_convection(g, FluxField(values, g.n_interior))


def test_step_trivial_cases(obstacle_grid):
    g = obstacle_grid
    phi = solve_potential_flow(g, WindParameter(1.0, 0.5))
    ops = operators(g, phi, 1e-3)
    z = np.zeros(g.n_cells)
    assert np.all(step(ops, z, z, 10.0) == 0.0)
    with pytest.raises(ValueError):
        step(ops, z, z, 0.0)


def test_step_mass_identity(rng):
    g = build_grid(6, 5)
    n = g.n_cells
    empty = sp.csr_matrix((n, n))
    ops = TransportOperators(g.volumes, empty, empty, np.zeros(n))
    c = rng.uniform(size=n)
    f = np.full(n, 0.125)
    np.testing.assert_allclose(step(ops, c, f, 4.0), c + 4.0 * f, rtol=1e-15)


def test_step_dense_oracle(rng):
    g = build_grid(10, 10, 10.0, 10.0, blocked_cells=[(5, 5)])
    phi = solve_potential_flow(g, WindParameter(0.8, 2.4))
    ops = operators(g, phi, 0.05, inlet=0.3)
    c = rng.uniform(size=g.n_cells)
    f = rng.uniform(size=g.n_cells)
    dt = 7.0
    K = np.diag(g.volumes / dt) + ops.diffusion.toarray() + ops.convection.toarray()
    rhs = g.volumes / dt * c + g.volumes * f - ops.closure
    np.testing.assert_allclose(step(ops, c, f, dt), np.linalg.solve(K, rhs), rtol=1e-10, atol=1e-12)


def test_inlet_closure_sign():
    g = build_grid(3, 1)
    phi = _uniform_x_flux(g, 2.0)
    r = convection_closure(g, phi, inlet=0.5)
    np.testing.assert_array_equal(r, [-1.0, 0.0, 0.0])


def _small_series(g, days=1, seed=0):
    return synthesize_series(seed, days, g.road_cells, ProfileConfig())


def test_run_fom_zero_horizon(obstacle_grid):
    snaps, _ = run_fom(obstacle_grid, FluxField.zeros(obstacle_grid), _small_series(obstacle_grid), 0.0, 100.0)
    assert snaps.n_snapshots == 1
    assert not np.any(snaps.values)


def test_run_fom_zero_source(obstacle_grid):
    g = obstacle_grid
    series = synthesize_series(0, 1, g.road_cells, ProfileConfig(rate=0.0))
    phi = solve_potential_flow(g, WindParameter(2.0, 1.0))
    snaps, _ = run_fom(g, phi, series, 3600.0, 100.0, 600.0)
    assert snaps.n_snapshots == 7
    assert not np.any(snaps.values)
    np.testing.assert_array_equal(snaps.times, np.arange(7) * 600.0)


def test_run_fom_record_cadence_check(obstacle_grid):
    g = obstacle_grid
    with pytest.raises(ValueError):
        run_fom(g, FluxField.zeros(g), _small_series(g), 3600.0, 100.0, 150.0)


def test_time_varying_flux_matches_fixed(obstacle_grid):
    g = obstacle_grid
    phi = solve_potential_flow(g, WindParameter(2.0, 1.0))
    series = _small_series(g)
    a, _ = run_fom(g, phi, series, 3600.0, 100.0, 300.0, nu=0.01)
    b, _ = run_fom(g, lambda t: phi, series, 3600.0, 100.0, 300.0, nu=0.01)
    np.testing.assert_allclose(b.values, a.values, rtol=1e-9, atol=1e-9 * np.abs(a.values).max())


def test_positivity(obstacle_grid):
    g = obstacle_grid
    phi = solve_potential_flow(g, WindParameter(1.5, 4.0))
    snaps, _ = run_fom(g, phi, _small_series(g), 7200.0, 100.0, 100.0)
    assert snaps.values.min() >= -1e-18


def test_snapshot_matrix_checks():
    with pytest.raises(ValueError):
        SnapshotMatrix(np.zeros((3, 2)), [0.0])
    with pytest.raises(ValueError):
        SnapshotMatrix(np.array([[np.nan]]), [0.0])
    m = SnapshotMatrix.concatenate([SnapshotMatrix(np.ones((2, 1)), [0.0]),
                                    SnapshotMatrix(np.zeros((2, 2)), [1.0, 2.0])])
    assert m.n_snapshots == 3
