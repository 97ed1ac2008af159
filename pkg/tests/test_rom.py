import numpy as np
import pytest

from urbanrom.deim import build_deim
from urbanrom.emission import PointSource, ProfileConfig, synthesize_series
from urbanrom.flow import FluxField, unit_wind_fluxes
from urbanrom.fom import SnapshotMatrix, assemble_convection, convection_closure, operators, run_fom
from urbanrom.grid import build_grid
from urbanrom.mlp import Mlp, encode_wind
from urbanrom.pod import compute_pod
from urbanrom.rom import (
    ReducedTrajectory,
    RomError,
    assemble_gamma,
    assemble_reduced,
    build_rom,
    contract_convection,
    evaluate,
    flux_coefficients,
    load_rom,
    nn_flux_schedule,
    projected_flux_schedule,
    run_rom,
    save_rom,
    stack_flux,
    write_metrics,
)

T, DT = 3600.0, 100.0


@pytest.fixture(scope="module")
def case():
    g = build_grid(16, 16, 160.0, 160.0, obstacles=[(50.0, 60.0, 90.0, 100.0)],
                   roads=[[(0.0, 25.0), (160.0, 25.0)], [(125.0, 0.0), (125.0, 160.0)]])
    px, py = unit_wind_fluxes(g)

    def wind(t):
        t = np.asarray(t, dtype=float)
        return 2.0 + np.sin(t / 900.0), 0.4 + 0.8 * t / T

    def flux(t):
        mu1, mu2 = wind(t)
        return FluxField(mu1 * np.cos(mu2) * px.values + mu1 * np.sin(mu2) * py.values,
                         g.n_interior)

    series = synthesize_series(2, 1, g.road_cells, ProfileConfig())
    snaps, _ = run_fom(g, flux, series, T, DT, DT, nu=0.05, t_offset=30000.0)
    Phi = compute_pod(snaps, g, rank_tol=1e-15)
    F = np.column_stack([stack_flux(flux(t)) for t in snaps.times])
    Psi = compute_pod(F, None, role="flux")
    ops = operators(g, flux(0.0), nu=0.05)
    return dict(g=g, flux=flux, wind=wind, series=series, snaps=snaps, Phi=Phi, Psi=Psi, ops=ops)


def test_reduced_diffusion_of_constant_mode():
    g = build_grid(5, 5)
    const = np.full(g.n_cells, 1.0 / np.sqrt(g.volumes.sum()))
    Phi = compute_pod(const, g)
    ops = operators(g, FluxField.zeros(g), nu=0.3)
    M_r, B_r = assemble_reduced(Phi, ops)
    assert abs(B_r[0, 0]) <= 1e-15
    np.testing.assert_allclose(M_r, [[1.0]], atol=1e-14)


def test_reduced_diffusion_dense_oracle(case, rng):
    Phi, ops = case["Phi"], case["ops"]
    _, B_r = assemble_reduced(Phi, ops)
    A = ops.diffusion.toarray()
    V = Phi.modes
    np.testing.assert_allclose(B_r, V.T @ A @ V, atol=1e-12 * np.abs(B_r).max())


def test_mass_identity_checked(case):
    from urbanrom.pod import PodBasis
    Phi = case["Phi"]
    bad = PodBasis(2.0 * Phi.modes, Phi.eigenvalues, Phi.weights)
    with pytest.raises(RomError, match="identity"):
        assemble_reduced(bad, case["ops"])


def test_gamma_zero_mode(case):
    g, Phi = case["g"], case["Phi"]
    Psi = np.zeros((2 * g.n_faces, 2))
    Psi[:, 1] = case["Psi"].modes[:, 0]
    Gamma, _ = assemble_gamma(g, Psi, Phi)
    assert not np.any(Gamma[:, :, 0])
    assert np.any(Gamma[:, :, 1])


def test_gamma_single_training_flux(case):
    g, Phi = case["g"], case["Phi"]
    phi = case["flux"](700.0)
    Gamma, Gc = assemble_gamma(g, stack_flux(phi)[:, None], Phi)
    Cr = contract_convection(Gamma, [1.0])
    direct = Phi.modes.T @ (assemble_convection(g, phi) @ Phi.modes)
    np.testing.assert_allclose(Cr, direct, atol=1e-12 * np.abs(direct).max())
    np.testing.assert_allclose(Gc[:, 0] * 0.7, Phi.modes.T @ convection_closure(g, phi, 0.7),
                               atol=1e-14)


def test_gamma_dense_oracle(rng):
    g = build_grid(10, 10, blocked_cells=[(4, 4)])
    Psi = rng.standard_normal((2 * g.n_faces, 3))
    V = rng.standard_normal((g.n_cells, 4))
    Gamma, _ = assemble_gamma(g, Psi, V)
    from urbanrom.fom import assemble_convection_split
    for k in range(3):
        a, b = Psi[: g.n_faces, k], Psi[g.n_faces:, k]
        dense = V.T @ assemble_convection_split(g, a, b).toarray() @ V
        np.testing.assert_allclose(Gamma[:, :, k], dense, atol=1e-12 * np.abs(dense).max())


def test_gamma_scheme_mismatch(case):
    with pytest.raises(RomError):
        assemble_gamma(case["g"], case["Psi"], case["Phi"], scheme="central")


def test_contraction_examples(case, rng):
    g, Phi, Psi = case["g"], case["Phi"], case["Psi"]
    Gamma, _ = assemble_gamma(g, Psi, Phi)
    k = 1
    assert np.array_equal(contract_convection(Gamma, np.eye(Psi.n_modes)[k]), Gamma[:, :, k])
    assert not np.any(contract_convection(Gamma, np.zeros(Psi.n_modes)))
    for t in (0.0, 1234.0, 3600.0):
        phi = case["flux"](t)
        Cr = contract_convection(Gamma, flux_coefficients(Psi, phi))
        full = Phi.modes.T @ (assemble_convection(g, phi) @ Phi.modes)
        assert np.abs(Cr - full).max() <= 1e-8 * np.abs(full).max()
    P = rng.standard_normal((Psi.n_modes, 3))
    batch = contract_convection(Gamma, P)
    np.testing.assert_allclose(batch[2], contract_convection(Gamma, P[:, 2]), rtol=1e-13)
    with pytest.raises(RomError):
        contract_convection(Gamma, np.zeros(Psi.n_modes + 1))


def test_zero_source_zero_trajectory(case):
    g = case["g"]
    rom = build_rom(g, case["Phi"], case["Psi"], case["ops"])
    quiet = synthesize_series(0, 1, g.road_cells, ProfileConfig(rate=0.0))
    tr = run_rom(rom, projected_flux_schedule(case["Psi"], case["flux"]), quiet, T, DT,
                 source_path="projection")
    assert not np.any(tr.coefficients)


def test_full_rank_oracle(case):
    g, snaps = case["g"], case["snaps"]
    rom = build_rom(g, case["Phi"], case["Psi"], case["ops"])
    tr = run_rom(rom, projected_flux_schedule(case["Psi"], case["flux"]), case["series"], T, DT,
                 source_path="projection", t_offset=30000.0)
    m = evaluate(snaps, ReducedTrajectory(tr.coefficients, tr.times - 30000.0), case["Phi"])
    assert m.n_skipped == 1
    assert m.err_rb <= 1e-6


def _source_basis(case):
    g, series = case["g"], case["series"]
    F = np.zeros((g.n_cells, 25))
    F[g.road_cells] = series.values_many(np.arange(0.0, 7201.0, 300.0))
    return compute_pod(F, g)


def test_fixed_flux_paths_agree(case):
    g, Psi = case["g"], case["Psi"]
    deim = build_deim(_source_basis(case), case["Phi"], support=g.road_cells)
    rom = build_rom(g, case["Phi"], Psi, case["ops"], deim)
    pi = flux_coefficients(Psi, case["flux"](0.0))
    point = PointSource(case["series"], deim.magic_points)
    a = run_rom(rom, pi, point, T, DT, source_path="deim", t_offset=30000.0)
    b = run_rom(rom, lambda t: np.repeat(pi[:, None], np.size(t), axis=1), point, T, DT,
                source_path="deim", t_offset=30000.0)
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=1e-9,
                               atol=1e-12 * np.abs(a.coefficients).max())


def test_deim_path_accepts_only_point_values(case):
    g, Psi = case["g"], case["Psi"]
    rom = build_rom(g, case["Phi"], Psi, case["ops"])
    pi = flux_coefficients(Psi, case["flux"](0.0))
    with pytest.raises(RomError):
        run_rom(rom, pi, case["series"], T, DT, source_path="deim")
    with pytest.raises(RomError):
        run_rom(rom, pi, PointSource(case["series"], g.road_cells[:3]), T, DT, source_path="deim")
    with pytest.raises(ValueError):
        run_rom(rom, pi, case["series"], T, DT, source_path="bogus")


def test_nn_schedule_shape(case):
    net = Mlp([2, 4, case["Psi"].n_modes], seed=0)

    def enc(t):
        return encode_wind(*case["wind"](t))

    sched = nn_flux_schedule(net, enc, 3)
    assert sched(np.array([0.0, 100.0])).shape == (3, 2)


def test_evaluate_examples(case, tmp_path):
    snaps, Phi = case["snaps"], case["Phi"]
    zero = ReducedTrajectory(np.zeros((Phi.n_modes, snaps.n_snapshots)), snaps.times)
    m = evaluate(snaps, zero, Phi, fom_seconds=1.0)
    assert m.err_rb == 1.0
    exact = ReducedTrajectory(Phi.modes.T @ (Phi.weights[:, None] * snaps.values), snaps.times)
    m = evaluate(snaps, exact, Phi)
    assert m.err_rb <= 1e-10
    same = SnapshotMatrix(Phi.modes @ exact.coefficients, snaps.times)
    assert not np.any(evaluate(same, exact, Phi).worst_field)
    write_metrics(m, tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == m.errors.size + 1
    with pytest.raises(RomError):
        evaluate(snaps, ReducedTrajectory(zero.coefficients[:, :2], snaps.times[:2]), Phi)


def test_trajectory_validation():
    with pytest.raises(RomError):
        ReducedTrajectory(np.array([[np.inf]]), np.array([0.0]))
    with pytest.raises(RomError):
        ReducedTrajectory(np.zeros((1, 2)), np.array([1.0, 1.0]))


def test_save_load_roundtrip(case, tmp_path):
    g = case["g"]
    U = _source_basis(case)
    deim = build_deim(U, case["Phi"], n_deim=5, support=g.road_cells)
    rom = build_rom(g, case["Phi"], case["Psi"], case["ops"], deim)
    save_rom(rom, tmp_path / "rom")
    back = load_rom(tmp_path / "rom")
    for name in ("M_r", "B_r", "Gamma", "Gc"):
        assert np.array_equal(getattr(back, name), getattr(rom, name))
    assert np.array_equal(back.deim.magic_points, deim.magic_points)
    online = load_rom(tmp_path / "rom", online_only=True)
    assert np.array_equal(online.F_r, rom.F_r)
    pi = flux_coefficients(case["Psi"], case["flux"](0.0))
    point = PointSource(case["series"], deim.magic_points)
    a = run_rom(rom, pi, point, 600.0, DT)
    b = run_rom(online, pi, point, 600.0, DT)
    assert np.array_equal(a.coefficients, b.coefficients)


def test_source_path_ordering(case):
    g, series, Phi, Psi = case["g"], case["series"], case["Phi"], case["Psi"]
    t = 30000.0 + np.arange(0.0, T + 1, DT)
    F = np.zeros((g.n_cells, t.size))
    F[g.road_cells] = series.values_many(t)
    S = compute_pod(F, g)
    sched = projected_flux_schedule(Psi, case["flux"])
    Phi20 = Phi.truncate(20)

    def err(n_deim, path):
        deim = build_deim(S, Phi20, n_deim, support=g.road_cells)
        rom = build_rom(g, Phi20, Psi, case["ops"], deim)
        src = PointSource(series, deim.magic_points) if path == "deim" else series
        tr = run_rom(rom, sched, src, T, DT, source_path=path, t_offset=30000.0)
        return evaluate(case["snaps"], ReducedTrajectory(tr.coefficients, tr.times - 30000.0),
                        Phi20).err_rb

    proj = err(S.n_modes, "projection")
    for n_deim in (3, 6, 9):
        assert proj <= err(n_deim, "deim") + 1e-12
    assert abs(err(S.n_modes, "deim") - proj) <= 1e-8
