"""Young measure estimators: embedding, oscillation/concentration, pairing."""

import numpy as np
import pytest

from dissipeuler.solver import Trajectory
from dissipeuler.spectral import TorusGrid, l2_norm_sq, taylor_green
from dissipeuler.young import (
    CellPartition,
    TestIntegrand,
    YoungMeasureError,
    barycenter,
    dirac_embed,
    energy_of,
    estimate_from_family,
    g2_norm,
    measure_to_dict,
    pairing,
    quadratic_dictionary,
    slab_energies,
    weakstar_distance,
)

TWO_PI = 2.0 * np.pi


def constant_trajectory(grid, c, times):
    vals = np.zeros((len(times), grid.dim) + grid.shape)
    for i, ci in enumerate(c):
        vals[:, i] = ci
    return Trajectory(grid, np.asarray(times, dtype=float), vals)


def field_trajectory(grid, fn, times):
    """Trajectory from fn(t, x_arrays) -> (dim,)+shape physical values."""
    x = grid.points()
    vals = np.stack([fn(t, x) for t in times])
    return Trajectory(grid, np.asarray(times, dtype=float), vals)


def sign_oscillation(grid, m, a=1.0):
    """a * sign(sin(m x1)) e2 sampled off-lattice so no zeros occur."""
    n = grid.n
    xo = (np.arange(n) + 0.5) * TWO_PI / n
    col = a * np.sign(np.sin(m * xo))
    vals = np.zeros((grid.dim,) + grid.shape)
    vals[1] = col[(slice(None),) + (None,) * (grid.dim - 1)]
    return vals


def make_partition(grid, n_t=2, n_x=4, t0=0.0, t1=1.0):
    return CellPartition(grid.dim, grid.n, n_t, n_x, t0, t1)


ENERGY = TestIntegrand("speed2", quad=(np.eye(2), np.zeros(2), 0.0))
ONE = TestIntegrand("one", quad=(np.zeros((2, 2)), np.zeros(2), 1.0))


class TestDiracEmbed:
    def test_constant_field_single_bin(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = constant_trajectory(grid, (0.3, -0.4), [0.0, 0.5, 1.0])
        V = dirac_embed(traj, part, radius=2.0)
        assert V.lam_total() == 0.0
        assert V.clipped_fraction == 0.0
        # exactly one occupied bin per cell, carrying the exact value
        for cell in range(part.n_cells):
            occ = np.nonzero(V.nu_mass[cell])[0]
            assert len(occ) == 1
            assert V.nu_mass[cell, occ[0]] == pytest.approx(1.0)
            assert np.allclose(V.nu_mean[cell, occ[0]], [0.3, -0.4])

    def test_barycenter_is_cell_average(self):
        grid = TorusGrid(2, 32)
        part = make_partition(grid, n_t=1, n_x=4)
        traj = field_trajectory(
            grid, lambda t, x: np.stack([
                np.broadcast_to(np.sin(x[0]), grid.shape),
                np.broadcast_to(np.cos(x[1]), grid.shape)]), [0.0, 1.0])
        V = dirac_embed(traj, part, radius=2.0)
        bary = barycenter(V)
        space_idx = part.space_cell_index()
        vals = traj.values.reshape(2, 2, -1)  # (snap, dim, pts)
        for cell in range(part.n_cells):
            sel = space_idx == cell
            avg = vals[:, :, sel].mean(axis=(0, 2))
            assert np.allclose(bary[cell], avg, atol=1e-12)

    def test_pairing_energy_matches_spectral_quadrature(self):
        grid = TorusGrid(2, 32)
        part = make_partition(grid, n_t=2, n_x=4)
        u = taylor_green(grid)
        traj = field_trajectory(grid, lambda t, x: u.to_physical(),
                                [0.0, 0.25, 0.5, 0.75, 1.0])
        V = dirac_embed(traj, part, radius=2.0)
        # <V, |xi|^2 x 1> = int_0^1 ||u||^2 dt = 2 * time-integrated energy
        got = pairing(V, ENERGY)
        assert got == pytest.approx(l2_norm_sq(u), rel=2e-2)

    def test_clipping_reported_not_silent(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = constant_trajectory(grid, (3.0, 0.0), [0.0, 1.0])
        V = dirac_embed(traj, part, radius=2.0)
        assert V.clipped_fraction == 1.0
        assert V.lam_total() == 0.0


class TestFamilyEstimator:
    def test_single_trajectory_below_radius_equals_dirac(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = field_trajectory(
            grid, lambda t, x: 0.5 * np.stack([
                np.broadcast_to(np.sin(x[0] + t), grid.shape),
                np.broadcast_to(np.cos(x[1]), grid.shape)]), [0.0, 0.5, 1.0])
        Vf = estimate_from_family([traj], part, radius=2.0)
        Vd = dirac_embed(traj, part, radius=2.0)
        assert np.allclose(Vf.nu_mass, Vd.nu_mass)
        assert np.allclose(Vf.nu_mean, Vd.nu_mean)
        assert np.allclose(Vf.nu_sec, Vd.nu_sec)
        assert Vf.lam_total() == 0.0

    def test_oscillation_family_recovers_two_point_measure(self):
        # u_m = a sign(sin(m x1)) e2 oscillates between +-a e2; the pooled
        # histogram approaches (delta_{+a} + delta_{-a}) / 2 on bins
        grid = TorusGrid(2, 256)
        part = make_partition(grid, n_t=1, n_x=4)
        a, radius, bins = 1.0, 2.0, 16
        m = 61
        traj = Trajectory(grid, np.array([0.0, 1.0]),
                          np.stack([sign_oscillation(grid, m, a)] * 2))
        V = estimate_from_family([traj], part, radius, bins_per_axis=bins)

        ref = np.zeros_like(V.nu_mass)
        w = 2 * radius / bins
        bin_plus = int((0 + radius) / w) * bins + int((a + radius) / w)
        bin_minus = int((0 + radius) / w) * bins + int((-a + radius) / w)
        ref[:, bin_plus] = 0.5
        ref[:, bin_minus] = 0.5
        tv = 0.5 * np.abs(V.nu_mass - ref).sum(axis=1).max()
        assert tv < 0.05

    def test_oscillation_family_total_variation_shrinks(self):
        grid = TorusGrid(2, 256)
        part = make_partition(grid, n_t=1, n_x=4)
        tvs = []
        for m in (5, 11, 23, 61):
            traj = Trajectory(grid, np.array([0.0, 1.0]),
                              np.stack([sign_oscillation(grid, m)] * 2))
            V = estimate_from_family([traj], part, 2.0, bins_per_axis=16)
            ref = np.zeros_like(V.nu_mass)
            w = 4.0 / 16
            ref[:, int(2.0 / w) * 16 + int(3.0 / w)] = 0.5
            ref[:, int(2.0 / w) * 16 + int(1.0 / w)] = 0.5
            tvs.append(0.5 * np.abs(V.nu_mass - ref).sum(axis=1).max())
        assert tvs[-1] < tvs[0]
        assert tvs[-1] < 0.05

    def test_concentration_family_mass_and_angle(self):
        # u_m = m e1 on a patch of measure (2pi)^2/m^2: per-slab lambda mass
        # m^2 |A_m| = (2pi)^2 and all angle mass in the e1 sphere bin
        grid = TorusGrid(2, 128)
        part = make_partition(grid, n_t=2, n_x=4)
        m = 8
        width = grid.n // m  # patch side in grid points: area (2pi/m)^2
        vals = np.zeros((grid.dim,) + grid.shape)
        vals[0, :width, :width] = m
        traj = Trajectory(grid, np.array([0.0, 0.5, 1.0]), np.stack([vals] * 3))
        V = estimate_from_family([traj], part, radius=2.0)

        expected = TWO_PI ** 2
        for slab in range(part.n_t):
            assert V.lam_t(slab) == pytest.approx(expected, rel=0.05)
        # angle histogram concentrated where (1, 0) lands
        total_inf = (V.inf_mass * V.lam_mass[:, None]).sum(axis=0)
        e1_bin = np.argmax(total_inf)
        assert total_inf[e1_bin] == pytest.approx(V.lam_total(), rel=1e-12)
        mean_dir = V.inf_mean[V.lam_mass > 0, e1_bin]
        assert np.allclose(mean_dir, [1.0, 0.0])

    def test_pure_concentration_barycenter_zero_energy_is_lambda(self):
        grid = TorusGrid(2, 64)
        part = make_partition(grid, n_t=1, n_x=2)
        vals = np.zeros((2,) + grid.shape)
        vals[0, :8, :8] = 8.0
        traj = Trajectory(grid, np.array([0.0, 1.0]), np.stack([vals] * 2))
        V = estimate_from_family([traj], part, radius=2.0)
        # below-radius samples are exactly zero there, so barycenter is 0
        # and the oscillation part carries no energy
        assert np.max(np.abs(barycenter(V))) == 0.0
        assert energy_of(V, 0) == pytest.approx(0.5 * V.lam_t(0))

    def test_empty_family_rejected(self):
        grid = TorusGrid(2, 16)
        with pytest.raises(YoungMeasureError):
            estimate_from_family([], make_partition(grid), 1.0)

    def test_permutation_invariance(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        t1 = constant_trajectory(grid, (0.5, 0.0), [0.0, 1.0])
        t2 = constant_trajectory(grid, (-0.25, 0.1), [0.0, 1.0])
        Va = estimate_from_family([t1, t2], part, 2.0)
        Vb = estimate_from_family([t2, t1], part, 2.0)
        assert np.allclose(Va.nu_mass, Vb.nu_mass)
        assert np.allclose(Va.nu_mean, Vb.nu_mean)
        assert np.allclose(Va.lam_mass, Vb.lam_mass)


class TestPairing:
    def test_constant_integrand_gives_volume(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid, n_t=2, n_x=2, t0=0.0, t1=0.5)
        traj = constant_trajectory(grid, (0.1, 0.2), [0.0, 0.25, 0.5])
        V = dirac_embed(traj, part, 2.0)
        assert pairing(V, ONE) == pytest.approx(part.total_volume, rel=1e-12)

    def test_energy_integrand_sees_full_concentration(self):
        grid = TorusGrid(2, 64)
        part = make_partition(grid, n_t=1, n_x=2)
        vals = np.zeros((2,) + grid.shape)
        vals[1, :8, :8] = 16.0
        traj = Trajectory(grid, np.array([0.0, 1.0]), np.stack([vals] * 2))
        V = estimate_from_family([traj], part, radius=2.0)
        got = pairing(V, ENERGY)
        assert got == pytest.approx(V.lam_total(), rel=1e-12)

    def test_tensor_pairing_matches_direct_quadrature(self):
        # <nu, xi_i xi_j> against pointwise u_i u_j under a trig weight
        grid = TorusGrid(2, 64)
        part = make_partition(grid, n_t=1, n_x=16)
        u = taylor_green(grid)
        traj = field_trajectory(grid, lambda t, x: u.to_physical(), [0.0, 1.0])
        V = dirac_embed(traj, part, 2.0)

        f = TestIntegrand("xi0sq", quad=(np.diag([1.0, 0.0]), np.zeros(2), 0.0))
        got = pairing(V, f, lambda t, xc: np.cos(2.0 * xc[:, 1]))
        phys = u.to_physical()
        x = grid.points()
        direct = np.mean(phys[0] ** 2 * np.cos(2.0 * x[1])) * TWO_PI ** 2
        assert abs(direct) > 1.0  # the oracle integral is genuinely nonzero
        assert got == pytest.approx(direct, rel=0.05)

    def test_pairing_linear_in_integrand(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = constant_trajectory(grid, (0.4, 0.1), [0.0, 1.0])
        V = dirac_embed(traj, part, 2.0)
        a = pairing(V, ENERGY)
        b = pairing(V, ONE)
        comb = TestIntegrand("combo", quad=(2.0 * np.eye(2), np.zeros(2), 3.0))
        assert pairing(V, comb) == pytest.approx(2 * a + 3 * b, rel=1e-12)

    def test_pairing_monotone_for_nonnegative(self):
        grid = TorusGrid(2, 64)
        part = make_partition(grid, n_t=1, n_x=2)
        vals = np.zeros((2,) + grid.shape)
        vals[0, :8, :8] = 8.0
        vals[1] = 0.3
        traj = Trajectory(grid, np.array([0.0, 1.0]), np.stack([vals] * 2))
        V = estimate_from_family([traj], part, radius=2.0)
        small = TestIntegrand("half", quad=(0.5 * np.eye(2), np.zeros(2), 0.0))
        assert pairing(V, small) <= pairing(V, ENERGY)
        assert pairing(V, small) >= 0.0

    def test_integrand_requires_recession(self):
        with pytest.raises(YoungMeasureError):
            TestIntegrand("partial", f=lambda xi: np.abs(xi).sum(axis=-1))


class TestEnergyAndDistance:
    def test_constant_energy_closed_form(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        c = (0.6, -0.8)
        traj = constant_trajectory(grid, c, [0.0, 0.5, 1.0])
        V = dirac_embed(traj, part, 2.0)
        expected = 0.5 * (c[0] ** 2 + c[1] ** 2) * TWO_PI ** 2
        for slab in range(part.n_t):
            assert energy_of(V, slab) == pytest.approx(expected, rel=1e-12)

    def test_slab_energy_tracks_time_average(self):
        grid = TorusGrid(2, 32)
        part = make_partition(grid, n_t=2, n_x=4)
        u = taylor_green(grid)
        traj = field_trajectory(
            grid, lambda t, x: (1.0 - 0.5 * t) * u.to_physical(),
            [0.0, 0.25, 0.5, 0.75, 1.0])
        V = dirac_embed(traj, part, 2.0)
        e = l2_norm_sq(u)
        # slab 0 holds t in {0, .25}, slab 0.5 boundary goes to slab 1
        avg0 = 0.5 * np.mean([(1 - 0.5 * t) ** 2 for t in (0.0, 0.25)]) * e
        avg1 = 0.5 * np.mean([(1 - 0.5 * t) ** 2 for t in (0.5, 0.75, 1.0)]) * e
        got = slab_energies(V)
        assert got[0] == pytest.approx(avg0, rel=2e-2)
        assert got[1] == pytest.approx(avg1, rel=2e-2)

    def test_second_moment_bounded_by_sup_energy(self):
        grid = TorusGrid(2, 32)
        part = make_partition(grid)
        u = taylor_green(grid)
        traj = field_trajectory(grid, lambda t, x: u.to_physical(),
                                [0.0, 0.5, 1.0])
        V = dirac_embed(traj, part, 2.0)
        horizon = part.t1 - part.t0
        assert V.second_moment() <= l2_norm_sq(u) * horizon * (1 + 1e-10)

    def test_distance_self_is_zero(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = constant_trajectory(grid, (0.2, 0.2), [0.0, 1.0])
        V = dirac_embed(traj, part, 2.0)
        assert weakstar_distance(V, V) == 0.0

    def test_distance_linear_in_perturbation(self):
        grid = TorusGrid(2, 32)
        part = make_partition(grid, n_t=1, n_x=4)
        u = taylor_green(grid).to_physical()
        w = np.zeros_like(u)
        w[0] = 1.0
        dists = []
        for delta in (0.2, 0.1, 0.05):
            t1 = Trajectory(grid, np.array([0.0, 1.0]), np.stack([u] * 2))
            t2 = Trajectory(grid, np.array([0.0, 1.0]),
                            np.stack([u + delta * w] * 2))
            V1 = dirac_embed(t1, part, 3.0)
            V2 = dirac_embed(t2, part, 3.0)
            dists.append(weakstar_distance(V1, V2))
        ratios = np.array(dists[:-1]) / np.array(dists[1:])
        assert np.all(ratios > 1.6) and np.all(ratios < 2.5)

    def test_distance_requires_common_partition(self):
        grid = TorusGrid(2, 16)
        t = constant_trajectory(grid, (0.1, 0.0), [0.0, 1.0])
        V1 = dirac_embed(t, make_partition(grid, n_x=2), 2.0)
        V2 = dirac_embed(t, make_partition(grid, n_x=4), 2.0)
        with pytest.raises(YoungMeasureError):
            weakstar_distance(V1, V2)

    def test_dictionary_size(self):
        assert len(quadratic_dictionary(2)) >= 20
        assert len(quadratic_dictionary(3)) >= 20


class TestG2Norm:
    def test_energy_integrand_norm(self):
        # (1-r)^2 (r/(1-r))^2 -> sup r^2 = 1
        assert g2_norm(ENERGY, 2) == pytest.approx(1.0, abs=1e-3)

    def test_linear_integrand_vanishing_recession(self):
        b = np.array([1.0, 0.0])
        f = TestIntegrand("xi0", quad=(np.zeros((2, 2)), b, 0.0))
        # (1-r)^2 * r/(1-r) = r(1-r) -> sup 1/4
        assert g2_norm(f, 2) == pytest.approx(0.25, abs=1e-3)


class TestExport:
    def test_round_trippable_dict(self, tmp_path):
        import json as _json

        grid = TorusGrid(2, 16)
        part = make_partition(grid)
        traj = constant_trajectory(grid, (0.5, 0.5), [0.0, 1.0])
        V = dirac_embed(traj, part, 2.0)
        d = measure_to_dict(V)
        text = _json.dumps(d, sort_keys=True)
        back = _json.loads(text)
        assert back["partition"]["n_t"] == part.n_t
        assert back["radius"] == 2.0
        assert len(back["nu"]) == part.n_cells  # one occupied bin per cell
        assert len(back["dictionary"]) >= 20


class TestBinningBound:
    def test_general_integrand_within_lipschitz_bound(self):
        # centroid-node pairing of a generic integrand stays within
        # Lip(f) * bin diameter of the exact sample quadrature
        grid = TorusGrid(2, 32)
        part = make_partition(grid, n_t=1, n_x=4)
        u = taylor_green(grid)
        traj = field_trajectory(grid, lambda t, x: u.to_physical(), [0.0, 1.0])
        radius, bins = 2.0, 16
        V = dirac_embed(traj, part, radius, bins_per_axis=bins)

        lip = 1.0
        f = TestIntegrand("abs_sum",
                          f=lambda xi: np.abs(xi).sum(axis=-1),
                          f_inf=lambda xi: np.zeros(xi.shape[:-1]))
        got = pairing(V, f)
        vals = traj.values.reshape(2, 2, -1)
        direct = float(np.abs(vals).sum(axis=1).mean(axis=0).mean()
                       * TWO_PI ** 2)
        bin_diameter = 2 * radius / bins * np.sqrt(2)
        bound = lip * bin_diameter * part.total_volume
        assert abs(got - direct) <= bound


class TestFamilyEnergyBound:
    def test_slab_energy_below_family_sup(self):
        grid = TorusGrid(2, 16)
        part = make_partition(grid, n_t=2, n_x=4)
        trajs = []
        sups = []
        for amp in (0.4, 0.8):
            u = taylor_green(grid) * amp
            from dissipeuler.spectral import l2_norm_sq as _l2
            sups.append(0.5 * _l2(u))
            trajs.append(field_trajectory(
                grid, lambda t, x, u=u: u.to_physical(), [0.0, 0.5, 1.0]))
        V = estimate_from_family(trajs, part, radius=3.0)
        for s in range(part.n_t):
            assert energy_of(V, s) <= max(sups) * (1 + 1e-10)


class TestThreeDimensionalMeasures:
    def test_3d_concentration_sphere_bin(self):
        grid = TorusGrid(3, 32)
        part = CellPartition(3, 32, 1, 2, 0.0, 1.0)
        m = 8
        width = grid.n // m
        vals = np.zeros((3,) + grid.shape)
        vals[2, :width, :width, :width] = m  # concentrates along +e3
        traj = Trajectory(grid, np.array([0.0, 1.0]), np.stack([vals] * 2))
        V = estimate_from_family([traj], part, radius=2.0, bins_per_axis=8)
        # lambda_t = m^2 |A| = m^2 (2 pi / m)^3 = (2 pi)^3 / m
        expected = (2 * np.pi) ** 3 / m
        assert V.lam_t(0) == pytest.approx(expected, rel=0.05)
        total_inf = (V.inf_mass * V.lam_mass[:, None]).sum(axis=0)
        top = int(np.argmax(total_inf))
        assert total_inf[top] == pytest.approx(V.lam_total(), rel=1e-12)
        dirs = V.inf_mean[V.lam_mass > 0, top]
        assert np.allclose(dirs, [0.0, 0.0, 1.0])

    def test_3d_pairing_volume(self):
        grid = TorusGrid(3, 16)
        part = CellPartition(3, 16, 2, 2, 0.0, 0.5)
        vals = np.zeros((2, 3) + grid.shape)
        vals[:, 0] = 0.3
        traj = Trajectory(grid, np.array([0.0, 0.5]), vals)
        V = dirac_embed(traj, part, 2.0, bins_per_axis=8)
        one3 = TestIntegrand("one", quad=(np.zeros((3, 3)), np.zeros(3), 1.0))
        assert pairing(V, one3) == pytest.approx(part.total_volume, rel=1e-12)
        assert len(quadratic_dictionary(3)) >= 20
