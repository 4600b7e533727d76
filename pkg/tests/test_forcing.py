"""Forcing operator, counter-based Wiener streams, Ito isometry oracle."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from dissipeuler.forcing import (
    ForcingError,
    ForcingMode,
    ForcingOperator,
    WienerPath,
    apply_noise,
    default_forcing,
    export_increments_csv,
    sample_increments,
)
from dissipeuler.spectral import TorusGrid, divergence_defect, inner_product, l2_norm_sq


def two_mode_operator():
    return ForcingOperator((
        ForcingMode((1, 0), (0.0, 1.0), 1.0, "cos"),
        ForcingMode((0, 1), (1.0, 0.0), 0.5, "sin"),
    ))


class TestForcingOperator:
    def test_zero_amplitude_zero_norm(self):
        op = ForcingOperator((ForcingMode((1, 0), (0.0, 1.0), 0.0),))
        assert op.hs_norm_sq() == 0.0

    def test_two_modes_direct_sum(self):
        assert two_mode_operator().hs_norm_sq() == pytest.approx(1.25)

    def test_amplitude_scaling_is_quadratic(self):
        op = two_mode_operator()
        scaled = ForcingOperator(tuple(
            ForcingMode(m.k, m.direction, 3.0 * m.sigma, m.parity)
            for m in op.modes))
        assert scaled.hs_norm_sq() == pytest.approx(9.0 * op.hs_norm_sq())

    def test_rejects_non_orthogonal_direction(self):
        with pytest.raises(ForcingError):
            ForcingMode((1, 0), (1.0, 1.0), 1.0)

    def test_mode_fields_unit_norm_and_orthogonal(self, grid2d):
        op = default_forcing(2)
        fields = [op.mode_field(grid2d, i) for i in range(op.rank)]
        for f in fields:
            assert l2_norm_sq(f) == pytest.approx(1.0, rel=1e-12)
            assert divergence_defect(f) < 1e-13
        for i in range(len(fields)):
            for j in range(i + 1, len(fields)):
                assert abs(inner_product(fields[i], fields[j])) < 1e-12


class TestApplyNoise:
    def test_zero_increments(self, grid2d):
        op = two_mode_operator()
        f = apply_noise(op, np.zeros(2), grid2d)
        assert np.max(np.abs(f.coeffs)) == 0.0

    def test_single_unit_increment_gives_sigma_g(self, grid2d):
        op = two_mode_operator()
        f = apply_noise(op, np.array([1.0, 0.0]), grid2d)
        g0 = op.mode_field(grid2d, 0)
        assert np.max(np.abs(f.coeffs - g0.coeffs)) < 1e-12

    def test_output_divergence_free(self, grid2d):
        op = default_forcing(2)
        rng = np.random.default_rng(0)
        f = apply_noise(op, rng.standard_normal(op.rank), grid2d)
        assert divergence_defect(f) < 1e-13

    def test_rejects_unresolved_mode(self):
        grid = TorusGrid(2, 8)
        op = ForcingOperator((ForcingMode((5, 0), (0.0, 1.0), 1.0),))
        with pytest.raises(ForcingError):
            apply_noise(op, np.array([1.0]), grid)

    def test_ito_isometry_monte_carlo(self, grid2d):
        # E || sum_n Phi dW_n ||^2 = t ||Phi||_HS^2; by linearity the summed
        # field equals apply_noise evaluated on the summed increments
        op = two_mode_operator()
        dt, steps = 0.01, 20
        t = dt * steps
        n_paths = 10_000
        totals = np.empty(n_paths)
        for pid in range(n_paths):
            inc = sample_increments(77, pid, op.rank, dt, 0, steps)
            totals[pid] = l2_norm_sq(apply_noise(op, inc.sum(axis=0), grid2d))
        expected = t * op.hs_norm_sq()
        assert abs(totals.mean() - expected) / expected < 0.05


class TestIncrementStreams:
    def test_variance(self):
        dt = 0.02
        draws = sample_increments(11, 0, 1, dt, 0, 100_000)[:, 0]
        assert abs(draws.var() - dt) <= 0.02 * dt

    def test_cross_mode_covariance(self):
        dt = 0.02
        n = 100_000
        draws = sample_increments(13, 0, 3, dt, 0, n)
        band = 3.0 * dt / np.sqrt(n)
        for a in range(3):
            for b in range(a + 1, 3):
                cov = np.mean(draws[:, a] * draws[:, b])
                assert abs(cov) <= band

    def test_serial_covariance(self):
        dt = 0.5
        n = 100_000
        d = sample_increments(17, 4, 1, dt, 0, n)[:, 0]
        cov = np.mean(d[:-1] * d[1:])
        assert abs(cov) <= 3.0 * dt / np.sqrt(n)

    def test_normality_skewness_kurtosis(self):
        n = 100_000
        z = sample_increments(19, 0, 1, 1.0, 0, n)[:, 0]
        zc = (z - z.mean()) / z.std()
        skew = np.mean(zc ** 3)
        kurt = np.mean(zc ** 4) - 3.0
        assert abs(skew) <= 4.0 * np.sqrt(6.0 / n)
        assert abs(kurt) <= 4.0 * np.sqrt(24.0 / n)

    def test_pure_function_of_key(self):
        a = sample_increments(23, 5, 4, 0.1, 0, 64)
        b = sample_increments(23, 5, 4, 0.1, 0, 64)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sample_increments(24, 5, 4, 0.1, 0, 64))
        assert not np.array_equal(a, sample_increments(23, 6, 4, 0.1, 0, 64))

    def test_restriction_extension_consistency(self):
        whole = sample_increments(29, 2, 3, 0.05, 0, 128)
        first = sample_increments(29, 2, 3, 0.05, 0, 64)
        second = sample_increments(29, 2, 3, 0.05, 64, 128)
        assert np.array_equal(whole, np.vstack([first, second]))

    def test_thread_count_invariance(self):
        def chunk(args):
            lo, hi = args
            return sample_increments(31, 9, 2, 0.1, lo, hi)

        ranges = [(i * 16, (i + 1) * 16) for i in range(8)]
        serial = np.vstack([chunk(r) for r in ranges])
        with ThreadPoolExecutor(max_workers=8) as pool:
            threaded = np.vstack(list(pool.map(chunk, ranges)))
        assert np.array_equal(serial, threaded)
        assert np.array_equal(serial, sample_increments(31, 9, 2, 0.1, 0, 128))


class TestWienerPath:
    def test_u0_norm_at_zero(self):
        p = WienerPath.sample(37, 0, 3, 0.1, 10)
        assert p.u0_norm(0.0) == 0.0

    def test_u0_norm_single_mode_hand_value(self):
        # beta_1(t) = 2 with weight 1/1^2 gives exactly 2
        inc = np.array([[2.0]])
        p = WienerPath(0, 0, 1.0, inc)
        assert p.u0_norm(1.0) == pytest.approx(2.0)

    def test_u0_norm_mean_square_monte_carlo(self):
        # E[u0_norm(t)^2] = t * sum_k 1/k^2 over active modes
        n_modes, dt, steps = 4, 0.05, 20
        t = dt * steps
        vals = np.empty(4000)
        for pid in range(vals.size):
            p = WienerPath.sample(41, pid, n_modes, dt, steps)
            vals[pid] = p.u0_norm(t) ** 2
        expected = t * sum(1.0 / k ** 2 for k in range(1, n_modes + 1))
        assert abs(vals.mean() - expected) / expected < 0.05

    def test_rejects_time_outside_horizon(self):
        p = WienerPath.sample(43, 0, 2, 0.1, 10)
        with pytest.raises(ForcingError):
            p.u0_norm(2.0)

    def test_coordinates_start_at_zero(self):
        p = WienerPath.sample(47, 1, 2, 0.1, 16)
        beta = p.coordinates()
        assert np.array_equal(beta[0], np.zeros(2))
        assert np.allclose(beta[-1], p.increments.sum(axis=0))


class TestBrownianBridge:
    def test_refinement_preserves_coarse_sums(self):
        p = WienerPath.sample(53, 3, 2, 0.2, 32)
        f = p.refine()
        assert f.dt == pytest.approx(0.1)
        assert f.steps == 64
        resummed = f.increments[0::2] + f.increments[1::2]
        assert np.max(np.abs(resummed - p.increments)) < 1e-15

    def test_double_refinement_matches_factor_four(self):
        p = WienerPath.sample(59, 0, 2, 0.2, 8)
        assert np.array_equal(p.refined(4).increments,
                              p.refine().refine().increments)

    def test_refined_variance(self):
        # fine increments remain N(0, dt/2)
        vals = []
        for pid in range(2000):
            p = WienerPath.sample(61, pid, 1, 0.2, 8)
            vals.append(p.refine().increments[:, 0])
        vals = np.concatenate(vals)
        assert abs(vals.var() - 0.1) < 0.02 * 0.1

    def test_refinement_level_streams_differ(self):
        p = WienerPath.sample(67, 0, 1, 0.4, 16)
        f1 = p.refine()
        f2 = f1.refine()
        # bridge noise at level 2 is a fresh stream, not a replay of level 1
        x1 = f1.increments[0::2] - 0.5 * p.increments
        x2 = f2.increments[0::2] - 0.5 * f1.increments
        assert not np.allclose(x1[: 8], x2[: 8])


def test_export_csv_round_trip(tmp_path):
    p = WienerPath.sample(71, 2, 2, 0.1, 4)
    out = tmp_path / "path.csv"
    export_increments_csv(out, p)
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "path_id,k,n,dW"
    assert len(rows) == 1 + 4 * 2
    first = rows[1].split(",")
    assert first[0] == "2" and float(first[3]) == p.increments[0, 0]
