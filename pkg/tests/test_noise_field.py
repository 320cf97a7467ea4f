import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pamlab.noise_field import (
    GridField,
    NoiseField,
    compute_Z,
    make_box,
    neumann_basis_eval,
    realize_noise,
    renorm_constant,
    restrict_noise,
    sample_noise,
    spectral_gradient,
    spectral_laplacian,
    support_modes,
    tau,
)

from .oracles import cosine_mode_loops


class TestBox:
    def test_cell_centered_points(self):
        b = make_box(0, 4, 1, 2)
        assert b.shape == (4, 4)
        np.testing.assert_allclose(b.axis(0), [-1.5, -0.5, 0.5, 1.5])
        np.testing.assert_allclose(b.axis(1), [-1.5, -0.5, 0.5, 1.5])

    def test_shifted_center(self):
        b = make_box((10, 10), 2, 0.5, 2)
        pts = b.points()
        assert len(pts) == 16
        assert np.all((pts >= 9) & (pts <= 11))

    @pytest.mark.parametrize("L,h,d", [(3, 2, 2), (1, 1, 2), (4, 1, 4), (4, 1, 1), (-1, 0.5, 2), (2, 0.3, 3)])
    def test_rejects(self, L, h, d):
        with pytest.raises(ValueError):
            make_box(0, L, h, d)

    @given(st.integers(2, 12), st.sampled_from([0.125, 0.25, 0.5, 1.0]), st.integers(2, 3),
           st.floats(-50, 50, allow_nan=False))
    @settings(max_examples=40, deadline=None)
    def test_index_point_roundtrip(self, m, h, d, y):
        b = make_box(y, m * h, h, d)
        idx = np.stack(np.unravel_index(np.arange(b.n_points), b.shape), axis=1)
        pts = b.index_to_point(idx)
        np.testing.assert_array_equal(b.point_to_index(pts), idx)
        np.testing.assert_allclose(pts, b.points(), atol=1e-12)
        assert np.all(b.contains(pts))

    def test_offset_of_misaligned(self):
        big = make_box(0, 4, 0.5, 2)
        with pytest.raises(ValueError):
            big.offset_of(make_box(0.25, 2, 0.5, 2))
        assert big.offset_of(make_box((0.5, -1.0), 2, 0.5, 2)) == (3, 0)


class TestGridField:
    def test_shape_and_finite(self):
        b = make_box(0, 2, 0.5, 2)
        with pytest.raises(ValueError):
            GridField(b, np.zeros((3, 3)))
        with pytest.raises(ValueError):
            GridField(b, np.full((4, 4), np.nan))

    def test_arithmetic_and_inner(self):
        b = make_box(0, 2, 0.5, 2)
        f = GridField(b, np.ones((4, 4)))
        g = f * 2.0 + 1.0
        assert g.sup() == 3.0
        assert f.inner(g) == pytest.approx(3.0 * 4.0)
        assert f.norm() == pytest.approx(2.0)
        other = GridField(make_box(1, 2, 0.5, 2), np.ones((4, 4)))
        with pytest.raises(ValueError):
            f + other


class TestBasis:
    def test_zero_mode_constant(self):
        b = make_box(0, 4, 0.5, 2)
        v = neumann_basis_eval((0, 0), b, b.points())
        np.testing.assert_allclose(v, 0.25)

    def test_matches_loop_oracle(self):
        b = make_box((1.0, -2.0), 3, 0.25, 2)
        pts = b.points()[::7]
        for k in [(0, 1), (2, 3), (5, 0), (11, 11)]:
            np.testing.assert_allclose(neumann_basis_eval(k, b, pts), cosine_mode_loops(3, (1.0, -2.0), k, pts), atol=1e-14)

    def test_left_face_value(self):
        b = make_box(0, 2, 0.5, 2)
        delta = 1e-9
        v = neumann_basis_eval((1, 0), b, np.array([-1 + delta, 0.3]))
        assert v == pytest.approx(math.sqrt(2) / 2, abs=1e-8)

    @pytest.mark.parametrize("d,m", [(2, 6), (3, 4)])
    def test_discrete_orthonormality(self, d, m):
        b = make_box(0, m * 0.5, 0.5, d)
        pts = b.points()
        ks = np.stack(np.unravel_index(np.arange(m ** d), (m,) * d), axis=1)
        B = np.array([neumann_basis_eval(k, b, pts) for k in ks])
        gram = b.cell_volume * B @ B.T
        assert np.max(np.abs(gram - np.eye(len(ks)))) <= 1e-12

    def test_outside_rejected(self):
        b = make_box(0, 2, 0.5, 2)
        with pytest.raises(ValueError):
            neumann_basis_eval((0, 0), b, np.array([1.5, 0.0]))


class TestNoise:
    def test_tau_profile(self):
        assert tau(0.0) == 1.0 and tau(0.5) == 1.0 and tau(-0.4) == 1.0
        assert tau(1.0) == 0.0 and tau(3.0) == 0.0
        r = np.linspace(0.5, 1.0, 101)
        assert np.all(np.diff(tau(r)) <= 0)
        np.testing.assert_allclose(tau(r), tau(-r))

    def test_support_eps_one(self):
        b = make_box(0, 4, 0.5, 2)
        modes = support_modes(b, 1.0)
        assert np.all(np.linalg.norm(modes, axis=1) < 4)
        assert (0, 0) in set(map(tuple, modes)) and (3, 2) in set(map(tuple, modes))

    def test_absent_zero_weight(self):
        nf = sample_noise(make_box(0, 4, 0.25, 2), 0.5, 3)
        assert np.all(nf.weights > 0)

    def test_seed_determinism(self):
        b = make_box(0, 4, 0.25, 2)
        a, c = sample_noise(b, 0.25, 9), sample_noise(b, 0.25, 9)
        np.testing.assert_array_equal(a.coeffs, c.coeffs)
        np.testing.assert_array_equal(realize_noise(a).values, realize_noise(c).values)
        assert not np.array_equal(a.coeffs, sample_noise(b, 0.25, 10).coeffs)

    def test_coefficient_variance_over_seeds(self):
        b = make_box(0, 2, 1.0, 2)
        draws = np.array([sample_noise(b, 1.0, s).coeffs[0] for s in range(10_000)])
        assert draws.var() == pytest.approx(1.0, abs=0.05)

    def test_normality(self):
        b = make_box(0, 2, 1.0, 2)
        draws = np.array([sample_noise(b, 1.0, s).coeffs[1] for s in range(100_000)])
        assert abs(stats.skew(draws)) <= 0.1
        assert abs(stats.kurtosis(draws)) <= 0.2

    def test_pairing_variance(self):
        # Var <xi_eps, f> = sum_k tau^2 <f, n_k>^2 for a test function f
        b = make_box(0, 2, 0.25, 2)
        f = np.exp(-np.sum(b.points() ** 2, axis=1)).reshape(b.shape)
        vals = [b.cell_volume * np.sum(realize_noise(sample_noise(b, 0.5, s)).values * f) for s in range(3000)]
        nf = sample_noise(b, 0.5, 0)
        pair = np.array([b.cell_volume * np.sum(neumann_basis_eval(k, b, b.points()).reshape(b.shape) * f)
                         for k in nf.modes])
        expect = np.sum(nf.weights ** 2 * pair ** 2)
        se = expect * math.sqrt(2 / 3000)
        assert abs(np.var(vals) - expect) <= 4 * se


class TestRealize:
    def test_single_zero_mode(self):
        b = make_box(0, 4, 0.5, 2)
        nf = sample_noise(b, 1.0, 0)
        coeffs = np.zeros_like(nf.coeffs)
        coeffs[np.flatnonzero(np.all(nf.modes == 0, axis=1))] = 1.0
        np.testing.assert_allclose(realize_noise(nf.with_coeffs(coeffs)).values, 4 ** -1, atol=1e-14)

    def test_linearity(self):
        b = make_box(0, 4, 0.25, 2)
        a, c = sample_noise(b, 0.5, 1), sample_noise(b, 0.5, 2)
        np.testing.assert_allclose(realize_noise(a + c).values, realize_noise(a).values + realize_noise(c).values, atol=1e-12)

    def test_matches_direct_synthesis(self):
        b = make_box((0.5, 0.5), 2, 0.25, 2)
        nf = sample_noise(b, 0.5, 4)
        pts = b.points()
        direct = sum(w * cosine_mode_loops(2, (0.5, 0.5), k, pts) for k, w in zip(nf.modes, nf.weighted()))
        np.testing.assert_allclose(realize_noise(nf).values.ravel(), direct, atol=1e-12)

    def test_parseval_below_nyquist(self):
        b = make_box(0, 8, 0.25, 2)
        nf = sample_noise(b, 0.5, 5)
        assert nf.k_max < b.m
        f = realize_noise(nf)
        assert b.cell_volume * np.sum(f.values ** 2) == pytest.approx(np.sum(nf.weighted() ** 2), rel=1e-10)

    def test_three_dimensional(self):
        b = make_box(0, 2, 0.5, 3)
        nf = sample_noise(b, 1.0, 1)
        pts = b.points()
        direct = sum(w * cosine_mode_loops(2, (0, 0, 0), k, pts) for k, w in zip(nf.modes, nf.weighted()))
        np.testing.assert_allclose(realize_noise(nf).values.ravel(), direct, atol=1e-12)


class TestRestrict:
    def test_identity_and_composition(self):
        big = make_box(0, 8, 0.25, 2)
        nf = sample_noise(big, 0.25, 7)
        full = realize_noise(nf)
        np.testing.assert_array_equal(restrict_noise(nf, big).values, full.values)
        mid = make_box((1, 1), 4, 0.25, 2)
        inner = make_box((1.5, 0.5), 2, 0.25, 2)
        once = restrict_noise(nf, inner)
        from pamlab.noise_field import restrict_field
        twice = restrict_field(restrict_noise(nf, mid), inner)
        np.testing.assert_array_equal(once.values, twice.values)
        off = big.offset_of(inner)
        np.testing.assert_array_equal(once.values, full.values[off[0]:off[0] + 8, off[1]:off[1] + 8])

    def test_misaligned(self):
        nf = sample_noise(make_box(0, 4, 0.5, 2), 0.5, 0)
        with pytest.raises(ValueError):
            restrict_noise(nf, make_box(0.1, 2, 0.5, 2))


class TestRenorm:
    @pytest.mark.parametrize("eps,val", [(1.0, 0.0), (math.exp(-2 * math.pi), 1.0), (math.exp(-4 * math.pi), 2.0)])
    def test_values(self, eps, val):
        assert renorm_constant(eps, 2) == pytest.approx(val, abs=1e-14)

    def test_three_d_and_range(self):
        assert renorm_constant(0.1, 3) == 0.0
        with pytest.raises(ValueError):
            renorm_constant(0.0, 2)


class TestZ:
    def test_constant_mode(self):
        b = make_box(0, 4, 0.5, 2)
        nf = sample_noise(b, 1.0, 0)
        coeffs = np.where(np.all(nf.modes == 0, axis=1), 3.0, 0.0)
        Z = compute_Z(nf.with_coeffs(coeffs), eta=2.0)
        np.testing.assert_allclose(Z.values, 3.0 / 4 / 2.0, atol=1e-14)

    @pytest.mark.parametrize("eta", [0.5, 1.0, 4.0])
    def test_forward_residual(self, eta):
        b = make_box(0, 4, 0.125, 2)
        nf = sample_noise(b, 0.25, 2)
        Z = compute_Z(nf, eta)
        xi = realize_noise(nf).values
        res = eta * Z.values - 0.5 * spectral_laplacian(b, Z.values) - xi
        assert np.max(np.abs(res)) <= 1e-10 * max(1.0, np.max(np.abs(xi)))

    def test_contraction_bound(self):
        b = make_box(0, 4, 0.25, 2)
        nf = sample_noise(b, 0.25, 3)
        for eta in (0.5, 1.0, 3.0):
            Z = compute_Z(nf, eta)
            assert Z.norm() <= realize_noise(nf).norm() / eta + 1e-12

    def test_rejects_eta(self):
        with pytest.raises(ValueError):
            compute_Z(sample_noise(make_box(0, 2, 0.5, 2), 1.0, 0), 0.0)

    def test_sup_growth_envelope(self):
        # mean sup|Z| over seeds increases with L
        Ls = [16, 32, 64, 128, 256]
        means = []
        for L in Ls:
            b = make_box(0, L, 1.0, 2)
            means.append(np.mean([compute_Z(sample_noise(b, 1.0, s)).sup() for s in range(8)]))
        slope = np.polyfit(np.log(Ls) ** 2, means, 1)[0]
        assert slope > 0


class TestGradient:
    def test_cosine_mode_derivative(self):
        b = make_box(0, 2, 0.125, 2)
        pts = b.points()
        k = (3, 1)
        f = neumann_basis_eval(k, b, pts).reshape(b.shape)
        g = spectral_gradient(b, f)
        s = pts + 1.0
        dx = -math.sqrt(2 / 2) ** 2 * (math.pi * 3 / 2) * np.sin(math.pi * 3 * s[:, 0] / 2) * np.cos(math.pi * s[:, 1] / 2)
        np.testing.assert_allclose(g[0].ravel(), dx, atol=1e-12)
