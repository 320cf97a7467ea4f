import json
import math

import numpy as np
import pytest

from pamlab.noise_field import make_box, realize_noise, renorm_constant, sample_noise
from pamlab.spectrum import (
    EigensolverError,
    HamiltonianOperator,
    StudyTable,
    assemble,
    assemble_from_potential,
    dense_eigenpairs,
    dirichlet_ground_value,
    eigenvalue_tail_mc,
    growth_study,
    independence_study,
    lambda1,
    monotonicity_check,
    restricted_operator,
    top_eigenpairs,
)

from .oracles import dirichlet_half_laplacian_dense, dirichlet_half_laplacian_eigs


def zero_operator(L, h, d=2):
    b = make_box(np.zeros(d), L, h, d)
    return assemble_from_potential(b, np.zeros(b.shape))


class TestOperator:
    @pytest.mark.parametrize("m,d", [(4, 2), (5, 2), (3, 3)])
    def test_laplacian_matches_loops(self, m, d):
        H = zero_operator(m * 0.5, 0.5, d)
        np.testing.assert_allclose(H.to_dense(), dirichlet_half_laplacian_dense(m, 0.5, d), atol=1e-14)
        np.testing.assert_allclose(H.to_sparse().toarray(), H.to_dense(), atol=1e-14)

    def test_potential_is_renormalized_noise(self):
        nf = sample_noise(make_box(0, 4, 0.25, 2), 0.25, 1)
        H = assemble(nf)
        np.testing.assert_allclose(H.potential.values, realize_noise(nf).values - renorm_constant(0.25, 2))

    def test_symmetry(self):
        H = assemble(sample_noise(make_box(0, 4, 0.25, 2), 0.25, 2))
        rng = np.random.default_rng(0)
        for _ in range(5):
            u, v = rng.standard_normal((2, H.n))
            lhs, rhs = H.apply(u) @ v, u @ H.apply(v)
            assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v) * max(1, np.abs(H.potential.values).max())

    def test_batched_apply(self):
        H = assemble(sample_noise(make_box(0, 2, 0.25, 2), 0.5, 0))
        X = np.random.default_rng(1).standard_normal((3, H.n))
        np.testing.assert_allclose(H.apply(X), np.array([H.apply(x) for x in X]))


class TestEigen:
    def test_zero_potential_all_eigenvalues(self):
        H = zero_operator(3, 0.5)
        lam = dense_eigenpairs(H).eigenvalues
        np.testing.assert_allclose(lam, dirichlet_half_laplacian_eigs(6, 0.5, 2), atol=1e-12)

    @pytest.mark.parametrize("L,h,d", [(2, 0.5, 2), (8, 0.25, 2), (2, 0.25, 3)])
    def test_ground_value(self, L, h, d):
        H = zero_operator(L, h, d)
        assert lambda1(H, tol=1e-12) == pytest.approx(dirichlet_ground_value(H.box), abs=1e-10)
        assert dirichlet_ground_value(H.box) == pytest.approx(-(d / h ** 2) * (1 - math.cos(math.pi * h / (L + h))))

    def test_continuum_limit(self):
        L = 2.0
        vals = [dirichlet_ground_value(make_box(0, L, h, 2)) for h in (0.1, 0.05, 0.025)]
        errs = [abs(v + math.pi ** 2 / L ** 2) for v in vals]
        assert errs[0] > errs[1] > errs[2]

    @pytest.mark.parametrize("seed", range(4))
    def test_lanczos_vs_dense_tiny(self, seed):
        H = assemble(sample_noise(make_box(0, 1, 0.25, 2), 0.25, seed))
        it = top_eigenpairs(H, 5, method="lanczos")
        ref = dense_eigenpairs(H, 5)
        np.testing.assert_allclose(it.eigenvalues, ref.eigenvalues, atol=1e-8)
        # eigenvectors agree up to the sign convention, which both apply
        for i in range(5):
            if abs(ref.eigenvalues[i] - ref.eigenvalues[min(i + 1, 4)]) > 1e-6 and (i == 0 or abs(ref.eigenvalues[i] - ref.eigenvalues[i - 1]) > 1e-6):
                assert abs(abs(it.vector(i).inner(ref.vector(i))) - 1) < 1e-8

    def test_spectrum_invariants(self):
        H = assemble(sample_noise(make_box(0, 8, 0.25, 2), 0.25, 3))
        spec = top_eigenpairs(H, 6)
        assert np.all(np.diff(spec.eigenvalues) <= 1e-12)
        assert np.max(np.abs(spec.gram() - np.eye(6))) <= 1e-8
        assert np.max(spec.residuals) <= 1e-8 * max(1, abs(spec.eigenvalues[0]))
        assert spec.eigenvalues[0] > spec.eigenvalues[1]

    def test_ground_vector_sign(self):
        for seed in range(3):
            H = assemble(sample_noise(make_box(0, 4, 0.25, 2), 0.25, seed))
            v = top_eigenpairs(H, 1).vector(0).values
            assert np.all(v >= -1e-10)

    def test_shift_covariance(self):
        H = assemble(sample_noise(make_box(0, 4, 0.25, 2), 0.25, 5))
        a = top_eigenpairs(H, 4)
        b = top_eigenpairs(H.shifted(2.5), 4)
        np.testing.assert_allclose(b.eigenvalues, a.eigenvalues + 2.5, atol=1e-9)
        for i in range(4):
            assert abs(abs(a.vector(i).inner(b.vector(i))) - 1) < 1e-6

    def test_determinism(self):
        H = assemble(sample_noise(make_box(0, 8, 0.25, 2), 0.25, 6))
        a = top_eigenpairs(H, 3, method="lanczos", seed=4)
        b = top_eigenpairs(H, 3, method="lanczos", seed=4)
        np.testing.assert_array_equal(a.eigenvalues, b.eigenvalues)

    def test_nonconvergence_reports(self):
        H = assemble(sample_noise(make_box(0, 8, 0.25, 2), 0.25, 6))
        with pytest.raises(EigensolverError) as err:
            top_eigenpairs(H, 4, tol=1e-14, method="lanczos", basis_size=12, max_restarts=1)
        assert err.value.residuals is not None

    def test_bad_K(self):
        with pytest.raises(ValueError):
            top_eigenpairs(zero_operator(2, 0.5), 0)

    def test_json_export(self):
        H = zero_operator(2, 0.5)
        rec = json.loads(top_eigenpairs(H, 3).to_json())
        assert rec["K"] == 3 and len(rec["eigenvalues"]) == 3 and len(rec["residuals"]) == 3
        assert "box" in rec


class TestMonotonicity:
    def test_same_box(self):
        nf = sample_noise(make_box(0, 4, 0.25, 2), 0.25, 0)
        assert monotonicity_check(nf, nf.box)

    def test_zero_potential(self):
        big = zero_operator(8, 0.25)
        sub = make_box(0, 4, 0.25, 2)
        assert lambda1(restricted_operator(big, sub)) <= lambda1(big)
        assert -math.pi ** 2 / 4 ** 2 <= -math.pi ** 2 / 8 ** 2

    @pytest.mark.parametrize("seed", range(10))
    def test_nested_random(self, seed):
        nf = sample_noise(make_box(0, 16, 0.25, 2), 0.25, seed)
        assert monotonicity_check(nf, make_box((2.0, -1.0), 8, 0.25, 2))

    def test_misaligned(self):
        nf = sample_noise(make_box(0, 4, 0.5, 2), 0.5, 0)
        with pytest.raises(ValueError):
            monotonicity_check(nf, make_box(0.1, 2, 0.5, 2))


class TestStudies:
    def test_independence_identical_boxes(self):
        corr, vals, _ = independence_study(2, 0, 40, range(40), h=0.5)
        assert corr == pytest.approx(1.0)

    def test_independence_swap_and_flag(self):
        corr, vals, flags = independence_study(2, 6, 20, range(20), h=0.5)
        a, b = np.asarray(vals)
        from pamlab.spectrum import _pearson
        assert _pearson(b, a) == pytest.approx(corr)
        assert flags

    def test_tail_survival_shape(self):
        lam = np.random.default_rng(0).gumbel(size=500)
        grid = np.linspace(lam.min() - 1, lam.max(), 30)
        table, slope, _ = eigenvalue_tail_mc(4, 0.5, 0.5, grid, 500, None, sample_values=lam)
        p = table.column("survival")
        assert p[0] == 1.0
        assert np.all(np.diff(p) <= 0)
        assert slope is not None and slope < 0

    def test_tail_requires_samples(self):
        with pytest.raises(ValueError):
            eigenvalue_tail_mc(4, 0.5, 0.5, [0.0], 50, range(50))

    def test_tail_empty_window(self):
        table, slope, _ = eigenvalue_tail_mc(4, 0.5, 0.5, [100.0, 200.0], 100, None, sample_values=np.zeros(100))
        assert slope is None

    def test_growth_zero_potential(self):
        table, fit = growth_study([4, 8, 16, 32], 0.5, 0.5, 1, potential_scale=0.0)
        m = table.column("mean_lambda1")
        assert np.all(np.diff(m) > 0)
        np.testing.assert_allclose(m, [dirichlet_ground_value(make_box(0, L, 0.5, 2)) for L in (4, 8, 16, 32)])
        assert abs(fit["slope"]) < 0.1

    def test_growth_mean_increases(self):
        table, _ = growth_study([2, 4, 8, 16], 0.5, 0.5, 4)
        assert np.all(np.diff(table.column("mean_lambda1")) > 0)

    def test_growth_needs_grid(self):
        with pytest.raises(ValueError):
            growth_study([4, 8, 16], 0.5, 0.5, 1)

    def test_study_table_csv(self):
        t = StudyTable(["a", "b"], [(1, 2.5)], {"L": 4})
        assert t.to_csv().splitlines() == ["# L=4", "a,b", "1,2.5"]
