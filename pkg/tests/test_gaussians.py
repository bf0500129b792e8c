import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_gaussian_logpdf
from switchdyn.gaussians import (COV_FLOOR, Gaussian, GaussianMixture, clip_eigenvalues, fit_diag_gmm_batch,
                                 fit_gmm_em, fit_gmm_em_trace, gaussian_logpdf, mixture_logpdf, moment_match)


class TestGaussian:
    def test_standard_normal_at_mode(self):
        assert gaussian_logpdf([0.0], Gaussian([0.0], [[1.0]])) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_unit_deviation(self):
        val = gaussian_logpdf([1.0], Gaussian([0.0], [[1.0]]))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=1e-12)

    def test_matches_direct_formula(self):
        g = Gaussian([0.0, 0.0], np.diag([2.0, 2.0]))
        assert gaussian_logpdf([1.0, 2.0], g) == pytest.approx(direct_gaussian_logpdf([1, 2], [0, 0], np.diag([2, 2])),
                                                                abs=1e-12)

    def test_density_normalises_on_grid(self):
        g = Gaussian([0.3, -0.2], [[1.0, 0.4], [0.4, 0.8]])
        xs = np.linspace(-8, 8, 401)
        X, Y = np.meshgrid(xs, xs)
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        mass = np.exp(g.logpdf(pts)).sum() * (xs[1] - xs[0]) ** 2
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_batch_matches_single(self, rng):
        g = Gaussian([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(g.logpdf(x), [g.logpdf(row) for row in x], rtol=1e-13)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            Gaussian([0.0, 0.0], [[1.0, 0.1], [0.0, 1.0]])

    def test_indefinite_covariance_rejected(self):
        with pytest.raises(ValueError, match="positive definite"):
            Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            gaussian_logpdf([0.0, 0.0, 0.0], Gaussian([0.0, 0.0], np.eye(2)))

    def test_regularized_clips_eigenvalues(self):
        g = Gaussian.regularized([0.0, 0.0], np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert np.linalg.eigvalsh(g.cov).min() >= COV_FLOOR * (1 - 1e-9)

    def test_entropy_matches_formula(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        g = Gaussian([0.0, 0.0], cov)
        assert g.entropy() == pytest.approx(0.5 * np.log(np.linalg.det(2 * np.pi * np.e * cov)), rel=1e-12)


class TestMixture:
    def test_single_component_equals_gaussian(self, rng):
        g = Gaussian([1.0, -1.0], [[1.0, 0.2], [0.2, 0.5]])
        gmm = GaussianMixture.from_components([1.0], [g])
        x = rng.normal(size=(10, 2))
        np.testing.assert_allclose(mixture_logpdf(x, gmm), g.logpdf(x), rtol=1e-12)

    def test_duplicate_components_collapse(self, rng):
        g = Gaussian([0.5, 0.5], np.eye(2))
        gmm = GaussianMixture.from_components([0.5, 0.5], [g, g])
        x = rng.normal(size=(10, 2))
        np.testing.assert_allclose(mixture_logpdf(x, gmm), g.logpdf(x), rtol=1e-12)

    def test_separated_components_match_naive_sum(self):
        comps = [Gaussian([-5.0, 0.0], np.eye(2) * 0.5), Gaussian([5.0, 0.0], np.eye(2) * 2.0)]
        gmm = GaussianMixture.from_components([0.3, 0.7], comps)
        for x in ([0.0, 0.0], [-5.0, 0.1], [4.0, -1.0]):
            naive = np.log(sum(np.longdouble(w) * np.exp(np.longdouble(direct_gaussian_logpdf(x, c.mean, c.cov)))
                               for w, c in zip([0.3, 0.7], comps)))
            assert mixture_logpdf(x, gmm) == pytest.approx(float(naive), abs=1e-10)

    def test_far_point_stays_finite(self):
        gmm = GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [[[1e-4]], [[1e-4]]])
        assert np.isfinite(mixture_logpdf([100.0], gmm))

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError, match="simplex"):
            GaussianMixture([0.6, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
        with pytest.raises(ValueError):
            GaussianMixture([], np.zeros((0, 1)), np.zeros((0, 1)))

    def test_diagonal_covariances_accepted(self):
        gmm = GaussianMixture([1.0], [[0.0, 0.0]], [[2.0, 3.0]])
        np.testing.assert_array_equal(gmm.covs[0], np.diag([2.0, 3.0]))

    def test_sampling_moments(self, rng):
        gmm = GaussianMixture([0.2, 0.8], [[0.0, 0.0], [3.0, 1.0]], [np.eye(2), np.eye(2) * 0.5])
        x = gmm.sample(200_000, rng)
        mm = moment_match(gmm)
        np.testing.assert_allclose(x.mean(axis=0), mm.mean, atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), mm.cov, atol=0.03)


class TestMomentMatch:
    def test_single_component_identity(self):
        g = Gaussian([1.0, 2.0], [[1.0, 0.3], [0.3, 2.0]])
        mm = moment_match(GaussianMixture.from_components([1.0], [g]))
        np.testing.assert_allclose(mm.mean, g.mean)
        np.testing.assert_allclose(mm.cov, g.cov)

    def test_symmetric_pair(self):
        a, s2 = 2.0, 0.5
        gmm = GaussianMixture([0.5, 0.5], [[-a, 0.0], [a, 0.0]], [np.eye(2) * s2] * 2)
        mm = moment_match(gmm)
        np.testing.assert_allclose(mm.mean, [0.0, 0.0], atol=1e-14)
        np.testing.assert_allclose(mm.cov, np.diag([s2 + a**2, s2]), atol=1e-14)

    def test_three_components_against_monte_carlo(self):
        rng = np.random.default_rng(7)
        covs = []
        for _ in range(3):
            L = rng.normal(size=(2, 2))
            covs.append(L @ L.T + 0.5 * np.eye(2))
        gmm = GaussianMixture([0.2, 0.5, 0.3], rng.normal(scale=3.0, size=(3, 2)), covs)
        x = gmm.sample(1_000_000, rng)
        mm = moment_match(gmm)
        scale = np.sqrt(np.diag(mm.cov))
        np.testing.assert_allclose(x.mean(axis=0), mm.mean, atol=0.01 * scale.max())
        np.testing.assert_allclose(np.cov(x.T), mm.cov, rtol=0.01, atol=0.01 * np.abs(mm.cov).max())


class TestFitGMM:
    def test_single_component_closed_form(self, rng):
        x = rng.normal(size=(500, 2)) @ np.array([[1.0, 0.5], [0.0, 0.7]]) + [1.0, -2.0]
        gmm = fit_gmm_em(x, 1, seed=0)
        np.testing.assert_allclose(gmm.means[0], x.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(gmm.covs[0], np.cov(x.T, bias=True), atol=1e-10)

    def test_two_separated_clusters(self, rng):
        x = np.concatenate([rng.normal(scale=0.01, size=(200, 2)) + [-10, 0],
                            rng.normal(scale=0.01, size=(200, 2)) + [10, 0]])
        gmm = fit_gmm_em(x, 2, seed=3)
        order = np.argsort(gmm.means[:, 0])
        np.testing.assert_allclose(gmm.means[order], [[-10, 0], [10, 0]], atol=0.1)
        np.testing.assert_allclose(gmm.weights, 0.5, atol=0.05)

    @pytest.mark.parametrize("cov_type", ["full", "diag"])
    def test_log_likelihood_monotone(self, rng, cov_type):
        x = np.concatenate([rng.normal(size=(150, 2)), rng.normal(size=(150, 2)) * 0.3 + 3.0])
        _, trace = fit_gmm_em_trace(x, 4, seed=1, covariance_type=cov_type, tol=0.0, max_iters=60)
        ll = np.array(trace.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-10)

    def test_identical_samples_floor(self):
        x = np.tile([1.0, 2.0], (50, 1))
        gmm = fit_gmm_em(x, 1)
        np.testing.assert_allclose(gmm.covs[0], COV_FLOOR * np.eye(2), rtol=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least"):
            fit_gmm_em(np.zeros((2, 2)), 3)

    def test_deterministic_under_seed(self, rng):
        x = rng.normal(size=(100, 2))
        a, b = fit_gmm_em(x, 3, seed=5), fit_gmm_em(x, 3, seed=5)
        np.testing.assert_array_equal(a.means, b.means)


class TestBatchFit:
    def test_single_element_batch_matches_diag_fit(self, rng):
        x = np.concatenate([rng.normal(size=(60, 2)), rng.normal(size=(60, 2)) * 0.5 + 4.0])
        batch = fit_diag_gmm_batch(x[None], 2, seed=0, tol=1e-9, max_iters=200)
        single = fit_gmm_em(x, 2, seed=0, covariance_type="diag", tol=1e-9, max_iters=200)
        np.testing.assert_allclose(batch.means[0], single.means, atol=1e-8)
        np.testing.assert_allclose(batch.weights[0], single.weights, atol=1e-8)

    def test_batch_elements_reach_generating_modes(self, rng):
        modes = np.array([[[-5.0, 0.0], [5.0, 0.0]], [[0.0, -3.0], [0.0, 3.0]], [[1.0, 1.0], [9.0, 9.0]]])
        x = np.stack([np.concatenate([rng.normal(scale=0.2, size=(50, 2)) + m[0],
                                      rng.normal(scale=0.2, size=(50, 2)) + m[1]]) for m in modes])
        batch = fit_diag_gmm_batch(x, 2, seed=0, tol=1e-9)
        for b in range(3):
            got = batch.means[b][np.lexsort(batch.means[b].T[::-1])]
            want = modes[b][np.lexsort(modes[b].T[::-1])]
            np.testing.assert_allclose(got, want, atol=0.1)

    def test_batch_trace_monotone(self, rng):
        x = rng.normal(size=(4, 60, 2))
        fit = fit_diag_gmm_batch(x, 3, seed=2, tol=0.0, max_iters=40)
        ll = fit.log_likelihood
        for b in range(4):
            col = ll[:, b][np.isfinite(ll[:, b])]
            assert np.all(np.diff(col) >= -1e-10)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            fit_diag_gmm_batch(np.zeros((10, 2)), 2)


@st.composite
def spd_matrices(draw, dim=2):
    vals = draw(st.lists(st.floats(-3, 3), min_size=dim * dim, max_size=dim * dim))
    L = np.array(vals).reshape(dim, dim)
    return L @ L.T + 0.1 * np.eye(dim)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(spd_matrices(), st.lists(st.floats(-10, 10), min_size=2, max_size=2),
           st.lists(st.floats(-10, 10), min_size=2, max_size=2))
    def test_logpdf_matches_direct(self, cov, mean, x):
        assert gaussian_logpdf(x, Gaussian(mean, cov)) == pytest.approx(direct_gaussian_logpdf(x, mean, cov),
                                                                         rel=1e-8, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
    def test_moment_match_preserves_mean(self, raw_w, seed):
        r = np.random.default_rng(seed)
        w = np.array(raw_w) / np.sum(raw_w)
        k = len(w)
        gmm = GaussianMixture(w, r.normal(size=(k, 2)), np.stack([np.eye(2) * r.uniform(0.1, 2)] * k))
        mm = moment_match(gmm)
        np.testing.assert_allclose(mm.mean, w @ gmm.means, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(mm.cov) > 0)

    @settings(max_examples=30, deadline=None)
    @given(spd_matrices(3), st.floats(1e-8, 1e-2))
    def test_clip_eigenvalues_floor(self, cov, floor):
        bad = cov - (np.linalg.eigvalsh(cov).max() + 1.0) * np.eye(3) * 0.5
        out = clip_eigenvalues(bad, floor)
        assert np.linalg.eigvalsh(out).min() >= floor * (1 - 1e-6)
        np.testing.assert_allclose(out, out.T)
