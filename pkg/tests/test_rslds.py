import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chain_marginals_by_enumeration, kalman_rts, softmax_longdouble
from switchdyn.rslds import (RegimePosterior, RSLDSModel, block_tridiag_solve, continuous_laplace,
                             discrete_posterior, filter_context, fit_variational_em, forecast, forward_backward,
                             forward_filter, make_model, observed_posterior, sample_trajectory, simulate,
                             transition_objective, transition_probs)
from switchdyn.rslds.em import xi_stats
from switchdyn.rslds.messages import block_tridiag_matvec
from switchdyn.trajectory import AgentState, Trajectory


def random_model(rng, k=3, d=4, variant="full", scale=1.0):
    A = np.stack([np.eye(d) + 0.05 * rng.normal(size=(d, d)) for _ in range(k)])
    Q = np.stack([np.eye(d) * rng.uniform(0.01, 0.1) for _ in range(k)])
    return make_model(A, rng.normal(scale=0.1, size=(k, d)), Q, R=scale * rng.normal(size=(k, k)),
                      W=scale * rng.normal(size=(k, d)), r=scale * rng.normal(size=k), variant=variant)


def random_lds(rng, D=4, T=30):
    """One-regime model with a general emission and a path of noisy observations."""
    A = rng.normal(size=(D, D))
    A *= rng.uniform(0.5, 0.99) / np.max(np.abs(np.linalg.eigvals(A)))
    L = rng.normal(size=(D, D))
    Q = 0.1 * L @ L.T + 0.05 * np.eye(D)
    L = rng.normal(size=(D, D))
    S = 0.1 * L @ L.T + 0.05 * np.eye(D)
    L = rng.normal(size=(D, D))
    Sigma0 = L @ L.T + np.eye(D)
    model = make_model(A, 0.3 * rng.normal(size=D), Q, mu0=rng.normal(size=D), Sigma0=Sigma0,
                       C=rng.normal(size=(D, D)) + 2 * np.eye(D), d=rng.normal(size=D), S=S)
    return model, 2.0 * rng.normal(size=(T, D))


def one_regime_posterior(T):
    return RegimePosterior(np.ones((T, 1)), np.ones((T - 1, 1, 1)))


class TestModel:
    def test_shapes_validated(self):
        with pytest.raises(ValueError):
            make_model(np.eye(4)[None], np.zeros(4), np.eye(4), R=np.zeros((2, 2)))

    def test_pi0_validated(self):
        with pytest.raises(ValueError, match="probability"):
            make_model(np.stack([np.eye(2)] * 2), 0, np.eye(2), pi0=[0.7, 0.7])

    def test_non_spd_noise_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            make_model(np.eye(2), 0, -np.eye(2))

    def test_recurrent_only_pins_r(self, rng):
        m = random_model(rng, variant="recurrent-only")
        np.testing.assert_array_equal(m.R, 0.0)

    def test_dict_round_trip(self, rng):
        m = random_model(rng)
        m2 = RSLDSModel.from_dict(m.to_dict())
        for name in ("A", "b", "Q", "R", "W", "r", "pi0", "mu0", "Sigma0", "C", "d", "S"):
            np.testing.assert_array_equal(getattr(m, name), getattr(m2, name))


class TestTransitionProbs:
    def test_zero_parameters_uniform(self):
        m = make_model(np.stack([np.eye(4)] * 5), 0, np.eye(4))
        np.testing.assert_allclose(transition_probs(m, 2, np.ones(4)), np.full(5, 0.2), atol=1e-15)

    def test_recurrent_only_ignores_previous_regime(self, rng):
        m = random_model(rng, variant="recurrent-only").copy(R=rng.normal(size=(3, 3)) * 5, variant="recurrent-only")
        s = rng.normal(size=4)
        rows = [transition_probs(m, z, s) for z in range(3)]
        np.testing.assert_array_equal(rows[0], rows[1])
        np.testing.assert_array_equal(rows[0], rows[2])

    def test_matches_extended_precision_softmax(self, rng):
        m = random_model(rng, scale=5.0)
        for _ in range(20):
            s = rng.normal(size=4) * 3
            z = int(rng.integers(3))
            want = softmax_longdouble(m.R[z] + m.W @ s + m.r)
            np.testing.assert_allclose(transition_probs(m, z, s), want, rtol=1e-12, atol=1e-300)

    def test_accepts_agent_state(self, rng):
        m = random_model(rng)
        st_ = AgentState(1.0, 2.0, 3.0, 0.5)
        np.testing.assert_array_equal(transition_probs(m, 0, st_), transition_probs(m, 0, st_.features))

    def test_bad_regime_index(self, rng):
        with pytest.raises(IndexError):
            transition_probs(random_model(rng), 3, np.zeros(4))


class TestSampling:
    def test_identity_dynamics_near_constant(self):
        eps = 1e-8
        m = make_model(np.eye(4), 0, eps * np.eye(4), Sigma0=1e-12 * np.eye(4))
        traj, _ = sample_trajectory(m, 50, seed=1)
        steps = np.linalg.norm(np.diff(traj.states, axis=0), axis=1)
        assert steps.max() < 5 * np.sqrt(eps) * 2  # a 4-D step is the norm of four such draws

    def test_constant_drift_is_straight(self):
        dt = 0.1
        m = make_model(np.eye(4), [dt * 3.0, 0.0, 0.0, 0.0], 1e-14 * np.eye(4))
        traj, _ = sample_trajectory(m, 30, seed=0, init=AgentState(0.0, 1.0, 0.0, 0.0))
        np.testing.assert_allclose(traj.states[:, 0], 0.3 * np.arange(30), atol=1e-5)
        np.testing.assert_allclose(traj.states[:, 1], 1.0, atol=1e-5)

    def test_regime_occupancy_matches_independent_simulator(self):
        # two regimes pushing x apart; the regime follows the sign of x
        A = np.stack([np.eye(2), np.eye(2)])
        b = np.array([[0.2, 0.0], [-0.2, 0.0]])
        Q = 0.05 * np.eye(2)
        W = np.array([[3.0, 0.0], [-3.0, 0.0]])
        m = make_model(A, b, Q, W=W, R=np.array([[0.5, 0.0], [0.0, 0.5]]), Sigma0=np.eye(2))
        n, T = 10_000, 15
        _, Z = simulate(m, T, np.random.default_rng(0), n=n)

        r = np.random.default_rng(99)
        z = r.integers(0, 2, n)  # pi0 uniform
        s = r.normal(size=(n, 2))
        occ = [np.mean(z)]
        for _ in range(1, T):
            logits = m.R[z] + s @ W.T
            z = np.argmax(logits + r.gumbel(size=(n, 2)), axis=1)
            s = s + b[z] + r.normal(scale=np.sqrt(0.05), size=(n, 2))
            occ.append(np.mean(z))
        np.testing.assert_allclose(Z.mean(axis=0), occ, atol=0.02)

    def test_seed_determinism(self, rng):
        m = random_model(rng)
        a, za = sample_trajectory(m, 20, seed=4)
        b, zb = sample_trajectory(m, 20, seed=4)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(za, zb)


class TestForwardBackward:
    @pytest.mark.parametrize("K,T", [(1, 1), (1, 5), (2, 3), (2, 6), (3, 4), (3, 6)])
    def test_matches_enumeration(self, K, T):
        r = np.random.default_rng(K * 10 + T)
        log_pi0 = np.log(r.dirichlet(np.ones(K)))
        log_trans = np.log(r.dirichlet(np.ones(K), size=(max(T - 1, 0), K)))
        log_lik = r.normal(scale=3.0, size=(T, K))
        g, xi, lz = forward_backward(log_pi0, log_trans, log_lik)
        g2, xi2, lz2 = chain_marginals_by_enumeration(log_pi0, log_trans, log_lik)
        np.testing.assert_allclose(g, g2, atol=1e-10)
        np.testing.assert_allclose(xi, xi2, atol=1e-10)
        assert lz == pytest.approx(lz2, abs=1e-10)

    def test_hand_specified_two_regimes(self):
        log_pi0 = np.log([0.6, 0.4])
        log_trans = np.log(np.array([[[0.9, 0.1], [0.2, 0.8]]] * 2))
        log_lik = np.log(np.array([[0.5, 0.1], [0.2, 0.7], [0.6, 0.3]]))
        g, _, _ = forward_backward(log_pi0, log_trans, log_lik)
        g2, _, _ = chain_marginals_by_enumeration(log_pi0, log_trans, log_lik)
        np.testing.assert_allclose(g, g2, atol=1e-12)

    def test_symmetric_potentials_uniform(self):
        K, T = 4, 7
        g, _, _ = forward_backward(np.zeros(K), np.zeros((T - 1, K, K)), np.zeros((T, K)))
        np.testing.assert_allclose(g, 0.25, atol=1e-15)

    def test_pairwise_consistency(self, rng):
        K, T = 3, 10
        g, xi, _ = forward_backward(rng.normal(size=K), rng.normal(size=(T - 1, K, K)), rng.normal(size=(T, K)))
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(xi.sum(axis=2), g[:-1], atol=1e-6)
        np.testing.assert_allclose(xi.sum(axis=1), g[1:], atol=1e-6)

    def test_batched_matches_loop(self, rng):
        K, T, B = 3, 6, 4
        args = (rng.normal(size=(B, K)), rng.normal(size=(B, T - 1, K, K)), rng.normal(size=(B, T, K)))
        g, xi, lz = forward_backward(*args)
        for b in range(B):
            gb, xib, lzb = forward_backward(*(a[b] for a in args))
            np.testing.assert_allclose(g[b], gb, atol=1e-14)
            assert lz[b] == pytest.approx(lzb)

    def test_impossible_transitions(self):
        with np.errstate(divide="ignore"):
            log_trans = np.log(np.array([[[1.0, 0.0], [0.0, 1.0]]] * 3))
        g, _, _ = forward_backward(np.log([0.5, 0.5]), log_trans, np.array([[0, -1.0], [0, 0], [0, 0], [0, 0]]))
        assert np.all(np.isfinite(g))
        np.testing.assert_allclose(g, np.tile(g[0], (4, 1)), atol=1e-14)

    def test_filter_last_step_equals_smoother(self, rng):
        K, T = 3, 8
        args = (rng.normal(size=K), rng.normal(size=(T - 1, K, K)), rng.normal(size=(T, K)))
        f, lz = forward_filter(*args)
        g, _, lz2 = forward_backward(*args)
        np.testing.assert_allclose(f[-1], g[-1], atol=1e-12)
        assert lz == pytest.approx(lz2)


class TestBlockTridiagonal:
    def test_against_dense_solve(self, rng):
        T, D = 7, 3
        L = rng.normal(size=(T * D, T * D)) * 0.1
        band = np.zeros((T * D, T * D))
        for t in range(T):
            for u in range(max(0, t - 1), min(T, t + 2)):
                band[t * D:(t + 1) * D, u * D:(u + 1) * D] = 1
        J = (L @ L.T) * band + np.eye(T * D) * 2
        J = 0.5 * (J + J.T)
        J_diag = np.stack([J[t * D:(t + 1) * D, t * D:(t + 1) * D] for t in range(T)])
        J_lower = np.stack([J[(t + 1) * D:(t + 2) * D, t * D:(t + 1) * D] for t in range(T - 1)])
        h = rng.normal(size=(T, D))
        x, sigma, cross, logdet = block_tridiag_solve(J_diag, J_lower, h)
        Jinv = np.linalg.inv(J)
        np.testing.assert_allclose(x.ravel(), np.linalg.solve(J, h.ravel()), atol=1e-12)
        for t in range(T):
            np.testing.assert_allclose(sigma[t], Jinv[t * D:(t + 1) * D, t * D:(t + 1) * D], atol=1e-12)
        for t in range(T - 1):
            np.testing.assert_allclose(cross[t], Jinv[t * D:(t + 1) * D, (t + 1) * D:(t + 2) * D], atol=1e-12)
        assert logdet == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-10)
        np.testing.assert_allclose(block_tridiag_matvec(J_diag, J_lower, x).ravel(), h.ravel(), atol=1e-12)


class TestContinuousLaplace:
    def test_matches_kalman_smoother(self, rng):
        for _ in range(10):
            model, y = random_lds(rng)
            cp = continuous_laplace(model, y, one_regime_posterior(len(y)))
            ms, Ps, X = kalman_rts(model.A[0], model.b[0], model.Q[0], model.mu0[0], model.Sigma0[0], model.C,
                                   model.d, model.S, y)
            np.testing.assert_allclose(cp.means, ms, atol=1e-8)
            np.testing.assert_allclose(cp.covs, Ps, atol=1e-6)
            np.testing.assert_allclose(cp.cross, X, atol=1e-6)

    def test_gaussian_case_converges_in_one_step(self, rng):
        model, y = random_lds(rng)
        cp = continuous_laplace(model, y, one_regime_posterior(len(y)))
        assert cp.iterations <= 2  # one Newton step, one confirming step
        assert cp.grad_norm < 1e-10

    def test_observed_limit(self, rng):
        m = random_model(rng).copy(S=1e-12 * np.eye(4))
        y = np.cumsum(rng.normal(size=(20, 4)), axis=0)
        K = m.num_regimes
        rp = RegimePosterior(np.full((20, K), 1 / K), np.full((19, K, K), 1 / K**2))
        cp = continuous_laplace(m, Trajectory(y), rp)
        np.testing.assert_allclose(cp.means, y, atol=1e-8)
        assert np.max(np.abs(cp.covs)) < 1e-10

    def test_observed_posterior_is_degenerate(self, rng):
        y = rng.normal(size=(5, 4))
        cp = observed_posterior(y)
        np.testing.assert_array_equal(cp.means, y)
        np.testing.assert_array_equal(cp.covs, 0.0)


class TestDiscretePosterior:
    def test_single_regime(self, rng):
        m = make_model(np.eye(4), 0, np.eye(4) * 0.1)
        rp = discrete_posterior(m, observed_posterior(rng.normal(size=(6, 4))))
        np.testing.assert_allclose(rp.gammas, 1.0)

    def test_identical_regimes_uniform(self, rng):
        m = make_model(np.stack([np.eye(4)] * 3), 0, np.eye(4) * 0.1)
        rp = discrete_posterior(m, observed_posterior(rng.normal(size=(6, 4))))
        np.testing.assert_allclose(rp.gammas, 1 / 3, atol=1e-12)

    def test_matches_enumeration_of_sequences(self, rng):
        m = random_model(rng, k=2)
        y = rng.normal(size=(3, 4)) * 0.3
        rp = discrete_posterior(m, observed_posterior(y))
        # direct joint over the 8 regime sequences of a fully observed path
        from scipy.stats import multivariate_normal as mvn
        from scipy.special import log_softmax
        post = np.zeros((3, 2))
        logs = {}
        for path in itertools.product(range(2), repeat=3):
            lp = np.log(m.pi0[path[0]]) + mvn(m.mu0[path[0]], m.Sigma0[path[0]]).logpdf(y[0])
            for t in range(1, 3):
                lp += log_softmax(m.R[path[t - 1]] + m.W @ y[t - 1] + m.r)[path[t]]
                lp += mvn(m.A[path[t]] @ y[t - 1] + m.b[path[t]], m.Q[path[t]]).logpdf(y[t])
            logs[path] = lp
        vals = np.array(list(logs.values()))
        w = np.exp(vals - vals.max())
        w /= w.sum()
        for (path, _), wi in zip(logs.items(), w):
            for t in range(3):
                post[t, path[t]] += wi
        np.testing.assert_allclose(rp.gammas, post, atol=1e-10)


def finite_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestTransitionObjective:
    @pytest.mark.parametrize("variant", ["full", "recurrent-only"])
    def test_gradient_matches_finite_differences(self, variant):
        r = np.random.default_rng(3)
        K, D, N = 4, 3, 40
        xis = r.dirichlet(np.ones(K * K), size=N).reshape(N, K, K)
        s_prev = r.normal(size=(N, D))
        params = (r.normal(size=(K, K)), r.normal(size=(K, D)), r.normal(size=K))
        _, grads = transition_objective(params, xis, s_prev, 1e-3, variant)
        for i, g in enumerate(grads):
            def f(p, i=i):
                ps = list(params)
                ps[i] = p
                return transition_objective(tuple(ps), xis, s_prev, 1e-3, variant)[0]
            fd = finite_difference(f, params[i])
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)

    def test_value_matches_direct_formula(self):
        from scipy.special import log_softmax
        r = np.random.default_rng(4)
        K, D, N = 3, 2, 10
        xis = r.dirichlet(np.ones(K * K), size=N).reshape(N, K, K)
        s_prev = r.normal(size=(N, D))
        R, W, b = r.normal(size=(K, K)), r.normal(size=(K, D)), r.normal(size=K)
        val, _ = transition_objective((R, W, b), xis, s_prev, 0.5)
        logP = log_softmax(R[None] + (s_prev @ W.T + b)[:, None, :], axis=-1)
        want = np.sum(xis * logP) - 0.25 * (np.sum(R**2) + np.sum(W**2) + np.sum(b**2))
        assert val == pytest.approx(want, rel=1e-12)

    def test_large_logits_fallback(self):
        r = np.random.default_rng(5)
        K, D, N = 3, 2, 12
        xis = r.dirichlet(np.ones(K * K), size=N).reshape(N, K, K)
        s_prev = r.normal(size=(N, D)) * 400
        params = (r.normal(size=(K, K)), r.normal(size=(K, D)), r.normal(size=K))
        val, grads = transition_objective(params, xis, s_prev, 0.0, stats=xi_stats(xis))
        assert np.isfinite(val)
        assert all(np.all(np.isfinite(g)) for g in grads)


class TestEM:
    def test_single_regime_is_least_squares(self, rng):
        A = np.eye(4)
        A[0, 2] = A[1, 3] = 0.1
        A[2:, 2:] = [[0.98, 0.05], [-0.05, 0.98]]
        m = make_model(A, [0.0, 0.0, 0.1, -0.05], np.diag([1e-3, 1e-3, 1e-2, 1e-2]), Sigma0=np.eye(4))
        X, _ = simulate(m, 40, rng, n=30)
        fit, _ = fit_variational_em(list(X), num_regimes=1, max_iters=3, emission_var=1e-12)
        prev = X[:, :-1].reshape(-1, 4)
        nxt = X[:, 1:].reshape(-1, 4)
        design = np.hstack([prev, np.ones((len(prev), 1))])
        coef = np.linalg.lstsq(design, nxt, rcond=None)[0]
        np.testing.assert_allclose(fit.A[0], coef[:4].T, atol=1e-6)
        np.testing.assert_allclose(fit.b[0], coef[4], atol=1e-6)

    def test_elbo_trace_nearly_monotone(self, rng):
        m = random_model(rng, k=3, scale=0.5)
        X, _ = simulate(m, 30, rng, n=20)
        _, trace = fit_variational_em(list(X), num_regimes=3, max_iters=8, seed=1)
        e = np.array(trace.elbo)
        assert np.all(np.isfinite(e))
        assert np.all(np.diff(e) >= -1e-3 * np.abs(e[:-1]))

    def test_rejects_short_trajectories(self):
        with pytest.raises(ValueError, match="two steps"):
            fit_variational_em([np.zeros((1, 4))], num_regimes=2)

    def test_deterministic(self, rng):
        m = random_model(rng, k=2, scale=0.5)
        X, _ = simulate(m, 20, rng, n=10)
        a, _ = fit_variational_em(list(X), num_regimes=2, max_iters=3, seed=2)
        b, _ = fit_variational_em(list(X), num_regimes=2, max_iters=3, seed=2)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.W, b.W)


class TestForecast:
    def test_zero_noise_samples_identical(self):
        A = np.eye(4)
        A[0, 2] = A[1, 3] = 0.1
        m = make_model(A, 0, 1e-20 * np.eye(4), S=1e-20 * np.eye(4))
        ctx = np.array([[0.0, 0.0, 1.0, 0.0], [0.1, 0.0, 1.0, 0.0]])
        out = forecast(m, ctx, horizon=15, num_samples=50, seed=0)
        assert out.shape == (50, 15, 4)
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-8)
        np.testing.assert_allclose(out[0, -1, 0], 0.1 + 1.5, atol=1e-8)

    def test_seed_determinism(self, rng):
        m = random_model(rng)
        ctx = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(forecast(m, ctx, 5, 20, seed=3), forecast(m, ctx, 5, 20, seed=3))

    def test_filter_context_single_step(self, rng):
        m = random_model(rng)
        probs, mean, cov = filter_context(m, rng.normal(size=(1, 4)))
        assert probs.sum() == pytest.approx(1.0)
        assert mean.shape == (4,) and cov.shape == (4, 4)

    def test_longer_context_reduces_dispersion(self):
        from switchdyn.scenarios import benchmark_model, generate_benchmark
        m = benchmark_model()
        trajs = generate_benchmark(20, seed=11)
        spread = {}
        for c in (1, 10):
            vals = []
            for i, tr in enumerate(trajs):
                s = forecast(m, tr.slice(0, c), 40, 200, seed=i)
                vals.append(np.trace(np.cov(s[:, -1, :2].T)))
            spread[c] = np.mean(vals)
        assert spread[10] < spread[1]

    def test_bad_horizon(self, rng):
        with pytest.raises(ValueError):
            forecast(random_model(rng), np.zeros((2, 4)), 0)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_marginals_are_simplices(self, K, T, seed):
        r = np.random.default_rng(seed)
        g, xi, _ = forward_backward(r.normal(size=K) * 5, r.normal(size=(T - 1, K, K)) * 5, r.normal(size=(T, K)) * 5)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(g >= 0)
        if T > 1:
            np.testing.assert_allclose(xi.sum(axis=(1, 2)), 1.0, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
    def test_transition_probs_simplex(self, seed, scale):
        r = np.random.default_rng(seed)
        m = random_model(r, scale=scale)
        p = transition_probs(m, int(r.integers(3)), r.normal(size=4) * scale)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p >= 0)
