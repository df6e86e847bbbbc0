import numpy as np
import pytest
import scipy.sparse as sp

from anatprior.glm import (Chain, GibbsSampler, GlmDataset, Hyperpriors, ModelState, SamplerError,
                           Schedule, gibbs_chains, gibbs_fit, lag_matrix, nonstationary, ols,
                           whiten, yule_walker)
from anatprior.graph import PixelIndexMap, PriorSpec, build_prior
from anatprior.synth import ar1_noise, boxcar


def make_data(shape=(4, 4), T=60, K=1, p=0, seed=0, amp=1.0, ar=0.0, mask=None):
    rng = np.random.default_rng(seed)
    mask = np.ones(shape, bool) if mask is None else mask
    pix = PixelIndexMap(mask)
    X = np.column_stack([boxcar(T, 5)] + [np.ones(T)] * (K - 1))[:, :K]
    W = amp * rng.uniform(0.5, 1.5, size=(K, pix.n))
    E = ar1_noise(rng, T, pix.n, ar, 1.0) if ar else rng.normal(size=(T, pix.n))
    return GlmDataset(X @ W + E, X, p, pix), W


def flat_prior(n, ridge=1e-8):
    return PriorSpec("none", sp.csr_matrix((n, n)), PixelIndexMap(np.ones((1, n), bool)), n, ridge)


def state_for(data, alpha=1.0, lam=1.0, beta=1.0):
    return ModelState(np.zeros((data.K, data.N)), np.zeros((data.p, data.N)),
                      np.full(data.N, lam), np.full(data.K, alpha), np.full(data.p, beta))


class TestLagMatrix:
    def test_p0(self):
        lags, target = lag_matrix(np.arange(4.0), 0)
        assert lags.shape == (4, 0, 1)
        np.testing.assert_array_equal(target[:, 0], np.arange(4.0))

    def test_p1(self):
        lags, target = lag_matrix(np.array([1.0, 2, 3, 4]), 1)
        np.testing.assert_array_equal(lags[:, 0, 0], [1, 2, 3])
        np.testing.assert_array_equal(target[:, 0], [2, 3, 4])

    def test_p2(self):
        e = np.arange(1.0, 6.0)
        lags, target = lag_matrix(e, 2)
        np.testing.assert_array_equal(target[:, 0], [3, 4, 5])
        np.testing.assert_array_equal(lags[:, 0, 0], [2, 3, 4])
        np.testing.assert_array_equal(lags[:, 1, 0], [1, 2, 3])

    def test_order_too_large(self):
        with pytest.raises(ValueError):
            lag_matrix(np.ones(3), 3)

    def test_whiten_consistent(self):
        e = np.random.default_rng(0).normal(size=(20, 3))
        R = np.array([[0.5, -0.2, 0.1], [0.1, 0.0, 0.3]])
        lags, target = lag_matrix(e, 2)
        np.testing.assert_allclose(whiten(e, R, 2), target - np.einsum("tjn,jn->tn", lags, R))


class TestDataset:
    def test_validation(self):
        X = np.ones((5, 1))
        with pytest.raises(ValueError, match="T > K"):
            GlmDataset(np.zeros((5, 2)), X, p=4)
        with pytest.raises(ValueError, match="all-zero"):
            GlmDataset(np.zeros((5, 2)), np.column_stack([X, np.zeros(5)]), p=0)
        with pytest.raises(ValueError):
            GlmDataset(np.zeros((6, 2)), X, p=0)
        with pytest.raises(ValueError):
            GlmDataset(np.zeros((5, 2)), X, 0, PixelIndexMap(np.ones((1, 3), bool)))

    def test_schedule(self):
        assert Schedule().n_draws == 1800
        assert Schedule(100, 10, 1).n_draws == 90
        with pytest.raises(ValueError):
            Schedule(100, 10, 7)
        with pytest.raises(ValueError):
            Schedule(10, 10, 1)


class TestSampleW:
    def test_alpha_large_shrinks_to_constant(self):
        data, _ = make_data()
        prior = build_prior("ugl", data.pixels.mask)
        s = GibbsSampler(data, prior)
        W = s.sample_w(state_for(data, alpha=1e12), np.random.default_rng(0))
        assert np.var(W[0]) < 1e-6 * np.var(data.Y)

    def test_alpha_tiny_matches_ols(self):
        data, _ = make_data(K=2, T=80)
        prior = build_prior("ugl", data.pixels.mask)
        s = GibbsSampler(data, prior)
        mean = s.w_conditional_mean(state_for(data, alpha=1e-12, lam=2.0))
        np.testing.assert_allclose(mean, ols(data.Y, data.X), rtol=1e-4)

    def test_conditional_matches_dense_formula(self):
        data, _ = make_data(shape=(3, 3))
        prior = build_prior("ugl", data.pixels.mask)
        Q, b = GibbsSampler(data, prior).w_conditional(state_for(data, alpha=0.7, lam=1.3))
        x = data.X[:, 0]
        Qd = 0.7 * prior.D.toarray() + 1.3 * (x @ x) * np.eye(9)
        np.testing.assert_allclose(Q.toarray(), Qd, rtol=1e-12)
        np.testing.assert_allclose(b, 1.3 * x @ data.Y, rtol=1e-12)

    def test_dense_oracle_mean(self):
        data, _ = make_data()
        prior = build_prior("ugl", data.pixels.mask)
        chain = gibbs_fit(data, prior, Schedule(4000, 0, 1), seed=2, fixed=("lam", "alpha"),
                          init=state_for(data))
        x = data.X[:, 0]
        Q = prior.D.toarray() + (x @ x) * np.eye(16)
        cov = np.linalg.inv(Q)
        mu = cov @ (x @ data.Y)
        W = chain["W"][:, 0, :]
        se = np.sqrt(np.diag(cov) / W.shape[0])
        assert np.all(np.abs(W.mean(axis=0) - mu) < 4 * se)
        np.testing.assert_allclose(W.var(axis=0), np.diag(cov), rtol=0.15)

    def test_flat_prior_is_per_voxel_regression(self):
        data, _ = make_data(K=2, shape=(2, 3), T=40, seed=4)
        prior = flat_prior(data.N)
        chain = gibbs_fit(data, prior, Schedule(3000, 0, 1), seed=0, fixed=("lam", "alpha"),
                          init=state_for(data, lam=1.0))
        W = chain["W"]
        for n in range(data.N):
            cov = np.linalg.inv(data.X.T @ data.X + 1e-8 * np.eye(2))
            mu = cov @ data.X.T @ data.Y[:, n]
            se = np.sqrt(np.diag(cov) / W.shape[0])
            assert np.all(np.abs(W[:, :, n].mean(axis=0) - mu) < 4 * se)

    def test_relabeling_equivariance(self):
        mask = np.ones((5, 7), bool)
        mask[0, :2] = False
        mask[3, 4] = False
        data, _ = make_data(mask=mask, T=50, K=2, p=1, seed=7)
        grid_Y = np.stack([data.pixels.to_grid(y) for y in data.Y])
        pt = PixelIndexMap(mask.T)
        Yt = np.stack([pt.from_grid(g.T) for g in grid_Y])
        data_t = GlmDataset(Yt, data.X, 1, pt)

        def mean_map(d):
            s = GibbsSampler(d, build_prior("ugl", d.pixels.mask))
            m = s.w_conditional_mean(s.initial_state())
            return [d.pixels.to_grid(row) for row in m]

        for a, b in zip(mean_map(data), mean_map(data_t)):
            np.testing.assert_allclose(a, b.T, rtol=1e-9, atol=1e-12)


class TestSampleAR:
    def test_single_voxel_recovers_coefficient(self):
        rng = np.random.default_rng(11)
        T = 500
        e = ar1_noise(rng, T, 1, 0.5, 1.0)
        X = np.ones((T, 1))
        data = GlmDataset(e + 3.0, X, 1)
        s = GibbsSampler(data, flat_prior(1))
        st = s.initial_state()
        E = s.residuals(st)
        draws = np.array([s.sample_ar(st, rng, E)[0, 0] for _ in range(2000)])
        oracle = yule_walker(E, 1)[0, 0]
        assert abs(draws.mean() - 0.5) < 0.1
        assert abs(draws.mean() - oracle) < 0.02

    def test_beta_large_gives_constant_field(self):
        data, _ = make_data(p=1, ar=0.4, shape=(3, 3), T=100)
        s = GibbsSampler(data, build_prior("ugl", data.pixels.mask))
        st = s.initial_state()
        st.beta_ar[:] = 1e12
        R = s.sample_ar(st, np.random.default_rng(0))
        assert np.std(R) < 1e-6

    def test_needs_order(self):
        data, _ = make_data()
        s = GibbsSampler(data, build_prior("ugl", data.pixels.mask))
        with pytest.raises(ValueError):
            s.sample_ar(s.initial_state(), np.random.default_rng(0))


class TestSampleLambda:
    def test_zero_residuals(self):
        T = 41
        data = GlmDataset(np.zeros((T, 200)), np.ones((T, 1)), 1)
        s = GibbsSampler(data, flat_prior(200))
        lam = s.sample_lambda(state_for(data), np.random.default_rng(0), E=np.zeros((T, 200)))
        shape, rate = 0.01 + (T - 1) / 2, 0.01
        assert lam.mean() == pytest.approx(shape / rate, rel=0.05)

    def test_unit_variance(self):
        rng = np.random.default_rng(1)
        T = 400
        Y = rng.normal(size=(T, 2)) * np.array([1.0, 2.0])
        data = GlmDataset(Y, np.ones((T, 1)), 0)
        s = GibbsSampler(data, flat_prior(2))
        st = state_for(data)
        lam = np.array([s.sample_lambda(st, rng) for _ in range(3000)])
        m = lam.mean(axis=0)
        assert m[0] == pytest.approx(1.0, rel=0.15)
        assert m[0] / m[1] == pytest.approx(4.0, rel=0.2)


class TestSampleAlpha:
    def setup_method(self):
        self.data, _ = make_data(shape=(8, 8), T=20)
        self.prior = build_prior("ugl", self.data.pixels.mask)
        self.s = GibbsSampler(self.data, self.prior)

    def test_constant_field(self):
        st = state_for(self.data)
        st.W[:] = 3.0
        rng = np.random.default_rng(0)
        a = np.array([self.s.sample_alpha(st, rng)[0] for _ in range(20000)])
        shape = 0.01 + self.prior.rank / 2
        assert self.prior.rank == 63
        assert a.mean() == pytest.approx(shape / 0.01, rel=0.03)

    def test_eigenvector(self):
        vals, vecs = np.linalg.eigh(self.prior.D.toarray())
        st = state_for(self.data)
        st.W[0] = vecs[:, 10]
        rng = np.random.default_rng(1)
        a = np.array([self.s.sample_alpha(st, rng)[0] for _ in range(20000)])
        shape, rate = 0.01 + 63 / 2, 0.01 + vals[10] / 2
        assert a.mean() == pytest.approx(shape / rate, rel=0.03)

    def test_smooth_field_gets_larger_precision(self):
        rng = np.random.default_rng(2)
        yy, xx = np.mgrid[0:8, 0:8]
        smooth = np.sin(xx / 3.0) + np.cos(yy / 4.0)
        noise = rng.normal(size=64)
        noise *= np.linalg.norm(smooth) / np.linalg.norm(noise)
        st = state_for(self.data)
        st.W[0] = smooth.ravel()
        a_smooth = np.mean([self.s.sample_alpha(st, rng)[0] for _ in range(500)])
        st.W[0] = noise
        a_noise = np.mean([self.s.sample_alpha(st, rng)[0] for _ in range(500)])
        assert a_smooth > 5 * a_noise


class TestGibbs:
    def test_schedule_100_10_1(self):
        data, _ = make_data(p=1, ar=0.3)
        chain = gibbs_fit(data, build_prior("ugl", data.pixels.mask), Schedule(100, 10, 1), seed=0)
        assert chain.n_draws == 90
        assert chain["W"].shape == (90, 1, 16)
        assert chain["R"].shape == (90, 1, 16)
        assert chain["lam"].shape == (90, 16)
        assert np.all(chain["lam"] > 0) and np.all(chain["alpha"] > 0)

    def test_reproducible(self):
        data, _ = make_data(p=1, ar=0.3)
        prior = build_prior("ugl", data.pixels.mask)
        a = gibbs_fit(data, prior, Schedule(60, 10, 5), seed=3)
        b = gibbs_fit(data, prior, Schedule(60, 10, 5), seed=3)
        c = gibbs_fit(data, prior, Schedule(60, 10, 5), seed=4)
        for k in a.draws:
            np.testing.assert_array_equal(a[k], b[k])
        assert not np.array_equal(a["W"], c["W"])

    def test_fixed_parameters_stay(self):
        data, _ = make_data(p=1, ar=0.3)
        prior = build_prior("ugl", data.pixels.mask)
        init = GibbsSampler(data, prior).initial_state()
        chain = gibbs_fit(data, prior, Schedule(20, 0, 1), fixed=("lam", "alpha", "R"), init=init)
        assert np.all(chain["lam"] == init.lam)
        assert np.all(chain["alpha"] == 1.0)
        assert np.all(chain["R"] == init.R)

    def test_prior_sampling_quadratic_form(self):
        data, _ = make_data()
        prior = build_prior("ugl", data.pixels.mask, ridge=1e-8)
        st = state_for(data, alpha=2.0)
        chain = gibbs_fit(data, prior, Schedule(10_000, 0, 1), fixed=("alpha",), init=st,
                          likelihood=False)
        W = chain["W"][:, 0, :]
        D = prior.D.toarray()
        q = np.einsum("si,ij,sj->s", W, D, W)
        assert q.mean() == pytest.approx(prior.rank / 2.0, rel=0.05)

    def test_sampler_error_has_iteration(self):
        data, _ = make_data()
        prior = build_prior("ugl", data.pixels.mask)
        with pytest.raises(SamplerError) as info:
            gibbs_fit(data, prior, Schedule(5, 0, 1), likelihood=False, fixed=("alpha",),
                      init=state_for(data))
        assert info.value.iteration == 1
        assert "W" in info.value.step

    def test_unknown_fixed(self):
        data, _ = make_data()
        with pytest.raises(ValueError):
            GibbsSampler(data, build_prior("ugl", data.pixels.mask), fixed=("nope",))

    def test_multiple_chains(self):
        data, _ = make_data(p=1, ar=0.3)
        prior = build_prior("ugl", data.pixels.mask)
        a = gibbs_chains(data, prior, 2, Schedule(30, 10, 2), seed=1)
        b = gibbs_chains(data, prior, 2, Schedule(30, 10, 2), seed=1)
        assert not np.array_equal(a[0]["W"], a[1]["W"])
        np.testing.assert_array_equal(a[1]["W"], b[1]["W"])

    def test_ar_whitening_coverage(self):
        covered = 0
        for rep in range(20):
            data, W = make_data(shape=(1, 1), T=200, p=1, ar=0.6, seed=100 + rep)
            chain = gibbs_fit(data, build_prior("ugl", data.pixels.mask), Schedule(700, 200, 1),
                              seed=rep, fixed=("alpha", "beta_ar"))
            lo, hi = np.quantile(chain["W"][:, 0, 0], [0.025, 0.975])
            covered += lo <= W[0, 0] <= hi
        assert covered >= 18


def test_nonstationary():
    R = np.array([[0.5, 1.2, -1.0]])
    np.testing.assert_array_equal(nonstationary(R), [False, True, True])
    R2 = np.array([[0.5, 0.5], [0.2, 0.6]])
    np.testing.assert_array_equal(nonstationary(R2), [False, True])


def test_chain_roundtrip(tmp_path):
    draws = {"W": np.arange(24.0).reshape(3, 2, 4), "lam": np.ones((3, 4))}
    ch = Chain(draws, Schedule(16, 10, 2), 9, {"scheme": "ugl"})
    ch.save(tmp_path / "c")
    raw = np.fromfile(tmp_path / "c" / "W.f32", dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(24.0))
    back = Chain.load(tmp_path / "c")
    assert back.n_draws == 3 and back.seed == 9 and back.meta["scheme"] == "ugl"
    np.testing.assert_array_equal(back["W"], draws["W"])
    (tmp_path / "c" / "lam.f32").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        Chain.load(tmp_path / "c")


def test_hyperprior_defaults():
    h = Hyperpriors()
    assert (h.a0, h.b0, h.c0, h.d0) == (0.01, 0.01, 0.01, 0.01)
