"""Gibbs sampler for the spatial GLM-AR(p) model.

For voxel ``n`` the model is::

    y_n = X w_n + e_n,      e_n[t] = sum_j a_jn e_n[t-j] + z_n[t],   z_n ~ N(0, 1/lam_n)

with intrinsic GMRF priors ``W[k, :] ~ N(0, (alpha_k D_w)^-1)`` on each
regressor map and ``R[j, :] ~ N(0, (beta_j D_ar)^-1)`` on each AR map. The
first ``p`` observations are conditioned on. Every conditional is closed form:
the regression and AR maps are drawn jointly over all voxels from their
Gaussian conditionals, the precisions from Gamma conditionals.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_toeplitz

from .gmrf import factorize, rcm_ordering
from .graph import PixelIndexMap, PriorSpec

logger = logging.getLogger(__name__)

PARAMS = ("W", "R", "lam", "alpha", "beta_ar")


class SamplerError(RuntimeError):
    def __init__(self, iteration: int, step: str, cause: Exception):
        self.iteration = iteration
        self.step = step
        super().__init__(f"Gibbs iteration {iteration}, {step}: {cause}")


@dataclass
class GlmDataset:
    """Observations ``Y`` (T x N), design ``X`` (T x K) and AR order ``p``."""
    Y: np.ndarray
    X: np.ndarray
    p: int = 1
    pixels: PixelIndexMap | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        T, K = self.X.shape
        if self.Y.shape[0] != T:
            raise ValueError(f"Y has {self.Y.shape[0]} time points, X has {T}")
        if self.p < 0:
            raise ValueError("AR order must be non-negative")
        if T <= K + self.p:
            raise ValueError(f"need T > K + p, got T={T}, K={K}, p={self.p}")
        if np.any(np.all(self.X == 0, axis=0)):
            raise ValueError("design matrix has an all-zero regressor")
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.X))):
            raise ValueError("data contain non-finite values")
        if self.pixels is not None and self.pixels.n != self.N:
            raise ValueError(f"Y has {self.N} voxels but the mask has {self.pixels.n}")

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class Schedule:
    total: int = 10_000
    warmup: int = 1_000
    thin: int = 5

    def __post_init__(self):
        if self.total <= 0 or self.warmup < 0 or self.thin <= 0 or self.warmup >= self.total:
            raise ValueError(f"invalid schedule {self}")
        if (self.total - self.warmup) % self.thin:
            raise ValueError(f"(total - warmup) must be divisible by thin, got {self}")

    @property
    def n_draws(self) -> int:
        return (self.total - self.warmup) // self.thin

    def keeps(self, it: int) -> bool:
        """Whether 1-based iteration ``it`` is stored."""
        return it > self.warmup and (it - self.warmup) % self.thin == 0


@dataclass(frozen=True)
class Hyperpriors:
    """Gamma(shape, rate) hyperpriors on noise, regressor and AR precisions."""
    a0: float = 0.01
    b0: float = 0.01
    c0: float = 0.01
    d0: float = 0.01
    e0: float = 0.01
    f0: float = 0.01


@dataclass
class ModelState:
    W: np.ndarray        # (K, N)
    R: np.ndarray        # (p, N)
    lam: np.ndarray      # (N,)
    alpha: np.ndarray    # (K,)
    beta_ar: np.ndarray  # (p,)

    def copy(self) -> "ModelState":
        return ModelState(*(np.array(getattr(self, k), dtype=np.float64) for k in PARAMS))


def lag_matrix(residuals, p: int):
    """Lagged predictors for an AR(p) fit.

    Returns ``(lags, target)`` where ``lags[t, j-1, n] = e[t + p - j, n]`` and
    ``target = e[p:]``; the likelihood runs over the last ``T - p`` samples.
    """
    e = np.asarray(residuals, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    T = e.shape[0]
    if p < 0:
        raise ValueError("AR order must be non-negative")
    if p >= T:
        raise ValueError(f"AR order {p} must be smaller than the series length {T}")
    lags = np.stack([e[p - j: T - j] for j in range(1, p + 1)], axis=1) if p else np.empty((T, 0, e.shape[1]))
    return lags, e[p:]


def ar_filter_coefs(R) -> np.ndarray:
    """Whitening filter ``(1, -a_1, ..., -a_p)`` per voxel, shape (p+1, N)."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([np.ones((1, R.shape[1])), -R], axis=0)


def whiten(Z, R, p: int) -> np.ndarray:
    """Apply each voxel's AR filter to the columns of ``Z`` (T x N)."""
    c = ar_filter_coefs(R)
    T = Z.shape[0]
    return sum(c[j] * Z[p - j: T - j] for j in range(p + 1))


def ols(Y, X) -> np.ndarray:
    return np.linalg.lstsq(X, Y, rcond=None)[0]


def yule_walker(e, p: int) -> np.ndarray:
    """Per-column Yule-Walker AR(p) estimates (biased autocovariances)."""
    e = np.asarray(e, dtype=np.float64)
    e = e - e.mean(axis=0)
    T, N = e.shape
    acov = np.stack([np.sum(e[k:] * e[:T - k], axis=0) / T for k in range(p + 1)])
    out = np.zeros((p, N))
    for n in range(N):
        if acov[0, n] > 0:
            out[:, n] = solve_toeplitz(acov[:p, n], acov[1:, n])
    return out


class _Sufficient:
    """Lag-shifted cross products so that AR-whitened Gram matrices reduce
    to small weighted sums."""

    def __init__(self, data: GlmDataset):
        X, Y, p, T = data.X, data.Y, data.p, data.T
        Xs = [X[p - i: T - i] for i in range(p + 1)]
        Ys = [Y[p - i: T - i] for i in range(p + 1)]
        self.XtX = np.array([[Xi.T @ Xj for Xj in Xs] for Xi in Xs])   # (p+1, p+1, K, K)
        self.XtY = np.array([[Xi.T @ Yj for Yj in Ys] for Xi in Xs])   # (p+1, p+1, K, N)

    def gram(self, R):
        c = ar_filter_coefs(R)
        XtX = np.einsum("in,jn,ijkl->nkl", c, c, self.XtX)
        Xty = np.einsum("in,jn,ijkn->kn", c, c, self.XtY)
        return XtX, Xty


def _block_diag_coo(blocks):
    """COO triplets for the block-diagonal matrix of ``blocks`` (N, m, m),
    indexed voxel-major (``n * m + k``)."""
    N, m, _ = blocks.shape
    base = np.arange(N)[:, None, None] * m
    rows = np.broadcast_to(base + np.arange(m)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(m)[None, None, :], blocks.shape)
    return rows.ravel(), cols.ravel(), blocks.ravel()


class _JointGaussian:
    """Joint conditional of an (m x N) coefficient array with prior
    ``blockdiag_k(prec_k * D)`` and per-voxel likelihood blocks."""

    def __init__(self, prior: PriorSpec, m: int):
        self.prior = prior
        self.m = m
        D = prior.D.tocoo()
        self._D = D
        self._perm = None
        if prior.n * m > 64:
            vox = rcm_ordering(prior.D + sp.eye(prior.n))
            self._perm = (vox[:, None] * m + np.arange(m)).ravel()

    def precision(self, prec, blocks=None) -> sp.csr_matrix:
        D, m = self._D, self.m
        k = np.arange(m)
        rows = [(D.row[:, None] * m + k).ravel()]
        cols = [(D.col[:, None] * m + k).ravel()]
        vals = [(D.data[:, None] * np.asarray(prec)[None, :]).ravel()]
        if blocks is not None:
            r, c, v = _block_diag_coo(blocks)
            rows.append(r), cols.append(c), vals.append(v)
        size = self.prior.n * m
        Q = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(size, size)).tocsr()
        Q.sum_duplicates()
        return Q

    def factor(self, prec, blocks=None):
        Q = self.precision(prec, blocks)
        return factorize(Q, ridge=self.prior.ridge,
                         ordering=self._perm if self._perm is not None else "rcm")

    def draw(self, prec, blocks, rhs, rng) -> np.ndarray:
        F = self.factor(prec, blocks)
        b = np.zeros(self.prior.n * self.m) if rhs is None else rhs.T.ravel()
        return F.sample(b, rng).reshape(self.prior.n, self.m).T

    def mean(self, prec, blocks, rhs) -> np.ndarray:
        F = self.factor(prec, blocks)
        return F.solve(rhs.T.ravel()).reshape(self.prior.n, self.m).T


def quadratic_form(D, v) -> float:
    return float(v @ (D @ v))


class GibbsSampler:
    """Holds the data, priors and cached structures for one model.

    ``fixed`` names parameters (from ``"W", "R", "lam", "alpha", "beta_ar"``)
    that keep their initial values. ``likelihood=False`` samples from the
    prior alone (for diagnostics).
    """

    def __init__(self, data: GlmDataset, prior: PriorSpec, prior_ar: PriorSpec | None = None,
                 hyper: Hyperpriors = Hyperpriors(), fixed=(), likelihood: bool = True):
        if prior.n != data.N:
            raise ValueError(f"prior has dimension {prior.n}, data has {data.N} voxels")
        self.data = data
        self.prior = prior
        self.prior_ar = prior if prior_ar is None else prior_ar
        if self.prior_ar.n != data.N:
            raise ValueError("AR prior dimension does not match the data")
        self.hyper = hyper
        self.fixed = frozenset(fixed)
        unknown = self.fixed - set(PARAMS)
        if unknown:
            raise ValueError(f"unknown parameters to fix: {sorted(unknown)}")
        self.likelihood = likelihood
        self._suff = _Sufficient(data)
        self._wjoint = _JointGaussian(prior, data.K)
        self._arjoint = _JointGaussian(self.prior_ar, data.p) if data.p else None

    # -- initial values -------------------------------------------------

    def initial_state(self) -> ModelState:
        """OLS regression maps, Yule-Walker AR maps on the OLS residuals,
        noise precisions from the whitened residual variance, unit spatial
        precisions."""
        d = self.data
        W = ols(d.Y, d.X)
        E = d.Y - d.X @ W
        R = yule_walker(E, d.p) if d.p else np.zeros((0, d.N))
        Z = whiten(E, R, d.p)
        var = np.mean(Z**2, axis=0)
        floor = 1e-12 * max(1.0, float(np.var(d.Y)))
        lam = 1.0 / np.maximum(var, floor)
        return ModelState(W, R, lam, np.ones(d.K), np.ones(d.p))

    # -- conditionals ---------------------------------------------------

    def w_conditional(self, state: ModelState):
        """Canonical parameters ``(Q, b)`` of the joint conditional of W
        (voxel-major ordering)."""
        if not self.likelihood:
            return self._wjoint.precision(state.alpha), np.zeros(self.data.N * self.data.K)
        XtX, Xty = self._suff.gram(state.R)
        Q = self._wjoint.precision(state.alpha, state.lam[:, None, None] * XtX)
        return Q, (state.lam * Xty).T.ravel()

    def w_conditional_mean(self, state: ModelState) -> np.ndarray:
        XtX, Xty = self._suff.gram(state.R)
        return self._wjoint.mean(state.alpha, state.lam[:, None, None] * XtX, state.lam * Xty)

    def sample_w(self, state: ModelState, rng) -> np.ndarray:
        if not self.likelihood:
            return self._wjoint.draw(state.alpha, None, None, rng)
        XtX, Xty = self._suff.gram(state.R)
        return self._wjoint.draw(state.alpha, state.lam[:, None, None] * XtX, state.lam * Xty, rng)

    def residuals(self, state: ModelState) -> np.ndarray:
        return self.data.Y - self.data.X @ state.W

    def sample_ar(self, state: ModelState, rng, E=None) -> np.ndarray:
        p = self.data.p
        if p == 0:
            raise ValueError("sample_ar needs an AR order of at least 1")
        if not self.likelihood:
            return self._arjoint.draw(state.beta_ar, None, None, rng)
        lags, target = lag_matrix(self.residuals(state) if E is None else E, p)
        EtE = np.einsum("tin,tjn->nij", lags, lags)
        Ete = np.einsum("tin,tn->in", lags, target)
        return self._arjoint.draw(state.beta_ar, state.lam[:, None, None] * EtE, state.lam * Ete, rng)

    def ssr(self, state: ModelState, E=None) -> np.ndarray:
        Z = whiten(self.residuals(state) if E is None else E, state.R, self.data.p)
        return np.sum(Z**2, axis=0)

    def sample_lambda(self, state: ModelState, rng, E=None) -> np.ndarray:
        d, h = self.data, self.hyper
        rate = h.b0 + 0.5 * self.ssr(state, E)
        if np.any(~np.isfinite(rate)) or np.any(rate <= 0):
            raise ValueError("non-positive or non-finite rate in the noise-precision conditional")
        shape = h.a0 + 0.5 * (d.T - d.p)
        return rng.gamma(shape, 1.0 / rate)

    def _gamma_precision(self, M, prior: PriorSpec, c0, d0, rng) -> np.ndarray:
        D = prior.D
        q = np.array([quadratic_form(D, row) for row in M])
        scale = np.abs(D.data).max(initial=1.0) * np.sum(M**2, axis=1)
        if np.any(q < -1e-10 * np.maximum(scale, 1e-300)):
            raise ValueError("negative quadratic form; prior precision is not PSD")
        q = np.maximum(q, 0.0)
        return rng.gamma(c0 + 0.5 * prior.rank, 1.0 / (d0 + 0.5 * q))

    def sample_alpha(self, state: ModelState, rng) -> np.ndarray:
        return self._gamma_precision(state.W, self.prior, self.hyper.c0, self.hyper.d0, rng)

    def sample_beta_ar(self, state: ModelState, rng) -> np.ndarray:
        return self._gamma_precision(state.R, self.prior_ar, self.hyper.e0, self.hyper.f0, rng)

    # -- driver ---------------------------------------------------------

    def step(self, state: ModelState, rng, it: int = 0) -> ModelState:
        """One sweep W -> R -> lam -> alpha -> beta_ar, in place."""
        p = self.data.p
        cache = {}

        def residuals():
            if "E" not in cache:
                cache["E"] = self.residuals(state)
            return cache["E"]

        steps = [("W", lambda: self.sample_w(state, rng))]
        if p:
            steps.append(("R", lambda: self.sample_ar(state, rng, residuals() if self.likelihood else None)))
        if self.likelihood:
            steps.append(("lam", lambda: self.sample_lambda(state, rng, residuals())))
        steps.append(("alpha", lambda: self.sample_alpha(state, rng)))
        if p:
            steps.append(("beta_ar", lambda: self.sample_beta_ar(state, rng)))
        for name, fn in steps:
            if name in self.fixed:
                continue
            try:
                setattr(state, name, fn())
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SamplerError(it, f"sampling {name}", exc) from exc
            if name == "W":
                cache.clear()
        return state

    def run(self, schedule: Schedule = Schedule(), seed=0, init: ModelState | None = None,
            store=PARAMS) -> "Chain":
        rng = np.random.default_rng(seed)
        state = (init or self.initial_state()).copy()
        store = tuple(s for s in store if s in PARAMS)
        draws = {k: [] for k in store}
        nonstat = 0
        report = max(1, schedule.total // 10)
        for it in range(1, schedule.total + 1):
            self.step(state, rng, it)
            if schedule.keeps(it):
                for k in store:
                    draws[k].append(getattr(state, k).copy())
                nonstat += int(np.sum(nonstationary(state.R)))
            if it % report == 0:
                logger.info("iteration %d/%d  alpha=%s", it, schedule.total, np.array2string(state.alpha, precision=3))
        arrays = {k: np.array(v) for k, v in draws.items()}
        meta = {
            "scheme": self.prior.scheme,
            "T": self.data.T, "K": self.data.K, "N": self.data.N, "p": self.data.p,
            "fixed": sorted(self.fixed),
            "nonstationary_ar_draws": nonstat,
        }
        return Chain(arrays, schedule, seed if isinstance(seed, int) else None, meta)


def nonstationary(R) -> np.ndarray:
    """Per-voxel flag: AR polynomial has a root on or inside the unit circle."""
    R = np.asarray(R)
    p, N = R.shape
    if p == 0:
        return np.zeros(N, dtype=bool)
    if p == 1:
        return np.abs(R[0]) >= 1
    comp = np.zeros((N, p, p))
    comp[:, 0, :] = R.T
    comp[:, np.arange(1, p), np.arange(p - 1)] = 1.0
    return np.abs(np.linalg.eigvals(comp)).max(axis=1) >= 1


@dataclass
class Chain:
    """Stored post-warmup, thinned draws; ``draws[name]`` has the draw index
    as its leading axis."""
    draws: dict
    schedule: Schedule
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(next(iter(self.draws.values())))

    def __getitem__(self, name) -> np.ndarray:
        return self.draws[name]

    def mean(self, name: str = "W") -> np.ndarray:
        return self.draws[name].mean(axis=0)

    def save(self, directory) -> Path:
        """Manifest JSON plus one little-endian float32 file per parameter."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arr in self.draws.items():
            fname = f"{name}.f32"
            np.ascontiguousarray(arr, dtype="<f4").tofile(directory / fname)
            files[name] = {"file": fname, "shape": list(arr.shape), "dtype": "f32",
                           "order": "draw-major", "endianness": "little"}
        manifest = {
            "schedule": {"total": self.schedule.total, "warmup": self.schedule.warmup,
                         "thin": self.schedule.thin},
            "seed": self.seed,
            "n_draws": self.n_draws,
            "meta": self.meta,
            "params": files,
        }
        path = directory / "chain.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "Chain":
        directory = Path(directory)
        manifest = json.loads((directory / "chain.json").read_text())
        draws = {}
        for name, spec in manifest["params"].items():
            shape = tuple(spec["shape"])
            raw = np.fromfile(directory / spec["file"], dtype="<f4")
            if raw.size != int(np.prod(shape)):
                raise ValueError(f"{spec['file']}: expected {int(np.prod(shape))} values, found {raw.size}")
            draws[name] = raw.reshape(shape).astype(np.float64)
        return cls(draws, Schedule(**manifest["schedule"]), manifest.get("seed"), manifest.get("meta", {}))


def gibbs_fit(data: GlmDataset, prior: PriorSpec, schedule: Schedule = Schedule(), seed=0,
              prior_ar: PriorSpec | None = None, hyper: Hyperpriors = Hyperpriors(),
              fixed=(), init: ModelState | None = None, likelihood: bool = True) -> Chain:
    """Run one Gibbs chain; identical arguments give identical draws."""
    sampler = GibbsSampler(data, prior, prior_ar, hyper, fixed, likelihood)
    return sampler.run(schedule, seed, init)


def gibbs_chains(data: GlmDataset, prior: PriorSpec, n_chains: int, schedule: Schedule = Schedule(),
                 seed: int = 0, **kwargs) -> list[Chain]:
    """Independent chains seeded from spawned substreams of one master seed."""
    seqs = np.random.SeedSequence(seed).spawn(n_chains)
    sampler = GibbsSampler(data, prior, **kwargs)
    chains = []
    for i, ss in enumerate(seqs):
        ch = sampler.run(schedule, ss)
        ch.seed = seed
        ch.meta["chain_index"] = i
        chains.append(ch)
    return chains
