"""Full-covariance Gaussian mixture: EM fitting, log-density, sampling,
exact marginals and the exact conditional of one coordinate given the rest.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.special import logsumexp, ndtri, ndtr

from . import jsonio
from .errors import (DimensionMismatch, EmptyDims, InvalidInput, SingularComponent,
                     TooFewSamples)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    restarts: int = 3
    seed: int = 0
    reg: float = 1e-6


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)
    history: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        mu = np.atleast_2d(np.asarray(self.means, float))
        cov = np.asarray(self.covariances, float)
        if cov.ndim == 2:
            cov = cov[None]
        K, D = mu.shape
        if w.shape != (K,) or cov.shape != (K, D, D):
            raise DimensionMismatch("inconsistent GMM parameter shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidInput("mixture weights must be non-negative and sum to 1")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        chol = np.empty_like(cov)
        for k in range(K):
            try:
                chol[k] = np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError:
                raise SingularComponent(f"component {k} covariance is not positive definite") from None
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        mu = self.mean()
        d = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum("k,ki,kj->ij", self.weights, d, d)

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "K": self.K,
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if int(d.get("format_version", -1)) != FORMAT_VERSION:
            raise InvalidInput(f"unsupported GMM format version {d.get('format_version')}")
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["covariances"], float))

    def save(self, path):
        jsonio.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(jsonio.load(path))


def _component_log_pdf(g, x):
    """(N, K) matrix of log N(x_n; mu_k, Sigma_k)."""
    N, D = x.shape
    out = np.empty((N, g.K))
    for k in range(g.K):
        L = g._chol[k]
        diff = (x - g.means[k]).T
        sol = _solve_lower(L, diff)
        out[:, k] = -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * D * LOG_2PI
    return out


def _solve_lower(L, b):
    from scipy.linalg import solve_triangular
    return solve_triangular(L, b, lower=True, check_finite=False)


def _as_batch(g, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != g.dim:
        raise DimensionMismatch(f"expected dimension {g.dim}, got {x2.shape[1]}")
    return x2, single


def gmm_log_pdf(g: Gmm, x):
    """log sum_k w_k N(x; mu_k, Sigma_k) via log-sum-exp.

    Accepts a single vector (returns a float) or an (N, D) batch.
    """
    x2, single = _as_batch(g, x)
    with np.errstate(divide="ignore"):
        lw = np.log(g.weights)
    out = logsumexp(_component_log_pdf(g, x2) + lw, axis=1)
    return float(out[0]) if single else out


def gmm_sample(g: Gmm, rng, size=None):
    """Draw a component by weight, then a Cholesky-transformed normal."""
    n = 1 if size is None else int(size)
    comp = rng.choice(g.K, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    x = g.means[comp] + np.einsum("nij,nj->ni", g._chol[comp], z)
    return x[0] if size is None else x


def gmm_marginal(g: Gmm, dims):
    dims = list(dims)
    if not dims:
        raise EmptyDims("marginal needs at least one dimension")
    if any(d < 0 or d >= g.dim for d in dims) or len(set(dims)) != len(dims):
        raise DimensionMismatch(f"invalid marginal dims {dims} for dimension {g.dim}")
    idx = np.ix_(range(g.K), dims, dims)
    return Gmm(g.weights.copy(), g.means[:, dims], g.covariances[idx])


@dataclass(frozen=True)
class ScalarConditional:
    """Mixture-of-normals law of one coordinate given the others, per query point."""

    log_weights: np.ndarray  # (N, K), normalised over K
    means: np.ndarray  # (N, K)
    sds: np.ndarray  # (K,)

    def log_pdf(self, y):
        y = np.asarray(y, float)
        z = (y[..., None] - self.means) / self.sds
        return logsumexp(self.log_weights - 0.5 * z * z - np.log(self.sds) - 0.5 * LOG_2PI, axis=-1)

    def log_mass(self, lo, hi):
        """log P(lo <= y <= hi) per query point."""
        a = (lo - self.means) / self.sds
        b = (hi - self.means) / self.sds
        # P(a <= Z <= b) computed on the side away from the bulk to keep precision
        upper = np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
        with np.errstate(divide="ignore"):
            return logsumexp(self.log_weights + np.log(np.maximum(upper, 0.0)), axis=-1)

    def sample_truncated(self, rng, lo, hi):
        """Exact draw from the conditional restricted to [lo, hi].

        Picks a component with probability proportional to its truncated mass,
        then inverts that component's truncated normal CDF.
        """
        a = (lo - self.means) / self.sds
        b = (hi - self.means) / self.sds
        ca, cb = ndtr(a), ndtr(b)
        mass = np.maximum(cb - ca, 0.0)
        with np.errstate(divide="ignore"):
            lp = self.log_weights + np.log(mass)
        lp = lp - logsumexp(lp, axis=1, keepdims=True)
        cum = np.cumsum(np.exp(lp), axis=1)
        u = rng.random(lp.shape[0])
        k = np.minimum((u[:, None] > cum).sum(axis=1), lp.shape[1] - 1)
        rows = np.arange(lp.shape[0])
        v = rng.random(lp.shape[0])
        p = ca[rows, k] + v * (cb[rows, k] - ca[rows, k])
        p = np.clip(p, 1e-300, 1 - 1e-16)
        y = self.means[rows, k] + self.sds[k] * ndtri(p)
        return np.clip(y, lo, hi)


def gmm_conditional(g: Gmm, target: int, x_obs):
    """Exact conditional law of coordinate ``target`` given the remaining ones.

    ``x_obs`` is (N, D-1) in the order of the remaining coordinates.
    """
    obs = [d for d in range(g.dim) if d != target]
    x_obs = np.atleast_2d(np.asarray(x_obs, float))
    if x_obs.shape[1] != len(obs):
        raise DimensionMismatch(f"expected {len(obs)} observed coordinates")
    S = g.covariances
    S_oo = S[np.ix_(range(g.K), obs, obs)]
    S_to = S[:, target, obs]  # (K, D-1)
    S_tt = S[:, target, target]
    gain = np.linalg.solve(S_oo, S_to[:, :, None])[:, :, 0]  # (K, D-1)
    var = S_tt - np.einsum("ki,ki->k", gain, S_to)
    if np.any(var <= 0):
        raise SingularComponent("conditional variance is not positive")
    diff = x_obs[:, None, :] - g.means[None, :, obs]  # (N, K, D-1)
    means = g.means[None, :, target] + np.einsum("nki,ki->nk", diff, gain)
    marg = gmm_marginal(g, obs)
    with np.errstate(divide="ignore"):
        lw = _component_log_pdf(marg, x_obs) + np.log(g.weights)
    lw = lw - logsumexp(lw, axis=1, keepdims=True)
    return ScalarConditional(lw, means, np.sqrt(var))


# ---------------------------------------------------------------- fitting

def _kmeanspp(x, K, rng):
    N = x.shape[0]
    centers = [x[rng.integers(N)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(N)
        else:
            idx = rng.choice(N, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp, reg):
    N, D = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((resp.shape[1], D, D))
    for k in range(resp.shape[1]):
        diff = x - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg * np.eye(D)
    return weights, means, covs


def _em_once(x, K, cfg, rng):
    N, D = x.shape
    centers = _kmeanspp(x, K, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((N, K))
    resp[np.arange(N), labels] = 1.0
    weights, means, covs = _m_step(x, resp, cfg.reg)
    history = []
    prev = -np.inf
    for it in range(cfg.max_iter):
        g = Gmm(weights, means, covs)
        lp = _component_log_pdf(g, x) + np.log(weights)
        ll_n = logsumexp(lp, axis=1)
        ll = float(ll_n.mean())
        history.append(ll)
        if it > 0 and abs(ll - prev) <= cfg.tol * max(1.0, abs(prev)):
            break
        prev = ll
        resp = np.exp(lp - ll_n[:, None])
        weights, means, covs = _m_step(x, resp, cfg.reg)
    else:
        g = Gmm(weights, means, covs)
        history.append(float(gmm_log_pdf(g, x).mean()))
    return g, history


def fit_gmm(data, K, config: GmmConfig = GmmConfig()):
    """Fit a K-component full-covariance mixture by EM, best of ``restarts`` seeds.

    The returned model carries the per-iteration mean log-likelihood of the
    winning restart in ``history``.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if K < 1:
        raise InvalidInput("K must be >= 1")
    N, D = x.shape
    if N < 10 * K * D:
        raise TooFewSamples(f"need at least {10 * K * D} samples for K={K}, D={D}; got {N}")
    best, best_hist = None, None
    seeds = np.random.SeedSequence(config.seed).spawn(max(1, config.restarts))
    for r, ss in enumerate(seeds):
        g, hist = _em_once(x, K, config, np.random.default_rng(ss))
        log.debug("restart %d: %d iterations, mean log-lik %.6f", r, len(hist), hist[-1])
        if best is None or hist[-1] > best_hist[-1]:
            best, best_hist = g, hist
    return Gmm(best.weights, best.means, best.covariances, history=tuple(best_hist))
