"""Response families: conditional log-densities, their derivatives, moments and samplers.

Every family works on a *predictor* evaluated on a grid of latent cells.
Continuous families take a scalar predictor per cell plus an error standard
deviation; the cumulative probit takes a scalar predictor plus increasing
thresholds; the multinomial takes one predictor per category (reference
category column included and equal to zero).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from .errors import DataError

LOG_2PI = np.log(2.0 * np.pi)


def log_ndtr_diff(a, b):
    """log(Phi(b) - Phi(a)) for a <= b, accurate in both tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lhi + np.log1p(-np.exp(llo - lhi))
    return np.where(np.isneginf(lhi), -np.inf, out)


def _log_phi(x):
    return -0.5 * LOG_2PI - 0.5 * np.square(x)


@dataclass(frozen=True)
class Family:
    name = "abstract"
    categorical = False
    n_categories = None

    def check(self, y) -> np.ndarray:
        """Boolean mask of values inside the support."""
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(Family):
    name = "gaussian"

    def check(self, y):
        return np.isfinite(y)

    def logpdf(self, y, nu, sigma):
        z = (y - nu) / sigma
        return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z

    def terms(self, y, nu, sigma):
        """Log-density and derivatives w.r.t. the predictor and sigma.

        ``y`` has shape (n, 1) and ``nu`` shape (P,); results are (n, P).
        """
        z = (y - nu) / sigma
        logf = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
        return logf, z / sigma, (z * z - 1.0) / sigma

    def moments(self, nu, sigma):
        return nu, nu * nu + sigma * sigma

    def sample(self, rng, nu, sigma):
        return nu + sigma * rng.standard_normal(np.shape(nu))


@dataclass(frozen=True)
class CensoredGaussian(Family):
    """Gaussian latent response observed as ``lower`` whenever it falls at or below it."""

    name = "censored"
    lower: float = 0.0

    def check(self, y):
        return np.isfinite(y) & (y >= self.lower)

    def logpdf(self, y, nu, sigma):
        y, nu, sigma = np.broadcast_arrays(np.asarray(y, float), np.asarray(nu, float),
                                           np.asarray(sigma, float))
        at_bound = y <= self.lower
        z = (y - nu) / sigma
        dens = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
        mass = log_ndtr((self.lower - nu) / sigma)
        return np.where(at_bound, mass, dens)

    def terms(self, y, nu, sigma):
        at_bound = y <= self.lower
        z = (y - nu) / sigma
        a = (self.lower - nu) / sigma
        la = log_ndtr(a)
        with np.errstate(over="ignore"):
            mills = np.exp(_log_phi(a) - la)
        logf = np.where(at_bound, la, -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z)
        dnu = np.where(at_bound, -mills / sigma, z / sigma)
        dsig = np.where(at_bound, -mills * a / sigma, (z * z - 1.0) / sigma)
        return logf, dnu, dsig

    def moments(self, nu, sigma):
        mu = nu - self.lower
        r = mu / sigma
        cdf = ndtr(r)
        pdf = np.exp(_log_phi(r))
        ez = mu * cdf + sigma * pdf
        ez2 = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf
        c = self.lower
        return c + ez, c * c + 2.0 * c * ez + ez2

    def sample(self, rng, nu, sigma):
        ystar = nu + sigma * rng.standard_normal(np.shape(nu))
        return np.maximum(self.lower, ystar)


@dataclass(frozen=True)
class CumulativeProbit(Family):
    """Ordered categories 0..C-1 with P(y <= k) = Phi(threshold_k - nu)."""

    name = "cumprobit"
    categorical = True
    n_categories: int = 2

    def check(self, y):
        return np.isfinite(y) & (y >= 0) & (y <= self.n_categories - 1) & (np.floor(y) == y)

    def _bounds(self, thresholds):
        thr = np.asarray(thresholds, dtype=float)
        shape = thr.shape[:-1] + (1,)
        return np.concatenate([np.full(shape, -np.inf), thr, np.full(shape, np.inf)], axis=-1)

    def probabilities(self, nu, thresholds):
        """Category probabilities with a trailing category axis."""
        edges = self._bounds(thresholds) - np.asarray(nu, float)[..., None]
        return np.exp(log_ndtr_diff(edges[..., :-1], edges[..., 1:]))

    def logpdf(self, y, nu, thresholds):
        edges = self._bounds(thresholds)
        k = np.asarray(y, dtype=int)
        hi = np.take(edges, k + 1, axis=-1) - nu
        lo = np.take(edges, k, axis=-1) - nu
        return log_ndtr_diff(lo, hi)

    def terms(self, y, nu, thresholds):
        """``y`` (n, 1) int codes, ``nu`` (P,), ``thresholds`` (C-1,).

        Returns log-density (n, P), derivative w.r.t. nu (n, P) and w.r.t.
        each threshold (n, P, C-1).
        """
        edges = self._bounds(thresholds)
        k = y.astype(int)
        hi = edges[k + 1] - nu
        lo = edges[k] - nu
        logf = log_ndtr_diff(lo, hi)
        with np.errstate(over="ignore", invalid="ignore"):
            rhi = np.where(np.isinf(hi), 0.0, np.exp(_log_phi(hi) - logf))
            rlo = np.where(np.isinf(lo), 0.0, np.exp(_log_phi(lo) - logf))
        dnu = rlo - rhi
        n_thr = self.n_categories - 1
        dthr = np.zeros(logf.shape + (n_thr,))
        idx = np.arange(n_thr)
        dthr += np.where(idx == k[..., None], rhi[..., None], 0.0)
        dthr -= np.where(idx == k[..., None] - 1, rlo[..., None], 0.0)
        return logf, dnu, dthr

    def moments(self, nu, thresholds):
        p = self.probabilities(nu, thresholds)
        codes = np.arange(self.n_categories)
        return p @ codes, p @ (codes * codes)

    def sample(self, rng, nu, thresholds):
        ystar = nu + rng.standard_normal(np.shape(nu))
        return np.sum(ystar[..., None] > np.asarray(thresholds), axis=-1).astype(float)


@dataclass(frozen=True)
class Multinomial(Family):
    """Nominal categories 0..C-1 with softmax over category predictors."""

    name = "multinomial"
    categorical = True
    n_categories: int = 2

    def check(self, y):
        return np.isfinite(y) & (y >= 0) & (y <= self.n_categories - 1) & (np.floor(y) == y)

    def probabilities(self, pred):
        pred = np.asarray(pred, float)
        return np.exp(pred - logsumexp(pred, axis=-1, keepdims=True))

    def logpdf(self, y, pred):
        pred = np.asarray(pred, float)
        lse = logsumexp(pred, axis=-1)
        k = np.asarray(y, dtype=int)
        return np.take_along_axis(pred, np.broadcast_to(k, lse.shape)[..., None], axis=-1)[..., 0] - lse

    def terms(self, y, pred):
        """``y`` (n, 1) codes, ``pred`` (P, C); returns (n, P) and (n, P, C)."""
        logp = pred - logsumexp(pred, axis=-1, keepdims=True)
        k = y.astype(int)[:, 0]
        logf = logp[:, k].T
        onehot = np.arange(self.n_categories) == k[:, None]
        dpred = onehot[:, None, :] - np.exp(logp)[None, :, :]
        return logf, dpred

    def moments(self, pred):
        p = self.probabilities(pred)
        codes = np.arange(self.n_categories)
        return p @ codes, p @ (codes * codes)

    def sample(self, rng, pred):
        p = self.probabilities(pred)
        u = rng.random(p.shape[:-1])
        return np.minimum(np.sum(np.cumsum(p, axis=-1) < u[..., None], axis=-1),
                          self.n_categories - 1).astype(float)


def make_family(name: str, n_categories: int | None = None, lower: float = 0.0) -> Family:
    if name == "gaussian":
        return Gaussian()
    if name in ("censored", "censored-gaussian", "tobit"):
        return CensoredGaussian(lower=float(lower))
    if name in ("cumprobit", "cumulative-probit", "ordinal"):
        if not n_categories or n_categories < 2:
            raise ValueError("cumulative-probit needs n_categories >= 2")
        return CumulativeProbit(n_categories=int(n_categories))
    if name == "multinomial":
        if not n_categories or n_categories < 2:
            raise ValueError("multinomial needs n_categories >= 2")
        return Multinomial(n_categories=int(n_categories))
    raise ValueError(f"unknown family {name!r}")


def response_logdensity(family: Family, nu, sigma, y, thresholds=None):
    """log f(y | nu, sigma) for a single family.

    ``sigma`` is the error standard deviation for the continuous families and
    is ignored otherwise; ``thresholds`` is required for the cumulative probit.
    For the multinomial, ``nu`` holds one predictor per category.
    """
    y_arr = np.asarray(y, dtype=float)
    if not np.all(family.check(y_arr)):
        raise DataError(f"y={y!r} outside the support of the {family.name} family")
    if isinstance(family, (Gaussian, CensoredGaussian)):
        if np.any(np.asarray(sigma) <= 0):
            raise ValueError("error scale must be positive")
        return family.logpdf(y_arr, np.asarray(nu, float), np.asarray(sigma, float))
    if isinstance(family, CumulativeProbit):
        if thresholds is None:
            raise ValueError("cumulative probit needs thresholds")
        thr = np.asarray(thresholds, float)
        if np.any(np.diff(thr) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        return family.logpdf(y_arr, np.asarray(nu, float), thr)
    return family.logpdf(y_arr, nu)
