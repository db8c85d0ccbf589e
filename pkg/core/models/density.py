"""
Density Models
Multivariate Gaussian, product-kernel KDE with the maximal-smoothing bandwidth,
and a Gaussian copula with KDE marginals. Used for P(F|I) in BIF and P(F) in FIB.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, ndtr, ndtri

from ..errors import DimensionMismatchError, InsufficientDataError, InvalidInputError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-9
RIDGE_SCALE = 1e-6
MSP_CONSTANT = 1.144
BANDWIDTH_FLOOR = 1e-6
INVERSE_CDF_TOLERANCE = 1e-9
CORRELATION_SHRINK_STEP = 0.01
# cap on (query points x support points) evaluated at once
_CHUNK_CELLS = 2_000_000


class DensityKind(str, Enum):
    """Density estimators selectable for P(F|I) and P(F)"""
    GAUSS = "gauss"
    GAUSS_DIAG = "gauss-diag"
    KDE = "kde"
    COPULA = "copula"
    COPULA_DIAG = "copula-diag"

    @property
    def min_samples(self) -> int:
        if self in (DensityKind.COPULA, DensityKind.COPULA_DIAG):
            return 3
        return 2


def _as_samples(samples) -> np.ndarray:
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise InvalidInputError(f"expected an n x p sample matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("samples contain non-finite values")
    return X


def _as_points(points, p: int) -> np.ndarray:
    F = np.asarray(points, dtype=float)
    if F.ndim == 0:
        F = F.reshape(1, 1)
    elif F.ndim == 1:
        # a flat vector is one point, or n scalar points for a 1-D model
        F = F.reshape(-1, 1) if p == 1 else F.reshape(1, -1)
    if F.ndim != 2 or F.shape[1] != p:
        raise DimensionMismatchError(f"model has p={p}, got points of shape {F.shape}")
    return F


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Generator from a seed, or the generator itself when one is passed"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_count(count: int) -> int:
    if int(count) < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {count}")
    return int(count)


def _chunks(n_points: int, n_support: int):
    step = max(1, _CHUNK_CELLS // max(n_support, 1))
    for start in range(0, n_points, step):
        yield slice(start, min(start + step, n_points))


def regularized_cholesky(covariance: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of a covariance, adding a ridge only when factorization fails"""
    cov = 0.5 * (covariance + covariance.T)
    try:
        return cov, linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass

    ridge = RIDGE_SCALE * max(float(np.mean(np.diag(cov))), VARIANCE_FLOOR)
    identity = np.eye(cov.shape[0])
    for _ in range(15):
        candidate = cov + ridge * identity
        try:
            chol = linalg.cholesky(candidate, lower=True)
            logger.warning(f"Covariance not positive definite, applied ridge {ridge:.3g}")
            return candidate, chol
        except linalg.LinAlgError:
            ridge *= 10.0

    # Last resort: keep only the (floored) variances
    logger.warning("Covariance ridge failed to restore positive definiteness, using its diagonal")
    candidate = np.diag(np.maximum(np.diag(cov), VARIANCE_FLOOR))
    return candidate, np.sqrt(candidate)


class DensityModel(ABC):
    """A fitted continuous density with log-pdf and sampling"""

    kind: DensityKind

    @property
    @abstractmethod
    def p(self) -> int:
        """Feature dimension"""

    @abstractmethod
    def logpdf_many(self, points) -> np.ndarray:
        """Log-density of each row of an n x p matrix"""

    @abstractmethod
    def sample(self, count: int, seed: SeedLike = None) -> np.ndarray:
        """Draw count i.i.d. points"""

    def logpdf(self, f) -> float:
        """Log-density of a single p-vector"""
        F = np.asarray(f, dtype=float).reshape(1, -1)
        return float(self.logpdf_many(F)[0])


@dataclass(frozen=True)
class GaussianParams(DensityModel):
    """Multivariate normal with mean and (regularized) covariance"""
    mean: np.ndarray
    covariance: np.ndarray
    diagonal_only: bool = False
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _log_norm: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).ravel()
        cov = np.array(self.covariance, dtype=float).reshape(mean.size, mean.size)
        if self.diagonal_only:
            cov = np.diag(np.diag(cov))
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as e:
            raise InvalidInputError(f"covariance is not positive definite: {e}")
        for array in (mean, cov, chol):
            array.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(
            self, "_log_norm", -float(np.sum(np.log(np.diag(chol)))) - 0.5 * mean.size * LOG_2PI
        )

    @property
    def kind(self) -> DensityKind:
        return DensityKind.GAUSS_DIAG if self.diagonal_only else DensityKind.GAUSS

    @property
    def p(self) -> int:
        return self.mean.size

    def logpdf_many(self, points) -> np.ndarray:
        F = _as_points(points, self.p)
        z = linalg.solve_triangular(self._chol, (F - self.mean).T, lower=True)
        return self._log_norm - 0.5 * np.sum(z * z, axis=0)

    def sample(self, count: int, seed: SeedLike = None) -> np.ndarray:
        count = _check_count(count)
        z = make_rng(seed).standard_normal((count, self.p))
        return self.mean + z @ self._chol.T


def msp_bandwidths(samples: np.ndarray) -> np.ndarray:
    """Oversmoothed (maximal smoothing) Gaussian-kernel bandwidth per dimension"""
    n, p = samples.shape
    sigma = samples.std(axis=0, ddof=1)
    bandwidths = MSP_CONSTANT * sigma * n ** (-1.0 / (p + 4))
    return np.maximum(bandwidths, BANDWIDTH_FLOOR)


@dataclass(frozen=True)
class KdeParams(DensityModel):
    """Product Gaussian-kernel density over the fitted sample"""
    support_points: np.ndarray
    bandwidths: np.ndarray
    kind: ClassVar[DensityKind] = DensityKind.KDE

    def __post_init__(self):
        support = _as_samples(self.support_points)
        bandwidths = np.array(self.bandwidths, dtype=float).ravel()
        if bandwidths.size != support.shape[1]:
            raise InvalidInputError(
                f"{bandwidths.size} bandwidths for {support.shape[1]}-dimensional support"
            )
        if np.any(bandwidths <= 0):
            raise InvalidInputError("KDE bandwidths must be strictly positive")
        support = support.copy()
        for array in (support, bandwidths):
            array.setflags(write=False)
        object.__setattr__(self, "support_points", support)
        object.__setattr__(self, "bandwidths", bandwidths)

    @property
    def p(self) -> int:
        return self.support_points.shape[1]

    @property
    def n_support(self) -> int:
        return self.support_points.shape[0]

    def logpdf_many(self, points) -> np.ndarray:
        F = _as_points(points, self.p)
        scaled_support = self.support_points / self.bandwidths
        scaled = F / self.bandwidths
        log_norm = (
            -math.log(self.n_support)
            - float(np.sum(np.log(self.bandwidths)))
            - 0.5 * self.p * LOG_2PI
        )
        out = np.empty(F.shape[0])
        for rows in _chunks(F.shape[0], self.n_support):
            d2 = cdist(scaled[rows], scaled_support, "sqeuclidean")
            out[rows] = logsumexp(-0.5 * d2, axis=1)
        return out + log_norm

    def _require_1d(self):
        if self.p != 1:
            raise DimensionMismatchError(f"operation needs a one-dimensional KDE, got p={self.p}")

    def cdf_many(self, values) -> np.ndarray:
        """Marginal CDF of a one-dimensional KDE at each value"""
        self._require_1d()
        x = np.asarray(values, dtype=float).ravel()
        support = self.support_points[:, 0]
        h = self.bandwidths[0]
        out = np.empty(x.size)
        for rows in _chunks(x.size, support.size):
            out[rows] = ndtr((x[rows, None] - support[None, :]) / h).mean(axis=1)
        return out

    def support_range(self) -> Tuple[float, float]:
        """Interval holding essentially all of the 1-D mass"""
        self._require_1d()
        h = self.bandwidths[0]
        return float(self.support_points.min() - 10 * h), float(self.support_points.max() + 10 * h)

    def inverse_cdf(self, quantiles) -> np.ndarray:
        """Invert the 1-D CDF by bracketing bisection with Newton acceleration"""
        self._require_1d()
        u = np.asarray(quantiles, dtype=float).ravel()
        lower, upper = self.support_range()

        grid = np.linspace(lower, upper, 512)
        grid_cdf = np.maximum.accumulate(self.cdf_many(grid))
        x = np.interp(u, grid_cdf, grid)
        lo = np.full(u.size, lower)
        hi = np.full(u.size, upper)
        active = np.arange(u.size)

        for _ in range(200):
            if active.size == 0:
                break
            xa = x[active]
            residual = self.cdf_many(xa) - u[active]
            density = np.exp(self.logpdf_many(xa.reshape(-1, 1)))

            below = residual < 0
            lo[active] = np.where(below, xa, lo[active])
            hi[active] = np.where(below, hi[active], xa)

            with np.errstate(divide="ignore", invalid="ignore"):
                newton = xa - residual / density
            inside = np.isfinite(newton) & (newton > lo[active]) & (newton < hi[active])
            step = np.where(inside, newton, 0.5 * (lo[active] + hi[active]))

            done = (np.abs(step - xa) < INVERSE_CDF_TOLERANCE) | (
                hi[active] - lo[active] < INVERSE_CDF_TOLERANCE
            )
            x[active] = step
            active = active[~done]

        return x

    def sample(self, count: int, seed: SeedLike = None) -> np.ndarray:
        count = _check_count(count)
        rng = make_rng(seed)
        idx = rng.integers(self.n_support, size=count)
        noise = rng.standard_normal((count, self.p)) * self.bandwidths
        return self.support_points[idx] + noise


@dataclass(frozen=True)
class CopulaParams(DensityModel):
    """Gaussian copula over one-dimensional KDE marginals"""
    marginals: Tuple[KdeParams, ...]
    correlation: np.ndarray
    clip_epsilon: float
    independent: bool = False
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _log_det: float = field(init=False, repr=False, compare=False)
    _precision_gap: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        marginals = tuple(self.marginals)
        p = len(marginals)
        if p == 0 or any(m.p != 1 for m in marginals):
            raise InvalidInputError("copula needs at least one one-dimensional KDE marginal")
        correlation = np.array(self.correlation, dtype=float).reshape(p, p)
        if self.independent:
            correlation = np.eye(p)
        if not np.allclose(np.diag(correlation), 1.0):
            raise InvalidInputError("copula correlation must have a unit diagonal")
        try:
            chol = linalg.cholesky(correlation, lower=True)
        except linalg.LinAlgError as e:
            raise InvalidInputError(f"copula correlation is not positive definite: {e}")
        # R^-1 - I; exactly zero under independence
        gap = linalg.cho_solve((chol, True), np.eye(p)) - np.eye(p)
        for array in (correlation, chol, gap):
            array.setflags(write=False)
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "correlation", correlation)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_log_det", 2.0 * float(np.sum(np.log(np.diag(chol)))))
        object.__setattr__(self, "_precision_gap", gap)

    @property
    def kind(self) -> DensityKind:
        return DensityKind.COPULA_DIAG if self.independent else DensityKind.COPULA

    @property
    def p(self) -> int:
        return len(self.marginals)

    def normal_scores(self, points) -> np.ndarray:
        """Marginal KDE CDFs mapped through the standard normal quantile"""
        F = _as_points(points, self.p)
        u = np.column_stack([m.cdf_many(F[:, k]) for k, m in enumerate(self.marginals)])
        u = np.clip(u, self.clip_epsilon, 1.0 - self.clip_epsilon)
        return ndtri(u)

    def logpdf_many(self, points) -> np.ndarray:
        F = _as_points(points, self.p)
        out = np.zeros(F.shape[0])
        for k, marginal in enumerate(self.marginals):
            out += marginal.logpdf_many(F[:, [k]])
        if self.independent:
            return out
        z = self.normal_scores(F)
        quad = np.einsum("ij,jk,ik->i", z, self._precision_gap, z)
        return out - 0.5 * self._log_det - 0.5 * quad

    def sample(self, count: int, seed: SeedLike = None) -> np.ndarray:
        count = _check_count(count)
        z = make_rng(seed).standard_normal((count, self.p)) @ self._chol.T
        u = ndtr(z)
        return np.column_stack([m.inverse_cdf(u[:, k]) for k, m in enumerate(self.marginals)])


def fit_gaussian(samples, diagonal_only: bool = False) -> GaussianParams:
    """Maximum-likelihood Gaussian (denominator n) with variance floor and ridge fallback"""
    X = _as_samples(samples)
    n, p = X.shape
    if n < 2:
        raise InsufficientDataError(f"Gaussian fit needs at least 2 samples, got {n}")

    mean = X.mean(axis=0)
    centered = X - mean
    if diagonal_only:
        covariance = np.diag(np.maximum(np.mean(centered ** 2, axis=0), VARIANCE_FLOOR))
    else:
        covariance = centered.T @ centered / n
        diag = np.diag_indices(p)
        covariance[diag] = np.maximum(covariance[diag], VARIANCE_FLOOR)
        covariance, _ = regularized_cholesky(covariance)

    return GaussianParams(mean=mean, covariance=covariance, diagonal_only=diagonal_only)


def gaussian_logpdf(params: GaussianParams, f) -> float:
    """Gaussian log-density at one point"""
    return params.logpdf(f)


def fit_kde(samples) -> KdeParams:
    """Store the sample and choose MSP bandwidths"""
    X = _as_samples(samples)
    if X.shape[0] < 2:
        raise InsufficientDataError(f"KDE fit needs at least 2 samples, got {X.shape[0]}")
    return KdeParams(support_points=X, bandwidths=msp_bandwidths(X))


def kde_logpdf(params: KdeParams, f) -> float:
    """KDE log-density at one point"""
    return params.logpdf(f)


def kde_cdf_1d(params: KdeParams, f: float) -> float:
    """CDF of a one-dimensional KDE"""
    return float(params.cdf_many([f])[0])


def shrink_to_positive_definite(correlation: np.ndarray) -> np.ndarray:
    """Smallest shrinkage toward the identity (in steps of 0.01) that factorizes"""
    p = correlation.shape[0]
    identity = np.eye(p)
    steps = int(round(1.0 / CORRELATION_SHRINK_STEP))
    for step in range(steps + 1):
        lam = step * CORRELATION_SHRINK_STEP
        candidate = (1.0 - lam) * correlation + lam * identity
        try:
            linalg.cholesky(candidate, lower=True)
        except linalg.LinAlgError:
            continue
        if step:
            logger.warning(f"Copula correlation shrunk toward identity by {lam:.2f}")
        return candidate
    return identity


def _normal_score_correlation(z: np.ndarray) -> np.ndarray:
    p = z.shape[1]
    if p == 1:
        return np.ones((1, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.atleast_2d(np.corrcoef(z, rowvar=False))
    # constant columns have no defined correlation; treat them as independent
    corr = np.where(np.isfinite(corr), corr, 0.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def fit_copula(samples, independent: bool = False) -> CopulaParams:
    """KDE marginals plus the correlation of the clipped normal scores"""
    X = _as_samples(samples)
    n, p = X.shape
    if n < 3:
        raise InsufficientDataError(f"copula fit needs at least 3 samples, got {n}")

    marginals = tuple(fit_kde(X[:, [k]]) for k in range(p))
    clip_epsilon = 1.0 / (2.0 * n)
    if independent:
        correlation = np.eye(p)
    else:
        u = np.column_stack([m.cdf_many(X[:, k]) for k, m in enumerate(marginals)])
        z = ndtri(np.clip(u, clip_epsilon, 1.0 - clip_epsilon))
        correlation = shrink_to_positive_definite(_normal_score_correlation(z))

    return CopulaParams(
        marginals=marginals,
        correlation=correlation,
        clip_epsilon=clip_epsilon,
        independent=independent,
    )


def copula_logpdf(params: CopulaParams, f) -> float:
    """Copula log-density plus the marginal KDE log-densities"""
    return params.logpdf(f)


def fit_density(kind: DensityKind, samples) -> DensityModel:
    """Fit the density estimator named by kind"""
    kind = DensityKind(kind)
    if kind is DensityKind.GAUSS:
        return fit_gaussian(samples, diagonal_only=False)
    if kind is DensityKind.GAUSS_DIAG:
        return fit_gaussian(samples, diagonal_only=True)
    if kind is DensityKind.KDE:
        return fit_kde(samples)
    if kind is DensityKind.COPULA:
        return fit_copula(samples, independent=False)
    return fit_copula(samples, independent=True)


def sample(model: DensityModel, count: int, seed: SeedLike = None) -> np.ndarray:
    """count x p draws from any fitted density; same seed, same draws"""
    return model.sample(count, seed)
