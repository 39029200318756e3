"""Densities and samplers for the distributions the mixture models compose.

Covers the multivariate t (log-density and randomized-QMC CDF), the
skew-t built from a half-normal/gamma hierarchy whose density multiplies
a t density by a p-variate t CDF of a skew-transformed residual, and the
generalized-hyperbolic skew-t with Bessel-function density.

The skew component parameters carry the factor form
``Sigma = Lambda Lambda' + diag(psi)``; the latent hierarchy places its
conditional Gaussian scale at ``Xi = Sigma - Delta^2`` so that sampler and
density describe exactly the same law.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln, stdtr

from . import _mvtqmc
from .covariance import FactorCovariance
from .errors import DomainError, NumericError
from .special import _log_bessel_k_vec

__all__ = [
    "MvtParams",
    "SdbComponentParams",
    "GhSkewTParams",
    "mvt_logpdf",
    "mvt_cdf",
    "sdb_logpdf",
    "sdb_sample",
    "gh_logpdf",
    "gh_sample",
    "CDF_FLOOR",
]

# CDF estimates below this are floored before taking logs; callers are
# warned so a fit engine can flag the observation instead of aborting.
CDF_FLOOR = 1e-300


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).ravel()
    if v.size == 0 or np.any(~np.isfinite(v)):
        raise DomainError(f"{name} must be a finite, non-empty vector")
    return v


def _check_spd(sigma: np.ndarray, name: str) -> None:
    sigma = np.asarray(sigma)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DomainError(f"{name} must be a square matrix")
    asym = float(np.max(np.abs(sigma - sigma.T)))
    if asym > 1e-12 * max(1.0, float(np.max(np.abs(sigma)))):
        raise DomainError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        smallest = float(np.linalg.eigvalsh(sigma)[0])
        raise NumericError(
            f"{name} is not positive definite (smallest eigenvalue {smallest:.3e})"
        ) from exc


@dataclass(frozen=True)
class MvtParams:
    """Location, scale and degrees of freedom of a multivariate t law."""

    mu: np.ndarray
    sigma: np.ndarray
    nu: float

    def __post_init__(self) -> None:
        mu = _as_vector(self.mu, "mu")
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise DomainError("sigma must be p x p with p = len(mu)")
        _check_spd(sigma, "sigma")
        if not (np.isfinite(self.nu) and self.nu > 0.0):
            raise DomainError(f"nu must be finite and > 0, got {self.nu}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def p(self) -> int:
        return self.mu.size

    @cached_property
    def _chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.sigma)

    @cached_property
    def _log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))


def _mvt_log_norm(p: int, nu: float, log_det: float) -> float:
    return (
        gammaln(0.5 * (nu + p))
        - gammaln(0.5 * nu)
        - 0.5 * p * math.log(nu * math.pi)
        - 0.5 * log_det
    )


def mvt_logpdf(x, params: MvtParams):
    """Log density of the p-variate Student t.

    Accepts a single point ``(p,)`` or a batch ``(n, p)``; the Mahalanobis
    term is computed once via a triangular solve and reused.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != params.p:
        raise DomainError("dimension mismatch between x and params")
    z = np.linalg.solve(params._chol, (pts - params.mu).T)
    d = np.einsum("ij,ij->j", z, z)
    out = _mvt_log_norm(params.p, params.nu, params._log_det) - 0.5 * (
        params.nu + params.p
    ) * np.log1p(d / params.nu)
    return float(out[0]) if single else out


def mvt_cdf(
    upper,
    params: MvtParams,
    rng_seed: int = 0,
    target_abs_err: float = 1e-4,
) -> tuple[float, float]:
    """``P(T <= upper)`` with a reported standard-error estimate.

    Randomized quasi-Monte Carlo over the separation-of-variables
    transform; eight scrambles by default, node count doubled until the
    scramble spread meets ``target_abs_err``.  Deterministic for a fixed
    seed.  The univariate case is evaluated exactly.
    """
    if not (0.0 < target_abs_err <= 0.1):
        raise DomainError("target_abs_err must lie in (0, 0.1]")
    upper = np.asarray(upper, dtype=float).ravel()
    if upper.size != params.p:
        raise DomainError("dimension mismatch between upper and params")
    gap = upper - params.mu
    if params.p == 1:
        if np.isneginf(gap[0]):
            return 0.0, 0.0
        if np.isposinf(gap[0]):
            return 1.0, 0.0
        val = float(stdtr(params.nu, gap[0] / math.sqrt(params.sigma[0, 0])))
        return val, 0.0
    return _mvtqmc.mvt_cdf_qmc(
        gap,
        params.sigma,
        params.nu,
        target_se=target_abs_err,
        seed=rng_seed,
    )


@dataclass(frozen=True)
class SdbComponentParams:
    """One skew-t factor-analysis component.

    ``delta`` holds the diagonal of the skewness matrix, ``lam``/``psi``
    the factor loadings and noise of ``Sigma = Lambda Lambda' + Psi``.
    Construction verifies that ``Xi = Sigma - Delta^2`` is positive
    definite; the hierarchical representation (and hence the sampler and
    the conditional-moment machinery) lives on ``Xi``.
    """

    mu: np.ndarray
    delta: np.ndarray
    lam: np.ndarray
    psi: np.ndarray
    nu: float

    def __post_init__(self) -> None:
        mu = _as_vector(self.mu, "mu")
        delta = np.asarray(self.delta, dtype=float).ravel()
        if delta.shape != mu.shape or np.any(~np.isfinite(delta)):
            raise DomainError("delta must be a finite vector matching mu")
        fc = FactorCovariance(self.lam, self.psi)
        if fc.p != mu.size:
            raise DomainError("loadings row count must match len(mu)")
        if not (np.isfinite(self.nu) and self.nu > 0.0):
            raise DomainError(f"nu must be finite and > 0, got {self.nu}")
        xi = fc.dense() - np.diag(delta**2)
        try:
            xi_chol = np.linalg.cholesky(xi)
        except np.linalg.LinAlgError as exc:
            smallest = float(np.linalg.eigvalsh(xi)[0])
            raise DomainError(
                "Sigma - Delta^2 must be positive definite for the latent "
                f"representation (smallest eigenvalue {smallest:.3e})"
            ) from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "lam", fc.lam)
        object.__setattr__(self, "psi", fc.psi)
        object.__setattr__(self, "_fc", fc)
        object.__setattr__(self, "_xi_chol", xi_chol)

    @property
    def p(self) -> int:
        return self.mu.size

    @property
    def q(self) -> int:
        return self.lam.shape[1]

    @property
    def fc(self) -> FactorCovariance:
        return self._fc

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return self._fc.solve(np.eye(self.p))

    @cached_property
    def skew_scale(self) -> np.ndarray:
        """``Gamma = I - Delta Sigma^{-1} Delta``, the CDF factor's scale."""
        return np.eye(self.p) - (self.delta[:, None] * self.sigma_inv) * self.delta


def _sdb_geometry(params: SdbComponentParams, pts: np.ndarray):
    """Mahalanobis distances and skew residual locations for a batch."""
    r = pts - params.mu
    sir = params.fc.solve(r.T)  # (p, n)
    d = np.einsum("ij,ji->i", r, sir)
    m = (params.delta[:, None] * sir).T  # (n, p)
    return d, m


def sdb_logpdf_batch(
    pts: np.ndarray,
    params: SdbComponentParams,
    cdf_err: float = 1e-4,
    rng_seed: int = 0,
    max_nodes: int = 1 << 17,
):
    """Vectorized log density; returns ``(logpdf, underflow_flags)``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p, nu = params.p, params.nu
    d, m = _sdb_geometry(params, pts)
    log_t = (
        _mvt_log_norm(p, nu, params.fc.log_det)
        - 0.5 * (nu + p) * np.log1p(d / nu)
    )
    if np.all(params.delta == 0.0):
        # The CDF factor is exactly 2^{-p}: orthant symmetry.
        return log_t, np.zeros(pts.shape[0], dtype=bool)
    cscale = (nu + d) / (nu + p)
    res = _mvtqmc.truncated_t_orthant(
        m,
        params.skew_scale,
        cscale,
        nu + p,
        target_se=cdf_err,
        seed=rng_seed,
        want=_mvtqmc.WANT_CDF,
        max_nodes=max_nodes,
    )
    prob = res.prob
    flags = prob < CDF_FLOOR
    if np.any(flags):
        warnings.warn(
            f"{int(flags.sum())} CDF value(s) underflowed and were floored",
            RuntimeWarning,
            stacklevel=2,
        )
        prob = np.maximum(prob, CDF_FLOOR)
    return p * math.log(2.0) + log_t + np.log(prob), flags


def sdb_logpdf(
    x,
    params: SdbComponentParams,
    cdf_err: float = 1e-4,
    rng_seed: int = 0,
) -> float:
    """Log density of the skew-t component at a single point.

    The t factor is evaluated through the Woodbury form of ``Sigma``; the
    CDF factor is a p-variate t probability estimated to absolute error
    ``cdf_err`` (deterministic given ``rng_seed``).
    """
    x = _as_vector(x, "x")
    if x.size != params.p:
        raise DomainError("dimension mismatch between x and params")
    out, _ = sdb_logpdf_batch(x[None, :], params, cdf_err=cdf_err, rng_seed=rng_seed)
    return float(out[0])


def sdb_sample(
    params: SdbComponentParams, n: int, rng_seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact draws from the latent hierarchy.

    ``W ~ Gamma(nu/2, rate nu/2)``, ``V | w`` half-normal with scale
    ``(1/w) I``, and ``X | v, w ~ N(mu + Delta v, (1/w) Xi)``.  The latent
    variables are returned so tests can condition on them.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    p = params.p
    w = rng.gamma(shape=0.5 * params.nu, scale=2.0 / params.nu, size=n)
    root_w = np.sqrt(w)[:, None]
    v = np.abs(rng.standard_normal((n, p))) / root_w
    eps = (rng.standard_normal((n, p)) @ params._xi_chol.T) / root_w
    x = params.mu + v * params.delta + eps
    return x, w, v


@dataclass(frozen=True)
class GhSkewTParams:
    """Location, scale, skewness and df of the GH-family skew t.

    ``scale`` optionally carries the factor form of ``sigma``
    (``Lambda Lambda' + Psi``); when given, ``sigma`` may be omitted and is
    materialized from it.  Fit engines always populate ``scale``.
    """

    mu: np.ndarray
    sigma: np.ndarray | None
    alpha: np.ndarray
    nu: float
    scale: FactorCovariance | None = None

    def __post_init__(self) -> None:
        mu = _as_vector(self.mu, "mu")
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        if alpha.shape != mu.shape or np.any(~np.isfinite(alpha)):
            raise DomainError("alpha must be a finite vector matching mu")
        sigma = self.sigma
        if sigma is None:
            if self.scale is None:
                raise DomainError("provide sigma or a factor-form scale")
            sigma = self.scale.dense()
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise DomainError("sigma must be p x p with p = len(mu)")
        _check_spd(sigma, "sigma")
        if not (np.isfinite(self.nu) and self.nu > 0.0):
            raise DomainError(f"nu must be finite and > 0, got {self.nu}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", alpha)

    @property
    def p(self) -> int:
        return self.mu.size

    @property
    def is_symmetric(self) -> bool:
        return bool(np.all(self.alpha == 0.0))

    @cached_property
    def _chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.sigma)

    @cached_property
    def _log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @cached_property
    def _sigma_inv_alpha(self) -> np.ndarray:
        z = np.linalg.solve(self._chol, self.alpha)
        return np.linalg.solve(self._chol.T, z)

    @cached_property
    def alpha_quad(self) -> float:
        """``alpha' Sigma^{-1} alpha``."""
        return float(self.alpha @ self._sigma_inv_alpha)


def gh_logpdf_batch(pts: np.ndarray, params: GhSkewTParams) -> np.ndarray:
    """Vectorized GH skew-t log density, fully in log space."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    p, nu = params.p, params.nu
    r = pts - params.mu
    z = np.linalg.solve(params._chol, r.T)
    d = np.einsum("ij,ij->j", z, z)
    if params.is_symmetric:
        # Bessel form is 0/0 at alpha = 0; the limit is the t density.
        return (
            _mvt_log_norm(p, nu, params._log_det)
            - 0.5 * (nu + p) * np.log1p(d / nu)
        )
    aq = params.alpha_quad
    chi = nu + d
    lin = r @ params._sigma_inv_alpha
    lam = -0.5 * (nu + p)
    logk = _log_bessel_k_vec(lam, np.sqrt(aq * chi))
    return (
        0.25 * (-nu - p) * (np.log(chi) - math.log(aq))
        + 0.5 * nu * math.log(nu)
        + logk
        - 0.5 * p * math.log(2.0 * math.pi)
        - 0.5 * params._log_det
        - gammaln(0.5 * nu)
        - (0.5 * nu - 1.0) * math.log(2.0)
        + lin
    )


def gh_logpdf(x, params: GhSkewTParams) -> float:
    """Log density of the GH skew t at a single point."""
    x = _as_vector(x, "x")
    if x.size != params.p:
        raise DomainError("dimension mismatch between x and params")
    return float(gh_logpdf_batch(x[None, :], params)[0])


def gh_sample(
    params: GhSkewTParams, n: int, rng_seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Draws via the inverse-gamma mixing representation.

    ``Y ~ IG(nu/2, nu/2)`` and ``X = mu + Y alpha + sqrt(Y) Q`` with
    ``Q ~ N(0, Sigma)``; the mixing variables are returned for tests of
    the GIG conditional.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    y = (0.5 * params.nu) / rng.gamma(shape=0.5 * params.nu, scale=1.0, size=n)
    q = rng.standard_normal((n, params.p)) @ params._chol.T
    x = params.mu + y[:, None] * params.alpha + np.sqrt(y)[:, None] * q
    return x, y
