"""Conditional expectations driving the E-steps of both mixture families.

For the skew-t hierarchy the posterior of the latent pair ``(W, V)`` given
an observation factorizes as

.. math::
    p(w, v \\mid x) \\propto \\mathrm{Ga}(w; a, b)\\,
    \\phi_p(v; m, (1/w)\\Gamma)\\, 1\\{v > 0\\},

with ``a = (nu+p)/2``, ``b = (nu+d)/2``, ``m = Delta Sigma^{-1}(x-mu)``
and ``Gamma = I - Delta Sigma^{-1} Delta``.  A gamma change of measure
turns every ``E[W h(V) | x]`` into a truncated multivariate-t moment two
degrees of freedom higher, so

* ``e1 = E[W|x]`` is a ratio of two orthant probabilities (df ``nu+p+2``
  over ``nu+p``),
* ``e2, e3`` are ``e1`` times first/second moments of the positive-orthant
  truncated t at df ``nu+p+2``,
* ``e4 = E[log W|x]`` follows from the digamma/log decomposition of the
  conditional gamma, with the residual log-quadform expectation taken over
  the same QMC nodes that produce the orthant probability.

A rejection sampler over the identical factorization provides unbiased
oracle estimates that never touch the QMC machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma as _psi
from scipy.special import gammaln

from . import _mvtqmc
from .distributions import (
    CDF_FLOOR,
    GhSkewTParams,
    SdbComponentParams,
    _mvt_log_norm,
    _sdb_geometry,
)
from .errors import DomainError, UnreliableEstimateError
from .special import GigParams, gig_moments

__all__ = [
    "EStepMoments",
    "OracleMoments",
    "MomentConfig",
    "sdb_moments",
    "mc_oracle_moments",
    "gh_moments",
]

# Orthant probabilities below this make the analytic path fall back to the
# symmetric closed forms (flagged, never aborted).
DEGENERATE_PROB = 1e-12


@dataclass(frozen=True)
class MomentConfig:
    """Error control for the moment machinery.

    ``cdf_target_err`` governs the density-path CDF evaluations (the
    orthant probability feeding responsibilities and the log-likelihood);
    ``quad_tol`` governs the residual quadrature of ``e4`` and the orthant
    probabilities inside the moment integrals.  ``moment_rel_tol`` is a
    relative backstop on the truncated-moment ratios themselves, whose
    variance is intrinsically higher.  The first two are surfaced in the
    CLI configuration.
    """

    cdf_target_err: float = 1e-4
    quad_tol: float = 1e-4
    moment_rel_tol: float = 2e-3
    n_scrambles: int = 8
    base_nodes: int = 128
    max_nodes: int = 1 << 13
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.cdf_target_err <= 0.1):
            raise DomainError("cdf_target_err must lie in (0, 0.1]")
        if not (0.0 < self.quad_tol <= 0.1):
            raise DomainError("quad_tol must lie in (0, 0.1]")


@dataclass
class EStepMoments:
    """Posterior latent-variable expectations for one (observation, component)."""

    e1: float
    e2: np.ndarray
    e3: np.ndarray
    e4: float
    z_hat: float | None = None
    degenerate: bool = False


@dataclass
class OracleMoments:
    """Monte Carlo moment estimates with jackknife standard errors."""

    e1: float
    e2: np.ndarray
    e3: np.ndarray
    e4: float
    se_e1: float
    se_e2: np.ndarray
    se_e3: np.ndarray
    se_e4: float
    ess: int


@dataclass
class MomentBlock:
    """Batched ``e1 .. e4`` values with QMC error estimates."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray
    degenerate: np.ndarray
    se_e1: np.ndarray
    se_e2: np.ndarray
    se_e3: np.ndarray


def _symmetric_closed_forms(nu: float, p: int, d: np.ndarray):
    """Exact moments when the skewness vanishes (also the degenerate fallback)."""
    a = 0.5 * (nu + p)
    b = 0.5 * (nu + d)
    e1 = a / b
    half_mom = math.exp(gammaln(a + 0.5) - gammaln(a))
    e2 = math.sqrt(2.0) * half_mom / np.sqrt(2.0 * b)
    e3_mat = (1.0 - 2.0 / math.pi) * np.eye(p) + (2.0 / math.pi) * np.ones((p, p))
    e4 = _psi(a) - np.log(b)
    return e1, e2, e3_mat, e4


class SdbEstep:
    """Shared E-step state for one component over a batch of observations.

    Splits the work in two passes so a fit engine can decide per
    observation whether the (more expensive) truncated moments are needed:
    :meth:`density_pass` yields the orthant probability (hence the log
    density) and ``e4``; :meth:`moment_pass` yields ``e1, e2, e3`` for a
    subset.
    """

    def __init__(self, pts: np.ndarray, params: SdbComponentParams, cfg: MomentConfig):
        self.pts = np.atleast_2d(np.asarray(pts, dtype=float))
        self.params = params
        self.cfg = cfg
        self.p = params.p
        self.nu = params.nu
        self.symmetric = bool(np.all(params.delta == 0.0))
        self.d, self.m = _sdb_geometry(params, self.pts)
        self.log_t = (
            _mvt_log_norm(self.p, self.nu, params.fc.log_det)
            - 0.5 * (self.nu + self.p) * np.log1p(self.d / self.nu)
        )
        self.prob0: np.ndarray | None = None
        self._prob0_se_arr: np.ndarray | None = None
        self._e4: np.ndarray | float | None = None

    def density_pass(self, cdf_target: float | None = None, want_e4: bool = True):
        """Orthant probability (df nu+p) and the e4 residual expectation.

        Returns ``(log_density, degenerate_flags)``; caches ``prob0`` for
        the e1 ratio.
        """
        nu, p = self.nu, self.p
        n = self.pts.shape[0]
        target = self.cfg.cdf_target_err if cdf_target is None else cdf_target
        if self.symmetric:
            self.prob0 = np.full(n, 2.0**-p)
            self._prob0_se_arr = np.zeros(n)
            if want_e4:
                _, _, _, e4 = _symmetric_closed_forms(nu, p, self.d)
                self._e4 = e4
            return self.log_t, np.zeros(n, dtype=bool)
        res = _mvtqmc.truncated_t_orthant(
            self.m,
            self.params.skew_scale,
            (nu + self.d) / (nu + p),
            nu + p,
            target_se=target,
            seed=self.cfg.seed,
            want=_mvtqmc.WANT_LOGQ if want_e4 else _mvtqmc.WANT_CDF,
            kappa=nu + self.d,
            ratio_target=self.cfg.quad_tol if want_e4 else None,
            n_scrambles=self.cfg.n_scrambles,
            base_nodes=self.cfg.base_nodes,
            max_nodes=self.cfg.max_nodes,
        )
        self.prob0 = res.prob
        self._prob0_se_arr = res.prob_se
        flags = res.prob < DEGENERATE_PROB
        if want_e4:
            e4 = _psi(0.5 * nu + p) + math.log(2.0) - res.elogq
            if np.any(flags):
                _, _, _, e4_fallback = _symmetric_closed_forms(nu, p, self.d)
                e4 = np.where(flags, e4_fallback, e4)
            self._e4 = e4
        logpdf = (
            p * math.log(2.0)
            + self.log_t
            + np.log(np.maximum(self.prob0, CDF_FLOOR))
        )
        return logpdf, flags

    def _take_e4(self, idx: np.ndarray) -> np.ndarray:
        if self._e4 is None:
            return np.full(idx.size, np.nan)
        arr = np.asarray(self._e4, dtype=float)
        return arr[idx] if arr.ndim else np.full(idx.size, float(arr))

    def e4_pass(
        self,
        subset: np.ndarray | None = None,
        ratio_target=None,
    ) -> np.ndarray:
        """``e4 = E[log W | x]`` for the chosen observations.

        Runs the df ``nu+p`` pass with the log-quadform accumulator only;
        useful when the density pass skipped ``e4`` to stay cheap.
        ``ratio_target`` may relax individual observations (engine use).
        """
        nu, p = self.nu, self.p
        n = self.pts.shape[0]
        idx = np.arange(n) if subset is None else np.asarray(subset)
        full = np.full(n, np.nan)
        if self.symmetric:
            _, _, _, e4 = _symmetric_closed_forms(nu, p, self.d)
            full[:] = e4
            self._e4 = full
            return full[idx]
        d = self.d[idx]
        res = _mvtqmc.truncated_t_orthant(
            self.m[idx],
            self.params.skew_scale,
            (nu + d) / (nu + p),
            nu + p,
            target_se=self.cfg.quad_tol,
            seed=self.cfg.seed,
            want=_mvtqmc.WANT_LOGQ,
            kappa=nu + d,
            ratio_target=self.cfg.quad_tol if ratio_target is None else ratio_target,
            n_scrambles=self.cfg.n_scrambles,
            base_nodes=self.cfg.base_nodes,
            max_nodes=self.cfg.max_nodes,
        )
        vals = _psi(0.5 * nu + p) + math.log(2.0) - res.elogq
        bad = res.prob < DEGENERATE_PROB
        if np.any(bad):
            _, _, _, fallback = _symmetric_closed_forms(nu, p, d)
            vals = np.where(bad, fallback, vals)
        full[idx] = vals
        self._e4 = full
        return vals

    def moment_pass(
        self,
        subset: np.ndarray | None = None,
        ratio_target=None,
    ) -> MomentBlock:
        """``e1, e2, e3`` (plus cached ``e4``) for the chosen observations."""
        if self.prob0 is None:
            raise RuntimeError("density_pass must run before moment_pass")
        nu, p = self.nu, self.p
        idx = np.arange(self.pts.shape[0]) if subset is None else np.asarray(subset)
        d = self.d[idx]
        if self.symmetric:
            e1, e2s, e3_mat, _ = _symmetric_closed_forms(nu, p, d)
            e1 = np.asarray(e1, dtype=float).copy()
            e2 = np.repeat(e2s[:, None], p, axis=1)
            e3 = np.broadcast_to(e3_mat, (idx.size, p, p)).copy()
            zeros = np.zeros(idx.size)
            return MomentBlock(
                e1, e2, e3, self._take_e4(idx),
                np.zeros(idx.size, dtype=bool),
                zeros, np.zeros((idx.size, p)), np.zeros((idx.size, p, p)),
            )
        res = _mvtqmc.truncated_t_orthant(
            self.m[idx],
            self.params.skew_scale,
            (nu + d) / (nu + p + 2.0),
            nu + p + 2.0,
            target_se=self.cfg.quad_tol,
            seed=self.cfg.seed,
            want=_mvtqmc.WANT_MOMENTS,
            kappa=nu + d,
            ratio_target=(
                self.cfg.moment_rel_tol if ratio_target is None else ratio_target
            ),
            n_scrambles=self.cfg.n_scrambles,
            base_nodes=self.cfg.base_nodes,
            max_nodes=self.cfg.max_nodes,
        )
        prob0 = self.prob0[idx]
        degenerate = (prob0 < DEGENERATE_PROB) | (res.prob < DEGENERATE_PROB)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = (nu + p) / (nu + d)
            e1 = scale * res.prob / prob0
            se_e1 = np.abs(e1) * np.sqrt(
                (res.prob_se / res.prob) ** 2 + (self._prob0_se(idx) / prob0) ** 2
            )
            e2 = np.maximum(e1[:, None] * res.mean, 0.0)
            se_e2 = (
                np.abs(e1[:, None]) * res.mean_se
                + np.abs(res.mean) * se_e1[:, None]
            )
            e3 = e1[:, None, None] * res.ex2
            se_e3 = (
                np.abs(e1[:, None, None]) * res.ex2_se
                + np.abs(res.ex2) * se_e1[:, None, None]
            )
        e3 = 0.5 * (e3 + np.swapaxes(e3, 1, 2))
        e4 = self._take_e4(idx)
        if np.any(degenerate):
            f_e1, f_e2, f_e3, f_e4 = _symmetric_closed_forms(nu, p, d)
            bad = degenerate
            e1 = np.where(bad, f_e1, e1)
            e2 = np.where(bad[:, None], f_e2[:, None], e2)
            e3 = np.where(bad[:, None, None], f_e3, e3)
            e4 = np.where(bad, f_e4, e4)
        return MomentBlock(e1, e2, e3, e4, degenerate, se_e1, se_e2, se_e3)

    def _prob0_se(self, idx: np.ndarray) -> np.ndarray:
        if self._prob0_se_arr is None:
            return np.zeros(idx.size)
        return self._prob0_se_arr[idx]


def sdb_moments(
    x, params: SdbComponentParams, cfg: MomentConfig | None = None
) -> EStepMoments:
    """Analytic posterior moments ``e1 .. e4`` for a single observation.

    The returned ``z_hat`` is unset: responsibilities require the whole
    mixture and are computed by the fit engine.
    """
    cfg = cfg or MomentConfig()
    x = np.asarray(x, dtype=float).ravel()
    if x.size != params.p:
        raise DomainError("dimension mismatch between x and params")
    step = SdbEstep(x[None, :], params, cfg)
    step.density_pass(cdf_target=cfg.cdf_target_err, want_e4=True)
    blk = step.moment_pass()
    return EStepMoments(
        e1=float(blk.e1[0]),
        e2=blk.e2[0],
        e3=blk.e3[0],
        e4=float(blk.e4[0]),
        degenerate=bool(blk.degenerate[0]),
    )


def mc_oracle_moments(
    x,
    params: SdbComponentParams,
    n_draws: int = 10**6,
    rng_seed: int = 0,
) -> OracleMoments:
    """Unbiased Monte Carlo estimates of ``e1 .. e4`` with jackknife errors.

    Proposes ``w ~ Gamma(a, b)`` and an *untruncated* conditional normal
    for ``v``; keeping only proposals with ``v > 0`` yields exact draws
    from the joint posterior, so plain averages of the accepted draws are
    unbiased.  ``n_draws`` is the proposal budget; the effective sample
    size is the accepted count.
    """
    if n_draws < 10**3:
        raise DomainError("n_draws must be at least 1000")
    x = np.asarray(x, dtype=float).ravel()
    p, nu = params.p, params.nu
    d, m = _sdb_geometry(params, x[None, :])
    d, m = float(d[0]), m[0]
    gamma_chol = np.linalg.cholesky(params.skew_scale)
    a, b = 0.5 * (nu + p), 0.5 * (nu + d)

    rng = np.random.default_rng(rng_seed)
    ws, vs = [], []
    remaining = n_draws
    chunk = min(1 << 19, n_draws)
    while remaining > 0:
        k = min(chunk, remaining)
        remaining -= k
        w = rng.gamma(shape=a, scale=1.0 / b, size=k)
        v = m + (rng.standard_normal((k, p)) @ gamma_chol.T) / np.sqrt(w)[:, None]
        keep = (v > 0.0).all(axis=1)
        if np.any(keep):
            ws.append(w[keep])
            vs.append(v[keep])
    if not ws:
        raise UnreliableEstimateError("no posterior draws accepted")
    w = np.concatenate(ws)
    v = np.concatenate(vs)
    ess = w.size
    if ess < 50:
        raise UnreliableEstimateError(
            f"effective sample size {ess} < 50; increase n_draws"
        )

    wv = w[:, None] * v
    wvv = w[:, None, None] * (v[:, :, None] * v[:, None, :])
    logw = np.log(w)

    def jack(stat: np.ndarray):
        """Leave-one-block-out jackknife mean and standard error."""
        n_blocks = min(100, ess)
        blocks = np.array_split(stat, n_blocks, axis=0)
        means = np.stack([blk.mean(axis=0) for blk in blocks])
        sizes = np.array([len(blk) for blk in blocks], dtype=float)
        total = stat.mean(axis=0)
        loo = (ess * total - (sizes * means.T).T) / (ess - sizes)[:, None] \
            if stat.ndim > 1 else (ess * total - sizes * means) / (ess - sizes)
        est = float(np.mean(loo)) if stat.ndim == 1 else loo.mean(axis=0)
        dev = loo - est
        var = (n_blocks - 1) / n_blocks * np.sum(dev * dev, axis=0) \
            if stat.ndim > 1 else (n_blocks - 1) / n_blocks * float(np.sum(dev * dev))
        return total, np.sqrt(var)

    e1, se1 = jack(w)
    e2, se2 = jack(wv)
    e3_flat, se3_flat = jack(wvv.reshape(ess, -1))
    e4, se4 = jack(logw)
    return OracleMoments(
        e1=float(e1),
        e2=e2,
        e3=e3_flat.reshape(p, p),
        e4=float(e4),
        se_e1=float(se1),
        se_e2=se2,
        se_e3=se3_flat.reshape(p, p),
        se_e4=float(se4),
        ess=int(ess),
    )


def gh_moments(x, params: GhSkewTParams) -> tuple[float, float, float]:
    """``(E[Y|x], E[1/Y|x], E[log Y|x])`` for the GH-family skew t.

    The mixing variable given the data is GIG with
    ``psi = alpha' Sigma^{-1} alpha``, ``chi = nu + d(x, mu | Sigma)`` and
    index ``-(nu+p)/2``; the closed forms delegate to
    :func:`skewtfa.special.gig_moments`.
    """
    if params.is_symmetric:
        raise DomainError("gh_moments requires a nonzero skewness vector")
    x = np.asarray(x, dtype=float).ravel()
    if x.size != params.p:
        raise DomainError("dimension mismatch between x and params")
    r = x - params.mu
    z = np.linalg.solve(params._chol, r)
    d = float(z @ z)
    gig = GigParams(
        psi=params.alpha_quad,
        chi=params.nu + d,
        lam=-0.5 * (params.nu + params.p),
    )
    return gig_moments(gig)
