"""Alternating ECM fitting of the skew-t and GH-family factor mixtures.

Each iteration runs two conditional-maximization stages.  Stage one treats
the labels and the scale/skew latents as missing and updates the mixing
proportions, locations, skewness and degrees of freedom; stage two also
treats the factors as missing, refreshes the conditional expectations at
the stage-one parameters, and updates the loadings and noise under the
chosen tying pattern.  Every sub-update is an exact conditional maximizer
of the corresponding expected complete-data log-likelihood, which is what
makes the log-likelihood trace monotone.

Internally the skew components are parameterized by the *conditional*
factor scale ``C = Lambda Lambda' + Psi_c`` of the latent hierarchy; the
public component parameters carry the marginal factor form with
``psi = Psi_c + delta^2``, so density, sampler and moment machinery all
describe the same law.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import digamma as _digamma
from scipy.special import logsumexp

from .covariance import CovarianceStructure, FactorCovariance, constrained_update
from .distributions import GhSkewTParams, SdbComponentParams, gh_logpdf_batch
from .errors import DomainError, FitFailure, NumericError
from .moments import MomentConfig, SdbEstep
from .special import gig_moments_vec, solve_nu

__all__ = [
    "FitConfig",
    "MixtureModel",
    "FitResult",
    "EStepResult",
    "log_likelihood",
    "e_step",
    "cm_step_1",
    "cm_step_2",
    "initialize",
    "fit",
]


class _RestartSignal(Exception):
    """A component collapsed; the surrounding start should re-initialize."""


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the fitting loop.

    ``nu_update`` chooses between responsibility-weighted within-component
    means for the df update (default) and the literal pooled average over
    all observations.  ``resp_threshold`` skips the truncated-moment
    integrals for (observation, component) pairs whose responsibility is
    too small to influence any weighted sum.
    """

    max_iter: int = 500
    tol: float = 1e-5
    convergence: str = "aitken"  # or "relative"
    init: str = "kmeans"  # "random-soft" or "given"
    n_starts: int = 1
    seed: int = 0
    moments: MomentConfig = field(default_factory=MomentConfig)
    nu_update: str = "weighted"  # or "pooled"
    nu_bracket: tuple[float, float] = (2.0001, 200.0)
    resp_threshold: float = 1e-10
    restart_attempts: int = 3
    debug: bool = False

    def __post_init__(self) -> None:
        if self.tol <= 0.0:
            raise DomainError("tol must be positive")
        if self.n_starts < 1:
            raise DomainError("n_starts must be >= 1")
        if self.convergence not in ("aitken", "relative"):
            raise DomainError(f"unknown convergence rule {self.convergence!r}")
        if self.init not in ("kmeans", "random-soft", "given"):
            raise DomainError(f"unknown init mode {self.init!r}")
        if self.nu_update not in ("weighted", "pooled"):
            raise DomainError(f"unknown nu update style {self.nu_update!r}")


@dataclass(frozen=True)
class MixtureModel:
    """A finite mixture in the public parameterization."""

    family: str  # "sdb" or "gh"
    structure: CovarianceStructure
    pi: np.ndarray
    components: tuple

    def __post_init__(self) -> None:
        if self.family not in ("sdb", "gh"):
            raise DomainError(f"unknown family {self.family!r}")
        pi = np.asarray(self.pi, dtype=float).ravel()
        if pi.size != len(self.components) or pi.size == 0:
            raise DomainError("pi must have one entry per component")
        if np.any(pi <= 0.0) or abs(pi.sum() - 1.0) > 1e-10:
            raise DomainError("pi must be strictly positive and sum to one")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def G(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return self.components[0].p

    @property
    def q(self) -> int:
        c = self.components[0]
        if isinstance(c, SdbComponentParams):
            return c.q
        if c.scale is not None:
            return c.scale.q
        raise DomainError("GH components without factor scale have no q")


@dataclass
class FitResult:
    """Converged model with its diagnostics."""

    model: MixtureModel
    loglik_trace: np.ndarray
    z: np.ndarray
    map_labels: np.ndarray
    iterations: int
    converged: bool
    flags: list[str]

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


@dataclass
class EStepResult:
    """Responsibilities and latent expectations for a whole batch.

    For the skew family ``e1 .. e4`` are the scale/skew latent moments
    (``e2``: (n, G, p), ``e3``: (n, G, p, p)); entries skipped by the
    responsibility threshold are NaN.  For the GH family ``e1`` holds
    ``E[1/Y]``, ``e4`` holds ``E[log Y]`` and ``gh_a`` holds ``E[Y]``.
    """

    z: np.ndarray
    e1: np.ndarray
    e2: np.ndarray | None
    e3: np.ndarray | None
    e4: np.ndarray
    loglik: float
    degenerate_rows: np.ndarray
    log_dens: np.ndarray
    gh_a: np.ndarray | None = None

    def moments(self, i: int, g: int):
        """Per-pair view, mirroring the single-observation API."""
        from .moments import EStepMoments

        return EStepMoments(
            e1=float(self.e1[i, g]),
            e2=None if self.e2 is None else self.e2[i, g],
            e3=None if self.e3 is None else self.e3[i, g],
            e4=float(self.e4[i, g]),
            z_hat=float(self.z[i, g]),
        )


# --------------------------------------------------------------------------
# Internal engine state
# --------------------------------------------------------------------------


@dataclass
class _State:
    """Engine parameters; ``psi`` is the conditional noise for ``sdb``."""

    family: str
    pi: np.ndarray  # (G,)
    mu: np.ndarray  # (G, p)
    skew: np.ndarray  # (G, p): delta (sdb) or alpha (gh)
    lam: np.ndarray  # (G, p, q)
    psi: np.ndarray  # (G, p)
    nu: np.ndarray  # (G,)

    @property
    def G(self) -> int:
        return self.pi.size

    def component(self, g: int):
        if self.family == "sdb":
            return SdbComponentParams(
                mu=self.mu[g],
                delta=self.skew[g],
                lam=self.lam[g],
                psi=self.psi[g] + self.skew[g] ** 2,
                nu=float(self.nu[g]),
            )
        fc = FactorCovariance(self.lam[g], self.psi[g])
        return GhSkewTParams(
            mu=self.mu[g], sigma=None, alpha=self.skew[g],
            nu=float(self.nu[g]), scale=fc,
        )

    def components(self) -> list:
        return [self.component(g) for g in range(self.G)]

    def to_model(self, structure: CovarianceStructure) -> MixtureModel:
        return MixtureModel(
            self.family, structure, self.pi.copy(), tuple(self.components())
        )

    def cond_fc(self, g: int) -> FactorCovariance:
        return FactorCovariance(self.lam[g], self.psi[g])


def _state_from_model(model: MixtureModel) -> _State:
    comps = model.components
    G, p = model.G, model.p
    lam_list, psi_list, skew_list = [], [], []
    for c in comps:
        if model.family == "sdb":
            skew_list.append(c.delta)
            lam_list.append(c.lam)
            psi_c = c.psi - c.delta**2
            if np.any(psi_c <= 0.0):
                # Xi is PD but its diagonal split is not; floor the
                # conditional noise (only reachable from hand-built models).
                psi_c = np.maximum(psi_c, 1e-8)
            psi_list.append(psi_c)
        else:
            if c.scale is None:
                raise DomainError(
                    "GH components need a factor-form scale to drive the engine"
                )
            skew_list.append(c.alpha)
            lam_list.append(c.scale.lam)
            psi_list.append(c.scale.psi)
    q = lam_list[0].shape[1]
    return _State(
        family=model.family,
        pi=model.pi.copy(),
        mu=np.stack([c.mu for c in comps]),
        skew=np.stack(skew_list),
        lam=np.stack(lam_list).reshape(G, p, q),
        psi=np.stack(psi_list),
        nu=np.array([c.nu for c in comps], dtype=float),
    )


# --------------------------------------------------------------------------
# E-step
# --------------------------------------------------------------------------


def _responsibilities(log_dens: np.ndarray, pi: np.ndarray):
    weighted = log_dens + np.log(pi)[None, :]
    norms = logsumexp(weighted, axis=1)
    bad = ~np.isfinite(norms)
    if np.any(bad):
        norms = np.where(bad, 0.0, norms)
    z = np.exp(weighted - norms[:, None])
    if np.any(bad):
        z[bad] = 1.0 / pi.size
    return z, float(norms.sum()), bad


def _estep_sdb(
    X: np.ndarray,
    pi: np.ndarray,
    comps: list[SdbComponentParams],
    cfg: FitConfig,
    *,
    cdf_target: float | None,
    want_e4: bool,
    want_moments: bool = True,
) -> EStepResult:
    n, p = X.shape
    G = len(comps)
    steps = []
    log_dens = np.empty((n, G))
    for g, params in enumerate(comps):
        step = SdbEstep(X, params, cfg.moments)
        lp, _ = step.density_pass(cdf_target=cdf_target, want_e4=False)
        log_dens[:, g] = lp
        steps.append(step)
    z, loglik, degenerate_rows = _responsibilities(log_dens, pi)

    e1 = np.full((n, G), np.nan)
    e2 = np.full((n, G, p), np.nan)
    e3 = np.full((n, G, p, p), np.nan)
    e4 = np.full((n, G), np.nan)
    if want_moments:
        threshold = 0.0 if cfg.nu_update == "pooled" else cfg.resp_threshold
        for g in range(G):
            subset = (
                np.flatnonzero(z[:, g] > threshold)
                if threshold > 0.0
                else np.arange(n)
            )
            if subset.size == 0:
                continue
            # A pair's error budget scales inversely with the weight its
            # moments carry in the responsibility-weighted CM sums, and the
            # averaging over the group buys a further (capped) sqrt factor.
            n_g = max(z[:, g].sum(), 1.0)
            relax = min(8.0, np.sqrt(n_g)) * (n_g / n)
            base = cfg.moments.moment_rel_tol
            with np.errstate(divide="ignore"):
                inv_weight = relax / z[subset, g]
            per_obs = np.minimum(0.25, np.maximum(base, base * inv_weight))
            if want_e4:
                e4_target = np.minimum(
                    0.25,
                    np.maximum(
                        cfg.moments.quad_tol, cfg.moments.quad_tol * inv_weight
                    ),
                )
                e4[subset, g] = steps[g].e4_pass(subset, ratio_target=e4_target)
            blk = steps[g].moment_pass(subset, ratio_target=per_obs)
            e1[subset, g] = blk.e1
            e2[subset, g] = blk.e2
            e3[subset, g] = blk.e3
            if cfg.debug:
                _debug_check_moments(blk)
    return EStepResult(z, e1, e2, e3, e4, loglik, degenerate_rows, log_dens)


def _estep_gh(
    X: np.ndarray, pi: np.ndarray, comps: list[GhSkewTParams], cfg: FitConfig
) -> EStepResult:
    n, p = X.shape
    G = len(comps)
    log_dens = np.empty((n, G))
    a = np.empty((n, G))
    b = np.empty((n, G))
    c = np.empty((n, G))
    for g, params in enumerate(comps):
        log_dens[:, g] = gh_logpdf_batch(X, params)
        r = X - params.mu
        zw = np.linalg.solve(params._chol, r.T)
        d = np.einsum("ij,ij->j", zw, zw)
        chi = params.nu + d
        aq = 0.0 if params.is_symmetric else params.alpha_quad
        if aq < 1e-10:
            # Symmetric conditional: inverse gamma with closed moments.
            half = 0.5 * (params.nu + p)
            b[:, g] = (params.nu + p) / chi
            a[:, g] = chi / max(params.nu + p - 2.0, 1e-8)
            c[:, g] = np.log(0.5 * chi) - _digamma(half)
        else:
            ag, bg, cg = gig_moments_vec(aq, chi, -0.5 * (params.nu + p))
            a[:, g], b[:, g], c[:, g] = ag, bg, cg
    z, loglik, degenerate_rows = _responsibilities(log_dens, pi)
    return EStepResult(
        z, b, None, None, c, loglik, degenerate_rows, log_dens, gh_a=a
    )


def _debug_check_moments(blk) -> None:
    assert np.all(blk.e1 > 0.0), "e1 must be positive"
    assert np.all(blk.e2 >= -1e-12), "e2 must be nonnegative"
    for mat in blk.e3:
        assert np.all(np.linalg.eigvalsh(mat) > -1e-8), "e3 must be PSD"


def e_step(data, model: MixtureModel, cfg: FitConfig | None = None) -> EStepResult:
    """Responsibilities and latent moments for every (observation, component).

    Observations for which every component underflows get a uniform
    responsibility row and appear in ``degenerate_rows``.
    """
    cfg = cfg or FitConfig()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    full = replace(cfg, resp_threshold=0.0)
    if model.family == "sdb":
        return _estep_sdb(
            X, model.pi, list(model.components), full,
            cdf_target=cfg.moments.cdf_target_err, want_e4=True,
        )
    return _estep_gh(X, model.pi, list(model.components), full)


def log_likelihood(data, model: MixtureModel, cfg: FitConfig | None = None) -> float:
    """Observed-data log-likelihood, stabilized by log-sum-exp."""
    cfg = cfg or FitConfig()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    if model.family == "sdb":
        res = _estep_sdb(
            X, model.pi, list(model.components), cfg,
            cdf_target=cfg.moments.cdf_target_err,
            want_e4=False, want_moments=False,
        )
    else:
        res = _estep_gh(X, model.pi, list(model.components), cfg)
    return res.loglik


# --------------------------------------------------------------------------
# CM stages
# --------------------------------------------------------------------------


def _scatter_sdb(X, z_g, e1_g, e2_g, e3_g, mu, delta):
    """The four-term conditional scatter, responsibility-weighted."""
    n_g = z_g.sum()
    r = X - mu
    de2 = e2_g * delta
    s = np.einsum("i,ij,ik->jk", z_g * e1_g, r, r)
    cross = np.einsum("i,ij,ik->jk", z_g, r, de2)
    s -= cross + cross.T
    s += np.outer(delta, delta) * np.einsum("i,ijk->jk", z_g, e3_g)
    s /= n_g
    return 0.5 * (s + s.T)


def cm_step_1(
    data,
    moments: EStepResult,
    model_or_state,
    cfg: FitConfig | None = None,
):
    """First-stage updates: mixing weights, locations, skewness, df, scatter.

    Returns ``(pi, mu, delta, nu, s_list, flags)``.  Location and skewness
    are updated at their joint stationary point (their two coupled
    equations are linear given the moments); all group sums are
    responsibility-weighted.
    """
    cfg = cfg or FitConfig()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    state = (
        model_or_state
        if isinstance(model_or_state, _State)
        else _state_from_model(model_or_state)
    )
    if state.family != "sdb":
        raise DomainError("cm_step_1 applies to the sdb family")
    n, p = X.shape
    G = state.G
    q = state.lam.shape[2]
    z = moments.z
    flags: list[str] = []

    pi = z.sum(axis=0) / n
    mu = np.empty((G, p))
    delta = np.empty((G, p))
    nu = np.empty(G)
    s_list = []
    for g in range(G):
        z_g = z[:, g]
        n_g = z_g.sum()
        if n_g < q + 1:
            raise _RestartSignal(f"component {g} collapsed (size {n_g:.2f})")
        sel = np.isfinite(moments.e1[:, g])
        zs = z_g[sel]
        e1 = moments.e1[sel, g]
        e2 = moments.e2[sel, g]
        e3 = moments.e3[sel, g]
        Xs = X[sel]

        # The location and skewness stationarity conditions are jointly
        # linear; substituting the location equation into the skewness one
        # leaves a single p x p system, i.e. the exact maximizer of the
        # (mu, delta) block rather than one lagged alternation sweep.
        fc = state.cond_fc(g)
        cinv = fc.solve(np.eye(p))
        w1 = zs * e1
        sw1 = w1.sum()
        xbar_w = w1 @ Xs / sw1
        e2_sum = zs @ e2
        g_vec = e2_sum / sw1
        e3_sum = np.einsum("i,ijk->jk", zs, e3)
        ci_x = fc.solve((Xs - xbar_w).T)  # (p, n_sel)
        rhs = (ci_x * (zs * e2.T)).sum(axis=1)
        hmat = cinv * e3_sum - (e2_sum[:, None] * cinv) * g_vec[None, :]
        try:
            delta_g = np.linalg.solve(hmat, rhs)
        except np.linalg.LinAlgError:
            ridge = 1e-8 * float(np.mean(np.diag(hmat))) + 1e-300
            delta_g = np.linalg.solve(hmat + ridge * np.eye(p), rhs)
            flags.append(f"ridge-regularized skewness solve for component {g}")
        mu_g = xbar_w - g_vec * delta_g

        if cfg.nu_update == "pooled":
            ok = np.isfinite(moments.e1[:, g]) & np.isfinite(moments.e4[:, g])
            s_nu = float(np.mean(moments.e1[ok, g] - moments.e4[ok, g]))
        else:
            e4 = moments.e4[sel, g]
            ok = np.isfinite(e4)
            s_nu = float((zs[ok] * (e1[ok] - e4[ok])).sum() / zs[ok].sum())
        nu_g = solve_nu(s_nu, *cfg.nu_bracket)

        mu[g], delta[g], nu[g] = mu_g, delta_g, nu_g
        s_list.append(_scatter_sdb(Xs, zs, e1, e2, e3, mu_g, delta_g))
    return pi, mu, delta, nu, s_list, flags


def cm_step_2(
    s_list,
    model_or_state,
    cfg: FitConfig | None = None,
    *,
    structure: CovarianceStructure | None = None,
    weights=None,
    psi_floor: float = 1e-10,
):
    """Second-stage loading/noise update under the tying pattern.

    ``s_list`` holds the per-group scatter matrices and ``weights`` their
    effective sizes (default equal).  Returns the updated factor
    covariances in the conditional parameterization.
    """
    state = (
        model_or_state
        if isinstance(model_or_state, _State)
        else _state_from_model(model_or_state)
    )
    structure = structure or CovarianceStructure("UUU")
    G = len(s_list)
    if weights is None:
        weights = [1.0] * G
    current = [state.cond_fc(g) for g in range(G)]
    return constrained_update(
        structure, current, list(zip(s_list, weights)), psi_floor=psi_floor
    )


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def _group_init(X, resp, q, family) -> _State:
    """Moment-based component parameters from soft responsibilities."""
    n, p = X.shape
    G = resp.shape[1]
    pi = resp.sum(axis=0) / n
    mu = np.empty((G, p))
    skew = np.empty((G, p))
    lam = np.empty((G, p, q))
    psi = np.empty((G, p))
    nu = np.full(G, 50.0)
    for g in range(G):
        w = resp[:, g]
        w_sum = w.sum()
        if w_sum < q + 1:
            raise _RestartSignal(f"initial component {g} too small")
        m = w @ X / w_sum
        r = X - m
        cov = (r * w[:, None]).T @ r / w_sum
        cov += 1e-8 * max(np.trace(cov) / p, 1e-8) * np.eye(p)
        evals, evecs = np.linalg.eigh(cov)
        top = evals[::-1][:q]
        vecs = evecs[:, ::-1][:, :q]
        lam[g] = vecs * np.sqrt(np.maximum(top - float(evals.mean()), 1e-4))
        psi[g] = np.maximum(
            np.diag(cov) - np.einsum("ij,ij->i", lam[g], lam[g]), 1e-4
        )
        third = w @ (r**3) / w_sum
        scale = 0.5 if family == "sdb" else 0.25
        skew[g] = np.sign(third) * scale * np.sqrt(np.diag(cov))
        mu[g] = m
    return _State(family, pi, mu, skew, lam, psi, nu)


def _initialize_state(X, family, G, q, rng, mode) -> _State:
    n, p = X.shape
    if mode == "kmeans":
        try:
            seed_int = int(rng.integers(0, 2**31 - 1))
            _, labels = kmeans2(X, G, minit="++", seed=seed_int, iter=20)
            if np.unique(labels).size < G:
                raise ValueError("empty kmeans cluster")
            resp = np.zeros((n, G))
            resp[np.arange(n), labels] = 1.0
        except (ValueError, np.linalg.LinAlgError):
            return _initialize_state(X, family, G, q, rng, mode="random-soft")
    elif mode == "random-soft":
        resp = 1.0 + 0.5 * rng.uniform(-1.0, 1.0, size=(n, G))
        resp /= resp.sum(axis=1, keepdims=True)
    else:
        raise DomainError(f"unknown init mode {mode!r}")
    return _group_init(X, resp, q, family)


def initialize(
    data,
    G: int,
    q: int,
    cfg: FitConfig | None = None,
    *,
    family: str = "sdb",
    structure: CovarianceStructure | str = "UUU",
) -> MixtureModel:
    """Deterministic starting model (k-means or perturbed responsibilities)."""
    cfg = cfg or FitConfig()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    if isinstance(structure, str):
        structure = CovarianceStructure(structure)
    if cfg.init == "given":
        raise DomainError("init='given' needs no initialization; pass the model")
    rng = np.random.default_rng(cfg.seed)
    state = _initialize_state(X, family, G, q, rng, cfg.init)
    return state.to_model(structure)


# --------------------------------------------------------------------------
# Convergence and single-start loops
# --------------------------------------------------------------------------


def _converged(trace: list[float], cfg: FitConfig) -> bool:
    if len(trace) < 3:
        return False
    l0, l1, l2 = trace[-3], trace[-2], trace[-1]
    d1, d2 = l1 - l0, l2 - l1
    if cfg.convergence == "relative":
        return abs(d2) < cfg.tol * (1.0 + abs(l1))
    if abs(d2) < 1e-13 * (1.0 + abs(l2)):
        return True
    if d1 <= 0.0 or d2 <= 0.0:
        return abs(d2) < cfg.tol
    a = d2 / d1
    if a >= 1.0:
        return False
    l_inf = l1 + d2 / (1.0 - a)
    return 0.0 <= l_inf - l2 < cfg.tol


def _fit_once_sdb(X, structure, state: _State, cfg: FitConfig, psi_floor):
    q = state.lam.shape[2]
    trace: list[float] = []
    flags: list[str] = []
    converged = False
    iterations = 0
    z = None
    for it in range(cfg.max_iter):
        es1 = _estep_sdb(
            X, state.pi, state.components(), cfg,
            cdf_target=cfg.moments.cdf_target_err, want_e4=True,
        )
        trace.append(es1.loglik)
        z = es1.z
        if np.any(es1.degenerate_rows):
            flags.append(
                f"iteration {it}: {int(es1.degenerate_rows.sum())} degenerate rows"
            )
        if _converged(trace, cfg):
            converged = True
            break

        pi, mu, delta, nu, _, step_flags = cm_step_1(X, es1, state, cfg)
        flags.extend(step_flags)
        state.pi, state.mu, state.skew, state.nu = pi, mu, delta, nu

        es2 = _estep_sdb(
            X, state.pi, state.components(), cfg,
            cdf_target=cfg.moments.quad_tol, want_e4=False,
        )
        s_list, n_list = [], []
        for g in range(state.G):
            n_g = es2.z[:, g].sum()
            if n_g < q + 1:
                raise _RestartSignal(f"component {g} collapsed in stage 2")
            sel = np.isfinite(es2.e1[:, g])
            s_list.append(
                _scatter_sdb(
                    X[sel], es2.z[sel, g], es2.e1[sel, g], es2.e2[sel, g],
                    es2.e3[sel, g], state.mu[g], state.skew[g],
                )
            )
            n_list.append(n_g)
        updated = cm_step_2(
            s_list, state, cfg, structure=structure, weights=n_list,
            psi_floor=psi_floor,
        )
        state.lam = np.stack([fc.lam for fc in updated])
        state.psi = np.stack([fc.psi for fc in updated])
        iterations = it + 1
    if not converged or z is None:
        final = _estep_sdb(
            X, state.pi, state.components(), cfg,
            cdf_target=cfg.moments.cdf_target_err,
            want_e4=False, want_moments=False,
        )
        trace.append(final.loglik)
        z = final.z
    return state, trace, z, iterations, converged, flags


def _fit_once_gh(X, structure, state: _State, cfg: FitConfig, psi_floor):
    n, p = X.shape
    q = state.lam.shape[2]
    trace: list[float] = []
    flags: list[str] = []
    converged = False
    iterations = 0
    z = None
    for it in range(cfg.max_iter):
        es = _estep_gh(X, state.pi, state.components(), cfg)
        trace.append(es.loglik)
        z = es.z
        if _converged(trace, cfg):
            converged = True
            break
        a, b, c = es.gh_a, es.e1, es.e4
        state.pi = es.z.sum(axis=0) / n
        for g in range(state.G):
            z_g = es.z[:, g]
            n_g = z_g.sum()
            if n_g < q + 1:
                raise _RestartSignal(f"component {g} collapsed (size {n_g:.2f})")
            a_bar = float(z_g @ a[:, g] / n_g)
            w = z_g * (1.0 - a_bar * b[:, g])
            denom = w.sum()
            if abs(denom) < 1e-12:
                raise _RestartSignal(f"singular location system in component {g}")
            mu_g = w @ X / denom
            alpha_g = (z_g @ X / n_g - mu_g) / a_bar
            s_nu = float(z_g @ (b[:, g] + c[:, g]) / n_g)
            state.mu[g] = mu_g
            state.skew[g] = alpha_g
            state.nu[g] = solve_nu(s_nu, *cfg.nu_bracket)

        es2 = _estep_gh(X, state.pi, state.components(), cfg)
        s_list, n_list = [], []
        for g in range(state.G):
            z_g = es2.z[:, g]
            n_g = z_g.sum()
            if n_g < q + 1:
                raise _RestartSignal(f"component {g} collapsed in stage 2")
            r = X - state.mu[g]
            alpha_g = state.skew[g]
            s = np.einsum("i,ij,ik->jk", z_g * es2.e1[:, g], r, r)
            ra = np.outer(z_g @ r, alpha_g)
            s -= ra + ra.T
            s += float(z_g @ es2.gh_a[:, g]) * np.outer(alpha_g, alpha_g)
            s /= n_g
            s_list.append(0.5 * (s + s.T))
            n_list.append(n_g)
        updated = cm_step_2(
            s_list, state, cfg, structure=structure, weights=n_list,
            psi_floor=psi_floor,
        )
        state.lam = np.stack([fc.lam for fc in updated])
        state.psi = np.stack([fc.psi for fc in updated])
        iterations = it + 1
    if not converged or z is None:
        final = _estep_gh(X, state.pi, state.components(), cfg)
        trace.append(final.loglik)
        z = final.z
    return state, trace, z, iterations, converged, flags


# --------------------------------------------------------------------------
# Multi-start driver
# --------------------------------------------------------------------------


def fit(
    data,
    family: str = "sdb",
    structure: CovarianceStructure | str = "UUU",
    G: int = 1,
    q: int = 1,
    cfg: FitConfig | None = None,
    given_model: MixtureModel | None = None,
) -> FitResult:
    """Fit a mixture by alternating ECM, best of ``cfg.n_starts`` starts.

    The first start uses ``cfg.init``; the remaining starts perturb
    responsibilities with child seeds.  Starts whose components collapse
    re-initialize up to ``cfg.restart_attempts`` times; when every start
    fails, :class:`FitFailure` carries the per-start reasons.
    """
    cfg = cfg or FitConfig()
    if isinstance(structure, str):
        structure = CovarianceStructure(structure)
    if family not in ("sdb", "gh"):
        raise DomainError(f"unknown family {family!r}")
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    n, p = X.shape
    if not (1 <= q < p):
        raise DomainError(f"need 1 <= q < p, got q={q}, p={p}")
    if n <= G * (q + 1):
        raise DomainError(f"need n > G*(q+1) observations, got n={n}")

    psi_floor = 1e-6 * float(np.median(np.var(X, axis=0)))
    engine = _fit_once_sdb if family == "sdb" else _fit_once_gh
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_starts)
    best: FitResult | None = None
    failures: list[str] = []
    for start, seed_seq in enumerate(seeds):
        rng = np.random.default_rng(seed_seq)
        mode = cfg.init if start == 0 else "random-soft"
        attempts = 0
        while True:
            try:
                if mode == "given":
                    if given_model is None:
                        raise DomainError("init='given' requires given_model")
                    state = _state_from_model(given_model)
                else:
                    state = _initialize_state(X, family, G, q, rng, mode)
                state, trace, z, iters, conv, flags = engine(
                    X, structure, state, cfg, psi_floor
                )
            except _RestartSignal as sig:
                attempts += 1
                if mode == "given" or attempts > cfg.restart_attempts:
                    failures.append(f"start {start}: {sig}")
                    break
                mode = "random-soft"
                continue
            except NumericError as exc:
                failures.append(f"start {start}: {exc}")
                break
            result = FitResult(
                model=state.to_model(structure),
                loglik_trace=np.asarray(trace),
                z=z,
                map_labels=np.argmax(z, axis=1),
                iterations=iters,
                converged=conv,
                flags=flags,
            )
            if best is None or result.loglik > best.loglik:
                best = result
            break
    if best is None:
        raise FitFailure("every start failed: " + "; ".join(failures))
    if failures:
        best.flags.extend(failures)
    return best
