"""Low-rank-plus-diagonal covariance structure and its parsimonious family.

The covariance of every mixture component has the factor-analytic form
``Sigma = Lambda @ Lambda.T + diag(psi)`` with ``q < p`` factors.  This
module provides Woodbury-form solves and log-determinants that never touch
a dense p-by-p inverse, the eight tying patterns (CCC ... UUU), exact free
parameter counts, and the constrained loading/noise updates used by the
second fitting stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, NumericError

__all__ = [
    "FactorCovariance",
    "CovarianceStructure",
    "STRUCTURE_IDS",
    "woodbury_solve",
    "log_det",
    "param_count",
    "constrained_update",
]

STRUCTURE_IDS = ("CCC", "CCU", "CUC", "CUU", "UCC", "UCU", "UUC", "UUU")


@dataclass(frozen=True)
class CovarianceStructure:
    """One of the eight tying patterns for the component scale matrices.

    The three letters constrain, in order: the loading matrix
    (``Lambda_g = Lambda``), the error variance (``Psi_g = Psi``) and
    isotropy (``Psi_g = psi_g * I``).  A leading ``C`` means constrained.
    """

    id: str

    def __post_init__(self) -> None:
        if self.id not in STRUCTURE_IDS:
            raise DomainError(f"unknown covariance structure {self.id!r}")

    @property
    def loading_tied(self) -> bool:
        return self.id[0] == "C"

    @property
    def error_tied(self) -> bool:
        return self.id[1] == "C"

    @property
    def isotropic(self) -> bool:
        return self.id[2] == "C"


@dataclass(frozen=True)
class FactorCovariance:
    """``Lambda @ Lambda.T + diag(psi)`` with cached Woodbury factorization.

    Immutable: any update constructs a new value, so cached quantities can
    never go stale and instances are safe to share across workers.
    """

    lam: np.ndarray  # (p, q) loadings
    psi: np.ndarray  # (p,) positive noise variances

    def __post_init__(self) -> None:
        lam = np.ascontiguousarray(np.atleast_2d(np.asarray(self.lam, dtype=float)))
        psi = np.ascontiguousarray(np.asarray(self.psi, dtype=float).ravel())
        if lam.ndim != 2:
            raise DomainError("loadings must be a p x q matrix")
        p, q = lam.shape
        if not q < p:
            raise DomainError(f"factor count must satisfy q < p, got q={q}, p={p}")
        if psi.shape != (p,):
            raise DomainError("psi must have one entry per coordinate")
        if np.any(~np.isfinite(lam)) or np.any(~np.isfinite(psi)):
            raise DomainError("non-finite covariance parameters")
        if np.any(psi <= 0.0):
            raise DomainError("psi entries must be strictly positive")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "psi", psi)

    @property
    def p(self) -> int:
        return self.lam.shape[0]

    @property
    def q(self) -> int:
        return self.lam.shape[1]

    @cached_property
    def _lam_over_psi(self) -> np.ndarray:
        # Psi^{-1} Lambda, reused by every solve.
        return self.lam / self.psi[:, None]

    @cached_property
    def _capacitance(self):
        """Cholesky factor of ``I_q + Lambda.T Psi^{-1} Lambda``."""
        m = np.eye(self.q) + self.lam.T @ self._lam_over_psi
        try:
            return cho_factor(m, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - q x q, rare
            smallest = float(np.linalg.eigvalsh(m)[0])
            raise NumericError(
                f"capacitance factorization failed (smallest eigenvalue {smallest:.3e})"
            ) from exc

    @cached_property
    def log_det(self) -> float:
        """``log|Sigma|`` via the matrix determinant lemma."""
        c, _ = self._capacitance
        return 2.0 * float(np.sum(np.log(np.diag(c)))) + float(
            np.sum(np.log(self.psi))
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``Sigma^{-1} @ rhs`` without forming the p x p inverse.

        Cost is ``O(p q k + q^3)`` for a ``(p, k)`` right-hand side.
        """
        rhs = np.asarray(rhs, dtype=float)
        squeeze = rhs.ndim == 1
        b = rhs[:, None] if squeeze else rhs
        z = b / self.psi[:, None]
        u = cho_solve(self._capacitance, self.lam.T @ z)
        out = z - self._lam_over_psi @ u
        return out[:, 0] if squeeze else out

    def dense(self) -> np.ndarray:
        """Materialize ``Sigma`` (test and small-p use only)."""
        return self.lam @ self.lam.T + np.diag(self.psi)


def woodbury_solve(fc: FactorCovariance, rhs: np.ndarray) -> np.ndarray:
    """``(Lambda Lambda.T + Psi)^{-1} @ rhs`` in factored form."""
    return fc.solve(rhs)


def log_det(fc: FactorCovariance) -> float:
    """``log|Lambda Lambda.T + Psi|`` via the determinant lemma."""
    return fc.log_det


def param_count(structure: CovarianceStructure, p: int, q: int, G: int) -> int:
    """Free covariance parameters of a tying pattern.

    Loadings contribute ``p*q - q*(q-1)/2`` per distinct matrix (the
    correction removes rotational redundancy), noise contributes 1 per
    distinct matrix when isotropic and ``p`` otherwise.
    """
    if not (q >= 1 and p >= 1 and q < p):
        raise DomainError(f"need 1 <= q < p, got p={p}, q={q}")
    if G < 1:
        raise DomainError(f"need G >= 1, got {G}")
    load = p * q - q * (q - 1) // 2
    n_load = 1 if structure.loading_tied else G
    n_noise_mats = 1 if structure.error_tied else G
    noise_each = 1 if structure.isotropic else p
    return n_load * load + n_noise_mats * noise_each


def _beta_theta(fc: FactorCovariance, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regression and residual statistics of the factor update.

    ``beta = Lambda.T Sigma^{-1}`` and
    ``Theta = I_q - beta Lambda + beta S beta.T``.
    """
    beta = fc.solve(fc.lam).T
    theta = np.eye(fc.q) - beta @ fc.lam + beta @ s @ beta.T
    return beta, theta


def _noise_diag(s: np.ndarray, lam_new: np.ndarray, beta: np.ndarray,
                theta: np.ndarray) -> np.ndarray:
    """Diagonal of ``S - 2 Lam beta S + Lam Theta Lam.T``.

    Reduces to the usual ``diag(S - Lam beta S)`` when ``lam_new`` solves
    the per-group normal equations, but stays an exact conditional
    maximizer under tied loadings too.
    """
    bs = beta @ s
    d = np.diag(s) - 2.0 * np.einsum("ij,ji->i", lam_new, bs)
    d += np.einsum("ij,jk,ik->i", lam_new, theta, lam_new)
    return d


def constrained_update(
    structure: CovarianceStructure,
    current: list[FactorCovariance],
    stats: list[tuple[np.ndarray, float]],
    psi_floor: float = 1e-10,
) -> list[FactorCovariance]:
    """One conditional-maximization update of the loadings and noise.

    Parameters
    ----------
    structure : CovarianceStructure
        The tying pattern to enforce.
    current : list of FactorCovariance
        Current per-group values (length G); supply the beta/Theta
        statistics of the update.
    stats : list of (S_g, n_g)
        Per-group scatter matrices (symmetric PSD) with their weights
        (effective group sizes).
    psi_floor : float
        Lower bound applied to every noise variance (Heywood guard).

    Returns
    -------
    list of FactorCovariance
        Updated values; tied blocks are shared arrays, hence bitwise equal.
    """
    G = len(current)
    if len(stats) != G or G == 0:
        raise DomainError("current and stats must be equal-length, non-empty")
    p, q = current[0].p, current[0].q
    s_list = [np.asarray(s, dtype=float) for s, _ in stats]
    n_list = np.array([float(n) for _, n in stats])
    for s in s_list:
        if s.shape != (p, p):
            raise DomainError("scatter matrix shape mismatch")

    bt = [_beta_theta(fc, s) for fc, s in zip(current, s_list)]

    try:
        if structure.loading_tied:
            if structure.error_tied:
                # Common Psi cancels from the pooled normal equations.
                lhs = sum(n * th for n, (_, th) in zip(n_list, bt))
                rhs = sum(n * (s @ b.T) for n, s, (b, _) in zip(n_list, s_list, bt))
                lam = np.ascontiguousarray(np.linalg.solve(lhs.T, rhs.T).T)
            else:
                # Group noise differs: solve the normal equations row-wise,
                # weighting each group by n_g / psi_gj.
                lam = np.empty((p, q))
                sb = [s @ b.T for s, (b, _) in zip(s_list, bt)]
                for j in range(p):
                    w = n_list / np.array([fc.psi[j] for fc in current])
                    lhs = sum(wg * th for wg, (_, th) in zip(w, bt))
                    rhs = sum(wg * sbg[j] for wg, sbg in zip(w, sb))
                    lam[j] = np.linalg.solve(lhs.T, rhs)
            lam_new = [lam] * G
        else:
            lam_new = [
                np.ascontiguousarray(np.linalg.solve(th.T, (s @ b.T).T).T)
                for s, (b, th) in zip(s_list, bt)
            ]
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            "singular factor-update system (rank-deficient pooled statistics); "
            "restart this fit from a different initialization"
        ) from exc

    diags = [
        _noise_diag(s, ln, b, th)
        for s, ln, (b, th) in zip(s_list, lam_new, bt)
    ]
    if structure.error_tied:
        pooled = sum(n * d for n, d in zip(n_list, diags)) / n_list.sum()
        if structure.isotropic:
            pooled = np.full(p, float(np.mean(pooled)))
        pooled = np.maximum(pooled, psi_floor)
        psi_new = [pooled] * G
    else:
        psi_new = []
        for d in diags:
            if structure.isotropic:
                d = np.full(p, float(np.mean(d)))
            psi_new.append(np.maximum(d, psi_floor))

    return [FactorCovariance(l, s) for l, s in zip(lam_new, psi_new)]
