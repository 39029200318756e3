"""Scalar special functions underpinning the mixture densities.

Provides a log-space modified Bessel function of the third kind, the
digamma function, the three closed-form expectations of a generalized
inverse Gaussian (GIG) variable, and the monotone root solve used by the
degrees-of-freedom update of both mixture families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import special as sp

from .errors import DomainError

__all__ = [
    "GigParams",
    "log_bessel_k",
    "digamma",
    "gig_moments",
    "solve_nu",
]

# Central-difference step for the index derivative of log K_lambda(x).
_DLAMBDA = 1e-5

# Default degrees-of-freedom bracket: the lower end keeps the t variance
# barely defined, the upper end means "effectively Gaussian".
NU_LO_DEFAULT = 2.0001
NU_HI_DEFAULT = 200.0


@dataclass(frozen=True)
class GigParams:
    """Parameters of an interior generalized inverse Gaussian law.

    Density proportional to ``y**(lam - 1) * exp(-(psi*y + chi/y)/2)`` on
    ``y > 0``.  Both ``psi`` and ``chi`` must be strictly positive; the
    gamma / inverse-gamma boundary cases are rejected.
    """

    psi: float
    chi: float
    lam: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.psi) and self.psi > 0.0):
            raise DomainError(f"GIG psi must be finite and > 0, got {self.psi}")
        if not (np.isfinite(self.chi) and self.chi > 0.0):
            raise DomainError(f"GIG chi must be finite and > 0, got {self.chi}")
        if not np.isfinite(self.lam):
            raise DomainError(f"GIG lambda must be finite, got {self.lam}")


def log_bessel_k(lam: float, x: float) -> float:
    """Log of the modified Bessel function of the third kind, ``log K_lam(x)``.

    Uses the exponentially scaled ``kve`` so large arguments do not
    underflow: ``log K_lam(x) = log kve(lam, x) - x``.  When the scaled
    value itself overflows (large ``|lam|`` with small ``x``) the value is
    recomputed in arbitrary precision.

    Parameters
    ----------
    lam : float
        Order (may be negative; ``K_{-lam} = K_lam``).
    x : float
        Argument, must be finite and strictly positive.
    """
    if not (np.isfinite(x) and x > 0.0):
        raise DomainError(f"log_bessel_k requires finite x > 0, got {x}")
    if not np.isfinite(lam):
        raise DomainError(f"log_bessel_k requires finite order, got {lam}")
    val = sp.kve(lam, x)
    if val > 0.0 and np.isfinite(val):
        return float(np.log(val) - x)
    with mpmath.workdps(30):
        return float(mpmath.log(mpmath.besselk(mpmath.mpf(lam), mpmath.mpf(x))))


def _log_bessel_k_vec(lam: float, x: np.ndarray) -> np.ndarray:
    """Vectorized ``log_bessel_k`` for a scalar order and array argument."""
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError("log_bessel_k requires finite x > 0")
    with np.errstate(over="ignore", divide="ignore"):
        out = np.log(sp.kve(lam, x)) - x
    bad = ~np.isfinite(out)
    if np.any(bad):
        out = out.copy()
        for i in np.flatnonzero(bad):
            out[i] = log_bessel_k(lam, float(x[i]))
    return out


def gig_moments_vec(
    psi: float, chi: np.ndarray, lam: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized GIG expectations for a scalar (psi, lam) and array chi.

    Matches :func:`gig_moments` elementwise; used by the GH-family E-step
    where chi varies per observation but psi and the index do not.
    """
    chi = np.asarray(chi, dtype=float)
    if psi <= 0.0 or np.any(chi <= 0.0):
        raise DomainError("gig_moments_vec requires psi > 0 and chi > 0")
    s = np.sqrt(psi * chi)
    lk = _log_bessel_k_vec(lam, s)
    ratio = np.exp(_log_bessel_k_vec(lam + 1.0, s) - lk)
    e_y = np.sqrt(chi / psi) * ratio
    e_inv_y = np.sqrt(psi / chi) * ratio - 2.0 * lam / chi
    dlog_k = (
        _log_bessel_k_vec(lam + _DLAMBDA, s) - _log_bessel_k_vec(lam - _DLAMBDA, s)
    ) / (2.0 * _DLAMBDA)
    e_log_y = 0.5 * np.log(chi / psi) + dlog_k
    return e_y, e_inv_y, e_log_y


def digamma(x: float) -> float:
    """Digamma function ``psi(x) = d/dx log Gamma(x)`` for ``x > 0``."""
    if not (np.isfinite(x) and x > 0.0):
        raise DomainError(f"digamma requires finite x > 0, got {x}")
    return float(sp.digamma(x))


def gig_moments(p: GigParams) -> tuple[float, float, float]:
    """Closed-form GIG expectations ``(E[Y], E[1/Y], E[log Y])``.

    Implements the Bessel-ratio forms

    .. math::
        E[Y]      &= \\sqrt{\\chi/\\psi}\\, K_{\\lambda+1}(s)/K_\\lambda(s), \\\\
        E[1/Y]    &= \\sqrt{\\psi/\\chi}\\, K_{\\lambda+1}(s)/K_\\lambda(s)
                     - 2\\lambda/\\chi, \\\\
        E[\\log Y] &= \\log\\sqrt{\\chi/\\psi}
                     + \\partial_\\lambda K_\\lambda(s) / K_\\lambda(s),

    with ``s = sqrt(psi*chi)``.  The index derivative is evaluated by a
    central difference on ``log K`` with step ``1e-5``, which keeps the
    dependency surface to a single Bessel routine.
    """
    s = math.sqrt(p.psi * p.chi)
    lk = log_bessel_k(p.lam, s)
    ratio = math.exp(log_bessel_k(p.lam + 1.0, s) - lk)
    e_y = math.sqrt(p.chi / p.psi) * ratio
    e_inv_y = math.sqrt(p.psi / p.chi) * ratio - 2.0 * p.lam / p.chi
    dlog_k = (
        log_bessel_k(p.lam + _DLAMBDA, s) - log_bessel_k(p.lam - _DLAMBDA, s)
    ) / (2.0 * _DLAMBDA)
    e_log_y = 0.5 * math.log(p.chi / p.psi) + dlog_k
    return e_y, e_inv_y, e_log_y


def _nu_gap(nu: float, s: float) -> float:
    """The root function ``g(nu) = log(nu/2) - psi(nu/2) - s + 1``.

    ``log(x) - psi(x)`` is strictly positive and strictly decreasing on
    ``x > 0``, so ``g`` has at most one root and its sign at the bracket
    ends settles saturation.
    """
    h = nu / 2.0
    return math.log(h) - float(sp.digamma(h)) - s + 1.0


def solve_nu(
    s: float,
    nu_lo: float = NU_LO_DEFAULT,
    nu_hi: float = NU_HI_DEFAULT,
    tol: float = 1e-8,
) -> float:
    """Solve ``log(nu/2) - psi(nu/2) - s + 1 = 0`` for the df update.

    Returns the bracketed root when the sign changes over
    ``[nu_lo, nu_hi]``.  If ``g > 0`` on the whole bracket (``s`` at or
    below 1: the heavy-tail signal has vanished) the bracket cap ``nu_hi``
    is returned; in the opposite saturation ``nu_lo`` is returned.

    Bisection guarantees global convergence on the monotone ``g``; once
    the interval is small, Newton steps polish to ``tol`` in ``nu``.
    """
    if not (np.isfinite(nu_lo) and np.isfinite(nu_hi) and 0.0 < nu_lo < nu_hi):
        raise DomainError(f"invalid nu bracket [{nu_lo}, {nu_hi}]")
    if not np.isfinite(s):
        raise DomainError(f"solve_nu requires finite s, got {s}")

    g_lo = _nu_gap(nu_lo, s)
    g_hi = _nu_gap(nu_hi, s)
    if g_hi > 0.0:
        return nu_hi
    if g_lo < 0.0:
        return nu_lo

    lo, hi = nu_lo, nu_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        # Newton refinement from the midpoint; g' = 1/nu - psi'(nu/2)/2.
        g_mid = _nu_gap(mid, s)
        dg = 1.0 / mid - 0.5 * float(sp.polygamma(1, mid / 2.0))
        if dg != 0.0:
            step = mid - g_mid / dg
            if lo < step < hi:
                g_step = _nu_gap(step, s)
                if abs(step - mid) < tol and abs(g_step) < 1e-14:
                    return step
                if g_step > 0.0:
                    lo = max(lo, step)
                else:
                    hi = min(hi, step)
        if g_mid > 0.0:
            lo = max(lo, mid)
        else:
            hi = min(hi, mid)
    return 0.5 * (lo + hi)
