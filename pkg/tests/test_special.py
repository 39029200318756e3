import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln

from skewtfa.errors import DomainError
from skewtfa.special import GigParams, digamma, gig_moments, log_bessel_k, solve_nu

EULER_GAMMA = 0.5772156649015329


def quad_log_bessel_k(lam, x):
    """Integral definition K_lam(x) = int_0^inf exp(-x cosh t) cosh(lam t) dt."""
    val, _ = integrate.quad(
        lambda t: math.exp(-x * math.cosh(t)) * math.cosh(lam * t),
        0.0,
        60.0,
        limit=200,
        epsabs=1e-14,
        epsrel=1e-13,
    )
    return math.log(val)


def gig_quadrature_moments(p: GigParams):
    """Moments of the GIG density by adaptive quadrature (independent oracle)."""

    def kernel(y, f):
        return f(y) * y ** (p.lam - 1.0) * math.exp(-0.5 * (p.psi * y + p.chi / y))

    mode = ((p.lam - 1.0) + math.sqrt((p.lam - 1.0) ** 2 + p.psi * p.chi)) / p.psi
    pts = [mode / 10.0, mode, mode * 10.0]

    def integ(f):
        lo, _ = integrate.quad(lambda y: kernel(y, f), 0.0, pts[-1], points=pts,
                               limit=400, epsabs=1e-13, epsrel=1e-12)
        hi, _ = integrate.quad(lambda y: kernel(y, f), pts[-1], np.inf,
                               limit=400, epsabs=1e-13, epsrel=1e-12)
        return lo + hi

    z = integ(lambda y: 1.0)
    return (
        integ(lambda y: y) / z,
        integ(lambda y: 1.0 / y) / z,
        integ(lambda y: math.log(y)) / z,
    )


class TestLogBesselK:
    def test_half_integer_closed_form(self):
        # K_{1/2}(x) = sqrt(pi/(2x)) exp(-x)
        expected = 0.5 * math.log(math.pi / 2.0) - 1.0
        assert log_bessel_k(0.5, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_negative_order_symmetry(self):
        assert log_bessel_k(-0.5, 3.0) == pytest.approx(log_bessel_k(0.5, 3.0), abs=1e-12)

    def test_against_quadrature(self):
        got = log_bessel_k(2.0, 5.0)
        want = quad_log_bessel_k(2.0, 5.0)
        assert got == pytest.approx(want, rel=1e-10)

    def test_symmetry_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            lam = rng.uniform(-30.0, 30.0)
            x = 10.0 ** rng.uniform(-2, 2)
            assert log_bessel_k(lam, x) == pytest.approx(
                log_bessel_k(-lam, x), abs=1e-12, rel=1e-12
            )

    def test_recurrence(self):
        # K_{lam+1}(x) = K_{lam-1}(x) + (2 lam / x) K_lam(x)
        rng = np.random.default_rng(11)
        for _ in range(30):
            lam = rng.uniform(-5.0, 5.0)
            x = rng.uniform(0.5, 20.0)
            k = lambda l: math.exp(log_bessel_k(l, x))
            assert k(lam + 1.0) == pytest.approx(
                k(lam - 1.0) + 2.0 * lam / x * k(lam), rel=1e-9
            )

    def test_extreme_order_fallback(self):
        # kve overflows here; the arbitrary-precision branch must take over.
        val = log_bessel_k(180.0, 0.05)
        # Small-argument asymptote K_lam(x) ~ Gamma(lam)/2 * (2/x)^lam
        approx = gammaln(180.0) - math.log(2.0) + 180.0 * math.log(2.0 / 0.05)
        assert np.isfinite(val)
        assert val == pytest.approx(approx, rel=1e-6)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            log_bessel_k(1.0, 0.0)
        with pytest.raises(DomainError):
            log_bessel_k(1.0, -2.0)
        with pytest.raises(DomainError):
            log_bessel_k(math.inf, 1.0)
        with pytest.raises(DomainError):
            log_bessel_k(1.0, math.nan)


class TestDigamma:
    def test_euler_mascheroni(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-12)

    def test_recurrence_at_two(self):
        assert digamma(2.0) == pytest.approx(1.0 - EULER_GAMMA, abs=1e-12)

    def test_finite_difference(self):
        h = 1e-6
        fd = (gammaln(7.5 + h) - gammaln(7.5 - h)) / (2.0 * h)
        assert digamma(7.5) == pytest.approx(fd, abs=1e-7)

    def test_recurrence_sweep(self):
        rng = np.random.default_rng(3)
        for x in rng.uniform(0.05, 50.0, size=100):
            assert digamma(x + 1.0) - digamma(x) == pytest.approx(1.0 / x, rel=1e-12, abs=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            digamma(0.0)
        with pytest.raises(DomainError):
            digamma(-1.0)


class TestGigMoments:
    def test_symmetric_order_unit_ratio(self):
        e_y, _, _ = gig_moments(GigParams(psi=2.0, chi=2.0, lam=-0.5))
        assert e_y == pytest.approx(1.0, rel=1e-12)

    def test_jensen(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = GigParams(
                psi=10.0 ** rng.uniform(-1, 1),
                chi=10.0 ** rng.uniform(-1, 1),
                lam=rng.uniform(-10.0, 5.0),
            )
            e_y, e_inv_y, _ = gig_moments(p)
            assert e_y * e_inv_y >= 1.0 - 1e-12

    def test_against_quadrature(self):
        p = GigParams(psi=3.0, chi=1.5, lam=2.0)
        got = gig_moments(p)
        want = gig_quadrature_moments(p)
        for g, w in zip(got, want):
            assert g == pytest.approx(w, rel=1e-6)

    def test_invalid(self):
        with pytest.raises(DomainError):
            GigParams(psi=0.0, chi=1.0, lam=1.0)
        with pytest.raises(DomainError):
            GigParams(psi=1.0, chi=-1.0, lam=1.0)


class TestSolveNu:
    def test_no_root_saturates_at_cap(self):
        # log(x) - psi(x) > 0 for all x, so s = 1 leaves g positive everywhere.
        assert solve_nu(1.0) == 200.0

    @pytest.mark.parametrize("nu0", [10.0, 4.0])
    def test_forward_invert(self, nu0):
        s = 1.0 + math.log(nu0 / 2.0) - digamma(nu0 / 2.0)
        assert solve_nu(s) == pytest.approx(nu0, abs=1e-8)

    def test_low_saturation(self):
        # Huge s: root sits below the bracket, clamp at nu_lo.
        assert solve_nu(50.0) == pytest.approx(2.0001)

    def test_gap_monotone_positive(self):
        from skewtfa.special import _nu_gap

        nus = np.linspace(2.1, 199.0, 200)
        gaps = np.array([_nu_gap(v, 1.0) for v in nus])
        assert np.all(gaps > 0.0)
        assert np.all(np.diff(gaps) < 0.0)

    def test_invalid_bracket(self):
        with pytest.raises(DomainError):
            solve_nu(1.5, nu_lo=5.0, nu_hi=2.0)
