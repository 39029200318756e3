import numpy as np
import pytest

from skewtfa.covariance import (
    STRUCTURE_IDS,
    CovarianceStructure,
    FactorCovariance,
    constrained_update,
    log_det,
    param_count,
    woodbury_solve,
)
from skewtfa.errors import DomainError


def random_fc(p, q, seed, psi_scale=1.0):
    rng = np.random.default_rng(seed)
    lam = rng.standard_normal((p, q))
    psi = psi_scale * rng.uniform(0.2, 2.0, size=p)
    return FactorCovariance(lam, psi)


def jacobian_rank_count(structure, p, q, G, seed=0):
    """Independent count of identifiable covariance parameters.

    Builds the map from raw parameters (loading entries plus noise terms)
    to the stacked covariance matrices and returns the rank of its
    Jacobian; rotational redundancy of each loading block shows up as a
    rank deficit automatically.
    """
    rng = np.random.default_rng(seed)
    n_lam = 1 if structure.loading_tied else G
    n_psi = 1 if structure.error_tied else G
    psi_dim = 1 if structure.isotropic else p
    lam0 = rng.standard_normal((n_lam, p, q))
    psi0 = rng.uniform(0.5, 1.5, size=(n_psi, psi_dim))
    theta0 = np.concatenate([lam0.ravel(), psi0.ravel()])

    iu = np.triu_indices(p)

    def sigmas(theta):
        lams = theta[: n_lam * p * q].reshape(n_lam, p, q)
        psis = theta[n_lam * p * q :].reshape(n_psi, psi_dim)
        out = []
        for g in range(G):
            lam = lams[0 if structure.loading_tied else g]
            psi = psis[0 if structure.error_tied else g]
            psi_vec = np.full(p, psi[0]) if structure.isotropic else psi
            sig = lam @ lam.T + np.diag(psi_vec)
            out.append(sig[iu])
        return np.concatenate(out)

    h = 1e-6
    base = sigmas(theta0)
    jac = np.empty((base.size, theta0.size))
    for k in range(theta0.size):
        tp = theta0.copy()
        tp[k] += h
        tm = theta0.copy()
        tm[k] -= h
        jac[:, k] = (sigmas(tp) - sigmas(tm)) / (2.0 * h)
    return int(np.linalg.matrix_rank(jac, tol=1e-7))


class TestWoodbury:
    def test_zero_loading_is_diagonal(self):
        p = 8
        psi = np.linspace(0.5, 2.0, p)
        fc = FactorCovariance(np.zeros((p, 2)), psi)
        rhs = np.arange(p, dtype=float)
        np.testing.assert_allclose(woodbury_solve(fc, rhs), rhs / psi, rtol=1e-14)

    def test_matches_dense_inverse(self):
        fc = random_fc(50, 3, seed=1)
        rhs = np.random.default_rng(2).standard_normal((50, 4))
        dense = np.linalg.solve(fc.dense(), rhs)
        np.testing.assert_allclose(fc.solve(rhs), dense, rtol=1e-10, atol=1e-12)

    def test_inverse_definition(self):
        fc = random_fc(20, 2, seed=3)
        sig = fc.dense()
        for j in (0, 7, 19):
            e = np.zeros(20)
            e[j] = 1.0
            np.testing.assert_allclose(fc.solve(sig @ e), e, atol=1e-10)

    def test_identity_roundtrip_various_sizes(self):
        for p, q, seed in [(5, 1, 0), (30, 4, 1), (200, 3, 2)]:
            fc = random_fc(p, q, seed=seed)
            prod = fc.dense() @ fc.solve(np.eye(p))
            np.testing.assert_allclose(prod, np.eye(p), atol=1e-9)


class TestLogDet:
    def test_identity(self):
        fc = FactorCovariance(np.zeros((4, 1)), np.ones(4))
        assert log_det(fc) == pytest.approx(0.0, abs=1e-15)

    def test_matches_dense(self):
        fc = random_fc(50, 3, seed=4)
        _, want = np.linalg.slogdet(fc.dense())
        assert log_det(fc) == pytest.approx(want, rel=1e-10)

    def test_scaling_homogeneity(self):
        fc = random_fc(12, 2, seed=5)
        c = 3.7
        scaled = FactorCovariance(np.sqrt(c) * fc.lam, c * fc.psi)
        assert log_det(scaled) - log_det(fc) == pytest.approx(12 * np.log(c), rel=1e-12)


class TestParamCount:
    @pytest.mark.parametrize(
        "sid,expected",
        [("CCC", 12), ("UUU", 51), ("CUC", 14)],
    )
    def test_documented_values(self, sid, expected):
        assert param_count(CovarianceStructure(sid), p=6, q=2, G=3) == expected

    def test_all_rows_formulae(self):
        p, q, G = 7, 3, 4
        load = p * q - q * (q - 1) // 2
        expected = {
            "CCC": load + 1,
            "CCU": load + p,
            "CUC": load + G,
            "CUU": load + G * p,
            "UCC": G * load + 1,
            "UCU": G * load + p,
            "UUC": G * load + G,
            "UUU": G * load + G * p,
        }
        for sid, want in expected.items():
            assert param_count(CovarianceStructure(sid), p, q, G) == want

    def test_against_jacobian_rank(self):
        for sid in STRUCTURE_IDS:
            st = CovarianceStructure(sid)
            for (p, q, G) in [(4, 1, 2), (5, 2, 3)]:
                assert param_count(st, p, q, G) == jacobian_rank_count(st, p, q, G)

    def test_domain(self):
        with pytest.raises(DomainError):
            param_count(CovarianceStructure("UUU"), p=3, q=3, G=1)
        with pytest.raises(DomainError):
            CovarianceStructure("ABC")


def scatter_for(fc, seed, n=2000):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, fc.p)) @ np.linalg.cholesky(fc.dense()).T
    return x.T @ x / n


class TestConstrainedUpdate:
    def test_uuu_single_group_matches_direct(self):
        fc = random_fc(6, 2, seed=8)
        s = scatter_for(fc, seed=9)
        (out,) = constrained_update(CovarianceStructure("UUU"), [fc], [(s, 100.0)])
        beta = fc.solve(fc.lam).T
        theta = np.eye(2) - beta @ fc.lam + beta @ s @ beta.T
        lam_direct = s @ beta.T @ np.linalg.inv(theta)
        psi_direct = np.diag(s - lam_direct @ beta @ s)
        np.testing.assert_allclose(out.lam, lam_direct, rtol=1e-10)
        np.testing.assert_allclose(out.psi, psi_direct, rtol=1e-9)

    def test_ccc_identical_groups_matches_uuu(self):
        fc = random_fc(6, 2, seed=10)
        s = scatter_for(fc, seed=11)
        tied = constrained_update(
            CovarianceStructure("CCC"), [fc, fc, fc], [(s, 50.0)] * 3
        )
        (single,) = constrained_update(CovarianceStructure("UUU"), [fc], [(s, 50.0)])
        np.testing.assert_allclose(tied[0].lam, single.lam, rtol=1e-10)
        # CCC replaces the diagonal by its isotropic mean.
        np.testing.assert_allclose(
            tied[0].psi, np.full(6, np.mean(single.psi)), rtol=1e-9
        )

    def test_isotropic_structures_have_constant_psi(self):
        fcs = [random_fc(5, 1, seed=s) for s in (12, 13)]
        stats = [(scatter_for(fc, seed=20 + i), 40.0) for i, fc in enumerate(fcs)]
        for sid in ("CCC", "CUC", "UCC", "UUC"):
            out = constrained_update(CovarianceStructure(sid), fcs, stats)
            for fc in out:
                assert np.ptp(fc.psi) == 0.0

    def test_tied_blocks_bitwise_equal(self):
        fcs = [random_fc(5, 2, seed=s) for s in (14, 15, 16)]
        stats = [(scatter_for(fc, seed=30 + i), 25.0) for i, fc in enumerate(fcs)]
        for sid in STRUCTURE_IDS:
            st = CovarianceStructure(sid)
            out = constrained_update(st, fcs, stats)
            if st.loading_tied:
                assert all(np.array_equal(o.lam, out[0].lam) for o in out)
            if st.error_tied:
                assert all(np.array_equal(o.psi, out[0].psi) for o in out)

    def test_psi_floor_enforced(self):
        fc = random_fc(4, 1, seed=17)
        # Degenerate scatter drives noise toward zero.
        s = np.outer(fc.lam[:, 0], fc.lam[:, 0])
        (out,) = constrained_update(
            CovarianceStructure("UUU"), [fc], [(s, 10.0)], psi_floor=1e-6
        )
        assert np.all(out.psi >= 1e-6)

    def test_fixed_point(self):
        # S equal to the current covariance leaves Lambda Lambda' and Psi alone.
        fc = random_fc(6, 2, seed=18)
        (out,) = constrained_update(
            CovarianceStructure("UUU"), [fc], [(fc.dense(), 60.0)]
        )
        np.testing.assert_allclose(out.lam @ out.lam.T, fc.lam @ fc.lam.T, atol=1e-8)
        np.testing.assert_allclose(out.psi, fc.psi, atol=1e-8)
