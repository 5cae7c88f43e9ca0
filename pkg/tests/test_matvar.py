"""Matrix normal calculus against the vectorized-Gaussian oracle.

The oracle: X ~ MN(M; Sigma, Psi) iff vec(X^T) ~ N(vec(M^T), Sigma kron Psi).
Every identity here is checked against plain multivariate-normal algebra on
the Kronecker form, built independently with numpy/scipy.
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from enksmpc.matvar import (
    JointBlockParams,
    MatrixNormalParams,
    NoiseStreams,
    affine_transform,
    conditional,
    log_pdf,
    sample,
)


def vec_t(x):
    """vec(x^T): row-major flattening."""
    return np.asarray(x).reshape(-1)


def random_spd(rng, k, scale=1.0):
    a = rng.standard_normal((k, k))
    return scale * (a @ a.T + k * np.eye(k))


def random_params(rng, n, m):
    return MatrixNormalParams(
        mean=rng.standard_normal((n, m)),
        row_cov=random_spd(rng, n),
        col_cov=random_spd(rng, m),
    )


class TestLogPdf:
    def test_standard_normal_at_mode(self):
        params = MatrixNormalParams(np.zeros((1, 1)), np.eye(1), np.eye(1))
        assert log_pdf(np.zeros((1, 1)), params) == pytest.approx(
            -0.5 * np.log(2 * np.pi), abs=1e-12
        )

    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_matches_vectorized_gaussian(self, n, m):
        rng = np.random.default_rng(100 * n + m)
        params = random_params(rng, n, m)
        x = rng.standard_normal((n, m))
        oracle = multivariate_normal(
            mean=vec_t(params.mean), cov=np.kron(params.row_cov, params.col_cov)
        ).logpdf(vec_t(x))
        assert log_pdf(x, params) == pytest.approx(oracle, abs=1e-10)

    def test_symmetric_about_mean(self):
        rng = np.random.default_rng(7)
        params = random_params(rng, 3, 2)
        d = rng.standard_normal((3, 2))
        assert log_pdf(params.mean + d, params) == pytest.approx(
            log_pdf(params.mean - d, params), abs=1e-12
        )

    def test_shape_mismatch_raises(self):
        params = random_params(np.random.default_rng(0), 2, 2)
        with pytest.raises(ValueError):
            log_pdf(np.zeros((3, 2)), params)

    def test_non_spd_covariance_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            MatrixNormalParams(np.zeros((2, 2)), -np.eye(2), np.eye(2))

    def test_asymmetric_covariance_raises(self):
        bad = np.array([[1.0, 0.5], [0.2, 1.0]])
        with pytest.raises(ValueError):
            MatrixNormalParams(np.zeros((2, 2)), bad, np.eye(2))


class TestSample:
    def test_empirical_mean_standard(self):
        params = MatrixNormalParams(np.zeros((2, 3)), np.eye(2), np.eye(3))
        rng = np.random.default_rng(1)
        draws = np.stack([sample(params, rng) for _ in range(100_000)])
        assert np.all(np.abs(draws.mean(axis=0)) < 4 / np.sqrt(100_000))

    def test_second_moment_identities(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, 2, 3)
        n_draws = 100_000
        draws = np.stack([sample(params, rng) for _ in range(n_draws)])
        dev = draws - params.mean
        row_moment = np.einsum("knm,krm->nr", dev, dev) / n_draws
        col_moment = np.einsum("knm,knr->mr", dev, dev) / n_draws
        expect_row = np.trace(params.col_cov) * params.row_cov
        expect_col = np.trace(params.row_cov) * params.col_cov
        assert np.allclose(row_moment, expect_row, atol=0.05 * np.abs(expect_row).max())
        assert np.allclose(col_moment, expect_col, atol=0.05 * np.abs(expect_col).max())

    def test_same_seed_bit_identical(self):
        params = random_params(np.random.default_rng(3), 3, 2)
        streams = NoiseStreams(seed=42)
        a = sample(params, streams.substream(5, 1, 0))
        b = sample(params, streams.substream(5, 1, 0))
        assert np.array_equal(a, b)

    def test_distinct_substreams_differ(self):
        params = random_params(np.random.default_rng(3), 3, 2)
        streams = NoiseStreams(seed=42)
        a = sample(params, streams.substream(0, 0, 0))
        b = sample(params, streams.substream(0, 0, 1))
        assert not np.array_equal(a, b)

    def test_child_prefix_matches_flat_ids(self):
        streams = NoiseStreams(seed=9)
        a = streams.child(4).substream(1, 2)
        b = streams.substream(4, 1, 2)
        assert np.array_equal(a.standard_normal(8), b.standard_normal(8))


class TestAffineTransform:
    def test_identity(self):
        params = random_params(np.random.default_rng(4), 3, 2)
        out = affine_transform(params, np.eye(3), np.eye(2))
        assert np.allclose(out.mean, params.mean)
        assert np.allclose(out.row_cov, params.row_cov)
        assert np.allclose(out.col_cov, params.col_cov)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, 3, 3)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3, 2))
        out = affine_transform(params, a, b)
        draws = np.stack([a @ sample(params, rng) @ b for _ in range(100_000)])
        emp = draws.mean(axis=0)
        assert np.allclose(emp, out.mean, atol=0.05 * np.abs(out.mean).max())

    def test_row_selection_marginal(self):
        params = MatrixNormalParams(
            np.zeros((2, 2)), np.diag([1.0, 4.0]), np.eye(2)
        )
        out = affine_transform(params, np.array([[1.0, 0.0]]), np.eye(2))
        assert np.allclose(out.row_cov, [[1.0]])

    def test_rank_deficient_raises(self):
        params = random_params(np.random.default_rng(6), 3, 3)
        a = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        with pytest.raises(np.linalg.LinAlgError):
            affine_transform(params, a, np.eye(3))

    def test_permutation_commutes_with_density(self):
        # Permuting rows/columns of samples is distributed as the transformed
        # params: densities agree pointwise (|det| = 1 for permutations).
        rng = np.random.default_rng(8)
        params = random_params(rng, 3, 2)
        p = np.eye(3)[[2, 0, 1]]
        q = np.eye(2)[[1, 0]]
        out = affine_transform(params, p, q)
        for _ in range(5):
            x = sample(params, rng)
            assert log_pdf(p @ x @ q, out) == pytest.approx(log_pdf(x, params), abs=1e-9)


class TestConditional:
    def random_joint(self, rng, n, r, m):
        big = random_spd(rng, n + r)
        return JointBlockParams(
            mean_x=rng.standard_normal((n, m)),
            mean_y=rng.standard_normal((r, m)),
            cov_x=big[:n, :n],
            cov_xy=big[:n, n:],
            cov_y=big[n:, n:],
            col_cov=random_spd(rng, m),
        )

    def test_independence(self):
        rng = np.random.default_rng(10)
        joint = JointBlockParams(
            mean_x=rng.standard_normal((2, 2)),
            mean_y=rng.standard_normal((2, 2)),
            cov_x=random_spd(rng, 2),
            cov_xy=np.zeros((2, 2)),
            cov_y=random_spd(rng, 2),
            col_cov=np.eye(2),
        )
        out = conditional(joint, rng.standard_normal((2, 2)))
        assert np.allclose(out.mean, joint.mean_x)
        assert np.allclose(out.row_cov, joint.cov_x)

    def test_zero_innovation(self):
        joint = self.random_joint(np.random.default_rng(11), 3, 2, 2)
        out = conditional(joint, joint.mean_y)
        assert np.allclose(out.mean, joint.mean_x)

    def test_matches_vectorized_conditioning(self):
        n, r, m = 2, 2, 2
        joint = self.random_joint(np.random.default_rng(12), n, r, m)
        y_obs = np.random.default_rng(13).standard_normal((r, m))
        out = conditional(joint, y_obs)

        # Oracle: condition N(vec([X;Y]^T), [[Sx,Sxy],[Sxy^T,Sy]] kron Psi).
        cov = np.kron(joint.stacked_row_cov(), joint.col_cov)
        mu = np.concatenate([vec_t(joint.mean_x), vec_t(joint.mean_y)])
        nx = n * m
        cxx, cxy = cov[:nx, :nx], cov[:nx, nx:]
        cyx, cyy = cov[nx:, :nx], cov[nx:, nx:]
        gain = cxy @ np.linalg.inv(cyy)
        mean_vec = mu[:nx] + gain @ (vec_t(y_obs) - mu[nx:])
        cov_vec = cxx - gain @ cyx

        assert np.allclose(vec_t(out.mean), mean_vec, atol=1e-10)
        assert np.allclose(np.kron(out.row_cov, out.col_cov), cov_vec, atol=1e-10)

    def test_chain_rule(self):
        # log p(x, y) = log p(x | y) + log p(y) on random instances.
        rng = np.random.default_rng(14)
        for trial in range(5):
            n, r, m = 2, 3, 2
            joint = self.random_joint(rng, n, r, m)
            x = rng.standard_normal((n, m))
            y = rng.standard_normal((r, m))
            joint_params = MatrixNormalParams(
                mean=np.vstack([joint.mean_x, joint.mean_y]),
                row_cov=joint.stacked_row_cov(),
                col_cov=joint.col_cov,
            )
            lhs = log_pdf(np.vstack([x, y]), joint_params)
            marg_y = MatrixNormalParams(joint.mean_y, joint.cov_y, joint.col_cov)
            rhs = log_pdf(x, conditional(joint, y)) + log_pdf(y, marg_y)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_singular_cov_y_raises(self):
        joint = JointBlockParams(
            mean_x=np.zeros((2, 1)),
            mean_y=np.zeros((2, 1)),
            cov_x=np.eye(2),
            cov_xy=np.zeros((2, 2)),
            cov_y=np.zeros((2, 2)),
            col_cov=np.eye(1),
        )
        with pytest.raises(np.linalg.LinAlgError):
            conditional(joint, np.zeros((2, 1)))
