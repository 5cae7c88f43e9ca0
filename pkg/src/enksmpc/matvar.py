"""Matrix normal distribution calculus.

A random matrix X (n x m) is matrix-normal MN(M; Sigma, Psi) with mean M,
row covariance Sigma (n x n) and column covariance Psi (m x m) when

    log p(X) = -(nm/2) log(2 pi) - (n/2) log|Psi| - (m/2) log|Sigma|
               - 1/2 tr[Sigma^-1 (X - M) Psi^-1 (X - M)^T].

Equivalently, vec(X^T) ~ N(vec(M^T); Sigma kron Psi), which is the bridge
used by the test oracles here.  Everything is parameterized by Cholesky
factors: covariances are validated (symmetric, strictly positive pivots)
once at construction and the factors are reused by every operation.

Sampling uses counter-based substreams: `NoiseStreams` derives independent
generators from a root seed and an integer id tuple, so concurrent workers
can draw per-(member, time, channel) noise without sharing mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "MatrixNormalParams",
    "JointBlockParams",
    "NoiseStreams",
    "log_pdf",
    "sample",
    "transform_standard_normal",
    "affine_transform",
    "conditional",
]

# Symmetry tolerance from the covariance construction contract; scaled by
# magnitude so ensemble covariances built from large outer-product sums pass.
_SYM_TOL = 1e-12
_RANK_TOL = 1e-10


def _checked_cholesky(mat: np.ndarray, name: str) -> np.ndarray:
    """Validate symmetry, symmetrize, and return the lower Cholesky factor."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    asym = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
    if asym > _SYM_TOL * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    sym = 0.5 * (mat + mat.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{name} is not positive definite: {exc}") from exc


@dataclass
class MatrixNormalParams:
    """Parameters of MN(mean; row_cov, col_cov), with cached Cholesky factors."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray
    row_chol: np.ndarray = field(init=False, repr=False)
    col_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.ndim != 2:
            raise ValueError(f"mean must be 2-D, got shape {self.mean.shape}")
        self.row_cov = np.asarray(self.row_cov, dtype=float)
        self.col_cov = np.asarray(self.col_cov, dtype=float)
        self.row_chol = _checked_cholesky(self.row_cov, "row_cov")
        self.col_chol = _checked_cholesky(self.col_cov, "col_cov")
        n, m = self.mean.shape
        if self.row_cov.shape != (n, n):
            raise ValueError(
                f"row_cov shape {self.row_cov.shape} does not match mean rows {n}"
            )
        if self.col_cov.shape != (m, m):
            raise ValueError(
                f"col_cov shape {self.col_cov.shape} does not match mean cols {m}"
            )

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def m(self) -> int:
        return self.mean.shape[1]


@dataclass
class JointBlockParams:
    """Two-block joint matrix normal over stacked [X; Y] sharing one col_cov.

    The row covariance is [[cov_x, cov_xy], [cov_xy^T, cov_y]]; it must be
    symmetric positive semidefinite as a whole.
    """

    mean_x: np.ndarray
    mean_y: np.ndarray
    cov_x: np.ndarray
    cov_xy: np.ndarray
    cov_y: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self) -> None:
        for name in ("mean_x", "mean_y", "cov_x", "cov_xy", "cov_y", "col_cov"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.mean_x.shape[0]
        r = self.mean_y.shape[0]
        if self.mean_x.shape[1] != self.mean_y.shape[1]:
            raise ValueError("mean_x and mean_y must share column count")
        if self.cov_x.shape != (n, n) or self.cov_y.shape != (r, r):
            raise ValueError("cov_x/cov_y shapes inconsistent with means")
        if self.cov_xy.shape != (n, r):
            raise ValueError(f"cov_xy must be {(n, r)}, got {self.cov_xy.shape}")
        stacked = self.stacked_row_cov()
        scale = max(1.0, float(np.max(np.abs(stacked))))
        if float(np.max(np.abs(stacked - stacked.T))) > _SYM_TOL * scale:
            raise ValueError("stacked block row covariance is not symmetric")
        min_eig = float(np.linalg.eigvalsh(0.5 * (stacked + stacked.T)).min())
        if min_eig < -_RANK_TOL * max(1.0, float(np.trace(stacked))):
            raise ValueError(f"stacked block row covariance is indefinite ({min_eig:.3e})")

    def stacked_row_cov(self) -> np.ndarray:
        top = np.hstack([self.cov_x, self.cov_xy])
        bottom = np.hstack([self.cov_xy.T, self.cov_y])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class NoiseStreams:
    """Derives independent, reproducible generators from (seed, id tuple).

    Substream identity is the integer id path, e.g. (mpc step, horizon step,
    member, channel).  Same seed and ids give a bit-identical stream, which is
    what makes ensemble propagation safe to parallelize: each worker owns the
    substream named by its indices, independent of execution order.
    """

    seed: int
    prefix: tuple = ()

    def substream(self, *ids: int) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.prefix + ids)
        return np.random.Generator(np.random.Philox(seq))

    def child(self, *ids: int) -> "NoiseStreams":
        return NoiseStreams(self.seed, self.prefix + ids)


def log_pdf(x: np.ndarray, params: MatrixNormalParams) -> float:
    """Log density of MN(mean; row_cov, col_cov) at the matrix x.

    Matches the log density of vec(x^T) under N(vec(mean^T), row_cov kron col_cov).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != params.mean.shape:
        raise ValueError(f"x shape {x.shape} does not match mean shape {params.mean.shape}")
    n, m = params.mean.shape
    a, b = params.row_chol, params.col_chol
    dev = x - params.mean
    # tr[Sigma^-1 D Psi^-1 D^T] = ||B^-1 (A^-1 D)^T||_F^2 with A, B lower Cholesky.
    half = solve_triangular(a, dev, lower=True)
    whitened = solve_triangular(b, half.T, lower=True)
    maha = float(np.sum(whitened**2))
    log_det_row = 2.0 * float(np.sum(np.log(np.diag(a))))
    log_det_col = 2.0 * float(np.sum(np.log(np.diag(b))))
    return -0.5 * (n * m * np.log(2.0 * np.pi) + n * log_det_col + m * log_det_row + maha)


def sample(params: MatrixNormalParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one matrix: mean + A Z B^T with Z iid standard normal."""
    z = rng.standard_normal((params.n, params.m))
    return transform_standard_normal(params, z)


def transform_standard_normal(params: MatrixNormalParams, z: np.ndarray) -> np.ndarray:
    """Map standard-normal draws z (..., n, m) to MN(mean; row_cov, col_cov).

    Batched over leading axes, so ensemble noise can be colored in one call.
    """
    return params.mean + params.row_chol @ z @ params.col_chol.T


def _require_full_rank(mat: np.ndarray, expect: int, name: str) -> None:
    sv = np.linalg.svd(mat, compute_uv=False)
    rank = int(np.sum(sv > _RANK_TOL * sv[0])) if sv.size else 0
    if rank != expect:
        raise np.linalg.LinAlgError(
            f"{name} must have full rank {expect}, detected rank {rank}"
        )


def affine_transform(
    params: MatrixNormalParams, a: np.ndarray, b: np.ndarray
) -> MatrixNormalParams:
    """Distribution of A X B for X ~ MN: MN(A M B; A Sigma A^T, B^T Psi B).

    a must have full row rank (r <= n rows), b full column rank (s <= m cols).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != params.n:
        raise ValueError(f"a has {a.shape[1]} columns, expected {params.n}")
    if b.shape[0] != params.m:
        raise ValueError(f"b has {b.shape[0]} rows, expected {params.m}")
    r, s = a.shape[0], b.shape[1]
    if r > params.n or s > params.m:
        raise ValueError("a (b) may not have more rows (columns) than the state")
    _require_full_rank(a, r, "a")
    _require_full_rank(b, s, "b")
    return MatrixNormalParams(
        mean=a @ params.mean @ b,
        row_cov=a @ params.row_cov @ a.T,
        col_cov=b.T @ params.col_cov @ b,
    )


def conditional(joint: JointBlockParams, y_obs: np.ndarray) -> MatrixNormalParams:
    """Condition the top block on an observed bottom block.

    Returns MN(M_X + S_XY S_Y^-1 (Y - M_Y); S_X - S_XY S_Y^-1 S_XY^T, Psi).
    """
    y_obs = np.asarray(y_obs, dtype=float)
    if y_obs.shape != joint.mean_y.shape:
        raise ValueError(
            f"y_obs shape {y_obs.shape} does not match mean_y {joint.mean_y.shape}"
        )
    chol_y = _checked_cholesky(joint.cov_y, "cov_y")
    # gain = cov_xy @ cov_y^-1 through two triangular solves
    half = solve_triangular(chol_y, joint.cov_xy.T, lower=True)
    gain = solve_triangular(chol_y.T, half, lower=False).T
    mean = joint.mean_x + gain @ (y_obs - joint.mean_y)
    row_cov = joint.cov_x - gain @ joint.cov_xy.T
    row_cov = 0.5 * (row_cov + row_cov.T)
    return MatrixNormalParams(mean=mean, row_cov=row_cov, col_cov=joint.col_cov)
