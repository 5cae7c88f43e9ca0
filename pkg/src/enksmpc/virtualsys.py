"""Virtual auxiliary system turning reference-tracking MPC into state smoothing.

The trick: augment the state to [X; U; dU], drive the control increment with
noise W, and pretend the references [X_ref; U_ref] are noisy observations of
[X; U].  With noise covariances matched to the MPC weights, the smoothed
trajectory of this virtual system maximizes the same objective the MPC
minimizes, so estimating it IS solving the control problem.

Covariance mapping used throughout: a weight matrix G on a quadratic term
tr[E^T G^-1 E] corresponds to noise MN(0; G, I_m) -- weight on the row
covariance, identity on the column covariance.  All noise channels then
share the column covariance I_m, which is the shared-Psi structure the
ensemble smoother relies on.  The `scale` knob multiplies every covariance
equally, trading exploration against exploitation without changing the
weight ratios; the smoothed mean is invariant to it in the linear-Gaussian
limit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from enksmpc.dynamics import MatrixDynamics
from enksmpc.matvar import MatrixNormalParams

__all__ = [
    "AugmentedState",
    "MpcWeights",
    "ConstraintSpec",
    "InputTransform",
    "VirtualSystem",
    "build_virtual_system",
    "virtual_transition",
    "virtual_observe",
    "stage_cost",
    "barrier_observe",
    "softplus_barrier",
    "augment_input",
    "reconstruct_input",
]

logger = logging.getLogger(__name__)

_PIVOT_TOL = 1e-10


@dataclass
class AugmentedState:
    """One time slice of the virtual state: field x, control u, increment du."""

    x: np.ndarray
    u: np.ndarray
    du: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.du = np.asarray(self.du, dtype=float)
        if not (self.x.ndim == self.u.ndim == self.du.ndim == 2):
            raise ValueError("x, u, du must be 2-D matrices")
        if self.u.shape != self.du.shape:
            raise ValueError("u and du must have identical shape")
        if self.x.shape[1] != self.u.shape[1]:
            raise ValueError("x and u must share the column count")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def l(self) -> int:
        return self.u.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def packed(self) -> np.ndarray:
        return np.vstack([self.x, self.u, self.du])

    @classmethod
    def from_packed(cls, packed: np.ndarray, n: int, l: int) -> "AugmentedState":
        packed = np.asarray(packed, dtype=float)
        if packed.shape[0] != n + 2 * l:
            raise ValueError(f"packed rows {packed.shape[0]} != n + 2l = {n + 2 * l}")
        return cls(packed[:n], packed[n : n + l], packed[n + l :])


@dataclass
class MpcWeights:
    """Tracking weights and references for the quadratic stage cost."""

    r: np.ndarray
    q_u: np.ndarray
    q_du: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        for name in ("r", "q_u", "q_du", "x_ref", "u_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        for name in ("r", "q_u", "q_du"):
            mat = getattr(self, name)
            try:
                np.linalg.cholesky(0.5 * (mat + mat.T))
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(f"{name} must be SPD: {exc}") from exc
        n = self.r.shape[0]
        l = self.q_u.shape[0]
        if self.q_du.shape != (l, l):
            raise ValueError("q_du must match q_u in size")
        if self.x_ref.shape[0] != n or self.u_ref.shape[0] != l:
            raise ValueError("references inconsistent with weight sizes")
        if self.x_ref.shape[1] != self.u_ref.shape[1]:
            raise ValueError("x_ref and u_ref must share the column count")


@dataclass
class ConstraintSpec:
    """Scalar inequality g(state) <= 0 observed through a softplus barrier."""

    g: Callable[[AugmentedState], float]
    alpha: float = 10.0
    beta: float = 50.0
    noise_var: float = 1e-4

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0 or self.noise_var <= 0:
            raise ValueError("alpha, beta, noise_var must be positive")


@dataclass
class InputTransform:
    """Right transform widening a narrow control u (l x c) to U = u t (l x m)."""

    t: np.ndarray

    def __post_init__(self) -> None:
        self.t = np.atleast_2d(np.asarray(self.t, dtype=float))
        gram = self.t @ self.t.T
        pivots = np.linalg.eigvalsh(0.5 * (gram + gram.T))
        if pivots.min() <= _PIVOT_TOL * max(1.0, pivots.max()):
            raise np.linalg.LinAlgError("t @ t.T is not invertible")
        # precomputed right inverse t^T (t t^T)^-1
        self._right_inv = np.linalg.solve(gram, self.t).T


def augment_input(u: np.ndarray, t: InputTransform) -> np.ndarray:
    """Widen u (l x c) to u @ t with shared column count m."""
    return np.asarray(u, dtype=float) @ t.t


def reconstruct_input(u_big: np.ndarray, t: InputTransform) -> np.ndarray:
    """Recover the narrow control: U t^T (t t^T)^-1; inverts augment_input."""
    return np.asarray(u_big, dtype=float) @ t._right_inv


@dataclass
class VirtualSystem:
    """Dynamics plus the noise channels implementing the weight mapping.

    process_noise drives the control increments; obs_noise_x / obs_noise_u
    perturb the reference observations.  shared_col_cov is the column
    covariance all channels share (identity unless overridden); the ensemble
    smoother reads lambda = 1/tr(shared_col_cov) from it.
    """

    model: MatrixDynamics
    weights: MpcWeights
    constraint: Optional[ConstraintSpec] = None
    shared_col_cov: np.ndarray = None
    process_noise: Optional[MatrixNormalParams] = field(init=False, default=None)
    obs_noise_x: Optional[MatrixNormalParams] = field(init=False, default=None)
    obs_noise_u: Optional[MatrixNormalParams] = field(init=False, default=None)
    steady_state_residual: float = field(init=False, default=float("nan"))

    def __post_init__(self) -> None:
        w = self.weights
        n, l = w.r.shape[0], w.q_u.shape[0]
        m = w.x_ref.shape[1]
        if self.model.state_rows != n or self.model.input_rows != l:
            raise ValueError(
                f"model ({self.model.state_rows} x {self.model.state_cols}, inputs "
                f"{self.model.input_rows}) inconsistent with weights (n={n}, l={l})"
            )
        if self.model.state_cols != m:
            raise ValueError("model column count disagrees with references")
        if self.shared_col_cov is None:
            self.shared_col_cov = np.eye(m)
        if w.scale > 0:
            self.process_noise = MatrixNormalParams(
                np.zeros((l, m)), w.scale * w.q_du, np.eye(m)
            )
            self.obs_noise_x = MatrixNormalParams(
                np.zeros((n, m)), w.scale * w.r, np.eye(m)
            )
            self.obs_noise_u = MatrixNormalParams(
                np.zeros((l, m)), w.scale * w.q_u, np.eye(m)
            )
        self.steady_state_residual = float(
            np.linalg.norm(w.x_ref - self.model.step(w.x_ref, w.u_ref))
        )
        logger.debug(
            "virtual system built: n=%d l=%d m=%d, reference steady-state residual %.3e",
            n, l, m, self.steady_state_residual,
        )

    @property
    def n(self) -> int:
        return self.weights.r.shape[0]

    @property
    def l(self) -> int:
        return self.weights.q_u.shape[0]

    @property
    def m(self) -> int:
        return self.weights.x_ref.shape[1]

    @property
    def obs_rows(self) -> int:
        return self.n + self.l + (1 if self.constraint is not None else 0)

    def observation_matrix(self) -> np.ndarray:
        """Explicit H = [I 0 0; 0 I 0] selecting the x and u blocks."""
        n, l = self.n, self.l
        h = np.zeros((n + l, n + 2 * l))
        h[:n, :n] = np.eye(n)
        h[n:, n : n + l] = np.eye(l)
        return h

    def reference_observation(self) -> np.ndarray:
        """Stacked [x_ref; u_ref], plus the zero barrier row when constrained."""
        rows = [self.weights.x_ref, self.weights.u_ref]
        if self.constraint is not None:
            rows.append(np.zeros((1, self.m)))
        return np.vstack(rows)


def build_virtual_system(
    model: MatrixDynamics,
    weights: MpcWeights,
    constraint: Optional[ConstraintSpec] = None,
    shared_col_cov: np.ndarray | None = None,
) -> VirtualSystem:
    """Wire a dynamics model and MPC weights into the virtual system."""
    return VirtualSystem(
        model=model, weights=weights, constraint=constraint, shared_col_cov=shared_col_cov
    )


def virtual_transition(
    s: AugmentedState, w: np.ndarray, model: MatrixDynamics
) -> AugmentedState:
    """One virtual step: x' = step(x, u); u' = u + w; du' = w.

    The single increment sample w fills both the u and du noise slots.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != s.u.shape:
        raise ValueError(f"w shape {w.shape} != u shape {s.u.shape}")
    return AugmentedState(x=model.step(s.x, s.u), u=s.u + w, du=w.copy())


def virtual_observe(s: AugmentedState, v_x: np.ndarray, v_u: np.ndarray) -> np.ndarray:
    """Noisy observation [x + v_x; u + v_u] of the tracked blocks."""
    return np.vstack([s.x + v_x, s.u + v_u])


def stage_cost(s: AugmentedState, weights: MpcWeights) -> float:
    """Quadratic tracking cost of one slice under inverse-weight metrics."""
    ex = s.x - weights.x_ref
    eu = s.u - weights.u_ref
    cx = float(np.trace(ex.T @ np.linalg.solve(weights.r, ex)))
    cu = float(np.trace(eu.T @ np.linalg.solve(weights.q_u, eu)))
    cdu = float(np.trace(s.du.T @ np.linalg.solve(weights.q_du, s.du)))
    return cx + cu + cdu


def softplus_barrier(value: float, alpha: float, beta: float) -> float:
    """(1/alpha) log(1 + exp(beta * value)), with the linear asymptote past 30."""
    z = beta * value
    if z > 30.0:
        return z / alpha
    return math.log1p(math.exp(z)) / alpha


def barrier_observe(
    s: AugmentedState, spec: ConstraintSpec, rng: np.random.Generator
) -> float:
    """Noisy barrier reading of the constraint; reference value is 0."""
    clean = softplus_barrier(float(spec.g(s)), spec.alpha, spec.beta)
    return clean + math.sqrt(spec.noise_var) * rng.standard_normal()
