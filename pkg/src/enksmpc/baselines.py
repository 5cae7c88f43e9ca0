"""Reference implementations the matrix smoother is measured against.

Three independent code paths live here:

* a flat-state (vectorized) single-pass stochastic EnKS that must coincide
  with the matrix-variate smoother for single-column states when both draw
  from the same noise substreams -- and whose observation covariance is
  (obs_rows*m)^2 entries instead of obs_rows^2, the whole point of the
  matrix form;
* a closed-form batch Gaussian smoother for linear dynamics, solving the
  MAP normal equations directly (no ensembles, no recursions), used as the
  convergence oracle;
* an information-theoretic sampling controller (MPPI-style): perturb a
  nominal control sequence, roll out, and exponentially reweight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from enksmpc.dynamics import LinearDynamics, MatrixDynamics
from enksmpc.enks import CH_VU, CH_VX, CH_W
from enksmpc.matvar import NoiseStreams, transform_standard_normal
from enksmpc.virtualsys import AugmentedState, MpcWeights, VirtualSystem

__all__ = [
    "MemoryBudgetError",
    "VectorEnsemble",
    "VectorSmootherReport",
    "vector_enks_smooth",
    "covariance_entry_counts",
    "exact_linear_smoother",
    "ItMpcConfig",
    "it_mpc_plan",
    "it_mpc_step",
    "ItMpcController",
    "tracking_cost",
]

_JITTER_REL = 1e-9
_JITTER_FLOOR = 1e-30


class MemoryBudgetError(MemoryError):
    """Predicted covariance storage exceeds the configured budget."""


def covariance_entry_counts(obs_rows: int, m: int) -> dict:
    """Observation-covariance entry counts for the two formulations."""
    return {"vector": (obs_rows * m) ** 2, "matrix": obs_rows**2}


@dataclass
class VectorEnsemble:
    """Flat trajectory members; each slice is stored as vec(slice^T) = ravel."""

    members: np.ndarray  # (N, (t+1) * slice_rows * m)
    mean: np.ndarray
    t: int
    n_x: int
    n_u: int
    n_cols: int

    @property
    def slice_rows(self) -> int:
        return self.n_x + 2 * self.n_u

    def unvectorize(self, member: int) -> np.ndarray:
        """Recover the (t+1, slice_rows, m) matrix slices of one member."""
        return self.members[member].reshape(self.t + 1, self.slice_rows, self.n_cols)


@dataclass
class VectorSmootherReport:
    obs_cov_entries: int
    cross_cov_entries: int
    peak_tracked_bytes: int
    jitter_events: int


def _predicted_update_bytes(n_members: int, traj_len: int, obs_len: int) -> int:
    # observation covariance + cross covariance + gain + members + observations
    doubles = (
        obs_len * obs_len
        + 2 * traj_len * obs_len
        + n_members * (traj_len + 2 * obs_len)
    )
    return 8 * doubles


def vector_enks_smooth(
    x0: AugmentedState,
    y_refs: np.ndarray,
    vs: VirtualSystem,
    h: int,
    n_members: int,
    streams: NoiseStreams,
    memory_budget_bytes: Optional[int] = None,
) -> tuple[np.ndarray, VectorSmootherReport]:
    """Single-pass stochastic EnKS on the vectorized virtual system.

    Same problem, noise substreams, and jitter rule as the matrix smoother;
    the state is flattened so every covariance is a plain outer product.
    Raises MemoryBudgetError before allocating covariances that would exceed
    the budget; the report carries the peak projected allocation either way.
    """
    if vs.constraint is not None:
        raise NotImplementedError("vector baseline does not support constraints")
    if n_members < 2:
        raise ValueError("need at least 2 ensemble members")
    y_refs = np.asarray(y_refs, dtype=float)
    if y_refs.ndim == 2:
        y_refs = np.broadcast_to(y_refs, (h, *y_refs.shape))

    n, l, m = x0.n, x0.l, x0.m
    d = n + 2 * l
    obs_len = (n + l) * m
    ens = VectorEnsemble(
        members=np.broadcast_to(x0.packed.ravel(), (n_members, d * m)).copy(),
        mean=x0.packed.ravel().copy(),
        t=0,
        n_x=n,
        n_u=l,
        n_cols=m,
    )
    peak = 0
    jitter_events = 0

    for step in range(1, h + 1):
        # predict: unflatten the newest slice, step it, draw the same W draws
        tail = ens.members[:, -d * m :].reshape(n_members, d, m)
        x, u = tail[:, :n, :], tail[:, n : n + l, :]
        if vs.process_noise is None:
            w = np.zeros((n_members, l, m))
        else:
            z = np.empty((n_members, l, m))
            for i in range(n_members):
                z[i] = streams.substream(i, step, CH_W).standard_normal((l, m))
            w = transform_standard_normal(vs.process_noise, z)
        new_slice = np.concatenate([vs.model.step(x, u), u + w, w], axis=1)
        ens.members = np.hstack([ens.members, new_slice.reshape(n_members, d * m)])
        ens.t = step

        # update on the flattened observation
        if vs.obs_noise_x is None:
            v_x = np.zeros((n_members, n, m))
            v_u = np.zeros((n_members, l, m))
        else:
            zx = np.empty((n_members, n, m))
            zu = np.empty((n_members, l, m))
            for i in range(n_members):
                zx[i] = streams.substream(i, step, CH_VX).standard_normal((n, m))
                zu[i] = streams.substream(i, step, CH_VU).standard_normal((l, m))
            v_x = transform_standard_normal(vs.obs_noise_x, zx)
            v_u = transform_standard_normal(vs.obs_noise_u, zu)
        obs = np.concatenate(
            [new_slice[:, :n, :] + v_x, new_slice[:, n : n + l, :] + v_u], axis=1
        ).reshape(n_members, obs_len)

        traj_len = ens.members.shape[1]
        needed = _predicted_update_bytes(n_members, traj_len, obs_len)
        peak = max(peak, needed)
        if memory_budget_bytes is not None and needed > memory_budget_bytes:
            raise MemoryBudgetError(
                f"vector smoother needs ~{needed / 1e9:.2f} GB at step {step}, "
                f"budget is {memory_budget_bytes / 1e9:.2f} GB"
            )

        obs_mean = obs.mean(axis=0)
        mean = ens.members.mean(axis=0)
        dev_y = obs - obs_mean
        dev_x = ens.members - mean
        sigma_y = (dev_y.T @ dev_y) / n_members
        sigma_y = 0.5 * (sigma_y + sigma_y.T)
        sigma_xy = (dev_x.T @ dev_y) / n_members
        try:
            factor = cho_factor(sigma_y, lower=True)
        except np.linalg.LinAlgError:
            jitter = _JITTER_REL * np.trace(sigma_y) / obs_len + _JITTER_FLOOR
            factor = cho_factor(sigma_y + jitter * np.eye(obs_len), lower=True)
            jitter_events += 1
        gain = cho_solve(factor, sigma_xy.T).T
        y_target = y_refs[step - 1].ravel()
        ens.members = ens.members + (y_target - obs) @ gain.T
        ens.mean = ens.members.mean(axis=0)

    report = VectorSmootherReport(
        obs_cov_entries=obs_len**2,
        cross_cov_entries=(h + 1) * d * m * obs_len,
        peak_tracked_bytes=peak,
        jitter_events=jitter_events,
    )
    return ens.mean.reshape(h + 1, d, m), report


def exact_linear_smoother(x0: AugmentedState, vs: VirtualSystem, h: int) -> np.ndarray:
    """Closed-form MAP trajectory of the virtual system for linear dynamics.

    Eliminates the dynamics: the trajectory is affine in the stacked
    increments, so the posterior mode solves one least-squares system.
    Columns decouple (shared identity column covariance) and are solved as a
    joint matrix right-hand side.  Returns (h+1, n+2l, m) slices.
    """
    model = vs.model
    if not isinstance(model, LinearDynamics):
        raise TypeError("exact smoother requires LinearDynamics")
    a, b = model.a, model.b
    w = vs.weights
    n, l, m = x0.n, x0.l, x0.m
    hl = h * l

    r_inv = np.linalg.inv(w.r)
    qu_inv = np.linalg.inv(w.q_u)
    qdu_inv = np.linalg.inv(w.q_du)

    # U_t = U_0 + S_t Omega, X_t = c_t + G_t Omega with Omega = [w_1; ...; w_h]
    s_rows = np.zeros((h + 1, l, hl))
    for t in range(1, h + 1):
        s_rows[t] = s_rows[t - 1]
        s_rows[t][:, (t - 1) * l : t * l] = np.eye(l)
    g_rows = np.zeros((h + 1, n, hl))
    c_rows = np.zeros((h + 1, n, m))
    c_rows[0] = x0.x
    for t in range(1, h + 1):
        g_rows[t] = a @ g_rows[t - 1] + b @ s_rows[t - 1]
        c_rows[t] = a @ c_rows[t - 1] + b @ x0.u

    lhs = np.kron(np.eye(h), qdu_inv)
    rhs = np.zeros((hl, m))
    for t in range(1, h + 1):
        lhs += g_rows[t].T @ r_inv @ g_rows[t] + s_rows[t].T @ qu_inv @ s_rows[t]
        rhs += g_rows[t].T @ r_inv @ (w.x_ref - c_rows[t])
        rhs += s_rows[t].T @ qu_inv @ (w.u_ref - x0.u)
    omega = np.linalg.solve(lhs, rhs)

    out = np.empty((h + 1, n + 2 * l, m))
    out[0] = x0.packed
    for t in range(1, h + 1):
        x_t = c_rows[t] + g_rows[t] @ omega
        u_t = x0.u + s_rows[t] @ omega
        du_t = omega[(t - 1) * l : t * l]
        out[t] = np.vstack([x_t, u_t, du_t])
    return out


@dataclass
class ItMpcConfig:
    """Knobs of the information-theoretic sampling controller."""

    rollouts: int
    temperature: float
    noise_cov: float
    horizon: int

    def __post_init__(self) -> None:
        if self.rollouts < 1:
            raise ValueError("need at least 1 rollout")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.noise_cov <= 0 or self.horizon < 1:
            raise ValueError("noise_cov must be positive and horizon >= 1")


def tracking_cost(weights: MpcWeights) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Batched quadratic stage cost matching the smoother's objective."""

    def cost(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        ex = x - weights.x_ref
        eu = u - weights.u_ref
        cx = (ex * np.linalg.solve(weights.r, ex)).sum(axis=(-2, -1))
        cu = (eu * np.linalg.solve(weights.q_u, eu)).sum(axis=(-2, -1))
        return cx + cu

    return cost


def it_mpc_plan(
    plant_state: np.ndarray,
    prev_u_sequence: np.ndarray,
    model: MatrixDynamics,
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray],
    cfg: ItMpcConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exponentially-weighted average of perturbed control sequences.

    Perturbs the nominal (horizon, l, m) sequence with Gaussian noise per
    rollout, accumulates horizon costs through the model, and weights each
    rollout by exp(-(cost - min cost) / temperature).  Weights sum to one and
    do not change when a constant is added to all costs; below temperature
    1e-12 the minimum-cost rollout is returned outright.
    """
    prev_u_sequence = np.asarray(prev_u_sequence, dtype=float)
    if prev_u_sequence.shape[0] != cfg.horizon:
        raise ValueError(
            f"nominal sequence has {prev_u_sequence.shape[0]} steps, expected {cfg.horizon}"
        )
    k = cfg.rollouts
    eps = np.sqrt(cfg.noise_cov) * rng.standard_normal((k, *prev_u_sequence.shape))
    candidates = prev_u_sequence[None] + eps

    x = np.broadcast_to(plant_state, (k, *plant_state.shape)).copy()
    costs = np.zeros(k)
    for t in range(cfg.horizon):
        x = model.step(x, candidates[:, t])
        costs += cost(x, candidates[:, t])

    costs = np.where(np.isnan(costs), np.inf, costs)
    finite = np.isfinite(costs)
    if not finite.any():
        raise FloatingPointError("all rollout costs are infinite; weighting degenerate")
    if cfg.temperature < 1e-12:
        return candidates[int(np.argmin(costs))]
    shifted = costs - costs[finite].min()
    weights = np.where(finite, np.exp(-shifted / cfg.temperature), 0.0)
    weights /= weights.sum()
    return np.tensordot(weights, candidates, axes=(0, 0))


def it_mpc_step(
    plant_state: np.ndarray,
    prev_u_sequence: np.ndarray,
    model: MatrixDynamics,
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray],
    cfg: ItMpcConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """First action of the reweighted sequence."""
    return it_mpc_plan(plant_state, prev_u_sequence, model, cost, cfg, rng)[0]


class ItMpcController:
    """Receding-horizon wrapper keeping the shifted nominal sequence."""

    def __init__(self, model: MatrixDynamics, cost, cfg: ItMpcConfig):
        self.model = model
        self.cost = cost
        self.cfg = cfg
        self.nominal = np.zeros((cfg.horizon, model.input_rows, model.state_cols))

    def step(self, plant_state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        plan = it_mpc_plan(plant_state, self.nominal, self.model, self.cost, self.cfg, rng)
        self.nominal = np.concatenate([plan[1:], plan[-1:]], axis=0)
        return plan[0]
