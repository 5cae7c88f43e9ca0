"""Matrix-variate single-pass ensemble Kalman smoother.

The smoother carries N whole-trajectory samples.  Each member is the
row-stacked sequence of augmented slices from the horizon start up to the
current step, a ((t+1)(n+2l)) x m matrix; the member axis comes first, so
every covariance sum is one batched matrix product over (member, column)
pairs.  One horizon step is:

  predict   advance every member through the virtual dynamics with its own
            process-noise draw and concatenate the new slice;
  update    perturb each member's observation of the new slice, form the
            trajectory-to-observation cross covariance, and shift every
            member's ENTIRE trajectory by gain times its own innovation.

Because the cross covariance couples past slices to the newest observation,
each update re-estimates the whole history: smoothing happens in a single
forward sweep with no backward pass.

Covariances are scaled by lambda = 1/tr(shared column covariance); lambda
multiplies both the observation covariance and the cross covariance, so it
cancels exactly in the gain and the mean update is invariant to it.
Tracking the trajectory covariance is optional and feeds nothing back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from enksmpc.matvar import MatrixNormalParams, NoiseStreams, transform_standard_normal
from enksmpc.virtualsys import AugmentedState, VirtualSystem, barrier_observe

__all__ = [
    "TrajectoryEnsemble",
    "SmootherCovariances",
    "CH_W",
    "CH_VX",
    "CH_VU",
    "CH_EPS",
    "init_ensemble",
    "predict",
    "update",
    "smooth_horizon",
]

# noise-channel ids used in substream derivation (member, time, channel)
CH_W, CH_VX, CH_VU, CH_EPS = 0, 1, 2, 3

_JITTER_REL = 1e-9
_JITTER_FLOOR = 1e-30


@dataclass
class TrajectoryEnsemble:
    """N trajectory samples with their running mean.

    members has shape (N, (t+1)*slice_rows, m); mean is the member average
    and is refreshed by every operation.
    """

    members: np.ndarray
    mean: np.ndarray
    t: int
    lam: float
    n_x: int
    n_u: int
    jitter_events: int = 0

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def slice_rows(self) -> int:
        return self.n_x + 2 * self.n_u

    @property
    def n_cols(self) -> int:
        return self.members.shape[2]

    def slices(self) -> np.ndarray:
        """Mean trajectory reshaped to (t+1, slice_rows, m)."""
        return self.mean.reshape(self.t + 1, self.slice_rows, self.n_cols)

    def last_slice_blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, u, du) batches of the newest slice, each (N, rows, m)."""
        d = self.slice_rows
        tail = self.members[:, -d:, :]
        n, l = self.n_x, self.n_u
        return tail[:, :n, :], tail[:, n : n + l, :], tail[:, n + l :, :]


@dataclass
class SmootherCovariances:
    """Optional lambda-scaled covariance tracking alongside the ensemble."""

    sigma_traj: np.ndarray
    sigma_pred: Optional[np.ndarray] = None
    sigma_cross: Optional[np.ndarray] = None


def init_ensemble(
    x0: AugmentedState, n_members: int, shared_col_cov: np.ndarray | None = None
) -> TrajectoryEnsemble:
    """Start all members as identical copies of the known current slice.

    Spread enters later through process noise; the initial slice therefore
    carries no ensemble variance and is never moved by updates.
    """
    if n_members < 2:
        raise ValueError("need at least 2 ensemble members")
    packed = x0.packed
    if shared_col_cov is None:
        lam = 1.0 / packed.shape[1]
    else:
        lam = 1.0 / float(np.trace(shared_col_cov))
    members = np.broadcast_to(packed, (n_members, *packed.shape)).copy()
    return TrajectoryEnsemble(
        members=members,
        mean=packed.copy(),
        t=0,
        lam=lam,
        n_x=x0.n,
        n_u=x0.l,
    )


def _member_noise(
    params: Optional[MatrixNormalParams],
    streams: NoiseStreams,
    t: int,
    channel: int,
    n_members: int,
    shape: tuple[int, int],
) -> np.ndarray:
    """Per-member draws from substreams (member, time, channel), colored."""
    if params is None:
        return np.zeros((n_members, *shape))
    z = np.empty((n_members, *shape))
    for i in range(n_members):
        z[i] = streams.substream(i, t, channel).standard_normal(shape)
    return transform_standard_normal(params, z)


def _pair_covariance(dev_a: np.ndarray, dev_b: np.ndarray, lam: float) -> np.ndarray:
    """(lam/N) sum_i dev_a_i dev_b_i^T as one flattened matrix product."""
    n = dev_a.shape[0]
    a = dev_a.transpose(1, 0, 2).reshape(dev_a.shape[1], -1)
    b = dev_b.transpose(1, 0, 2).reshape(dev_b.shape[1], -1)
    return (lam / n) * (a @ b.T)


def predict(
    ens: TrajectoryEnsemble,
    vs: VirtualSystem,
    streams: NoiseStreams,
    cov: Optional[SmootherCovariances] = None,
) -> TrajectoryEnsemble:
    """Advance every member one virtual step and concatenate the new slice."""
    t_next = ens.t + 1
    x, u, _ = ens.last_slice_blocks()
    w = _member_noise(
        vs.process_noise, streams, t_next, CH_W, ens.n_members, (ens.n_u, ens.n_cols)
    )
    new_slice = np.concatenate([vs.model.step(x, u), u + w, w], axis=1)
    ens.members = np.concatenate([ens.members, new_slice], axis=1)
    ens.t = t_next
    ens.mean = ens.members.mean(axis=0)

    if cov is not None:
        dev_new = new_slice - new_slice.mean(axis=0)
        dev_traj = ens.members - ens.mean
        cov.sigma_pred = _pair_covariance(dev_new, dev_new, ens.lam)
        cov.sigma_cross = _pair_covariance(dev_traj, dev_new, ens.lam)
        d = ens.slice_rows
        old_rows = cov.sigma_traj.shape[0]
        block = np.zeros((old_rows + d, old_rows + d))
        block[:old_rows, :old_rows] = cov.sigma_traj
        block[:old_rows, old_rows:] = cov.sigma_cross[:old_rows]
        block[old_rows:, :old_rows] = cov.sigma_cross[:old_rows].T
        block[old_rows:, old_rows:] = cov.sigma_pred
        cov.sigma_traj = block
    return ens


def _observe_members(
    ens: TrajectoryEnsemble, vs: VirtualSystem, streams: NoiseStreams, t: int
) -> np.ndarray:
    """Perturbed observations (N, obs_rows, m): one noisy copy per member."""
    x, u, du = ens.last_slice_blocks()
    v_x = _member_noise(
        vs.obs_noise_x, streams, t, CH_VX, ens.n_members, (ens.n_x, ens.n_cols)
    )
    v_u = _member_noise(
        vs.obs_noise_u, streams, t, CH_VU, ens.n_members, (ens.n_u, ens.n_cols)
    )
    obs = np.concatenate([x + v_x, u + v_u], axis=1)
    if vs.constraint is not None:
        rows = np.empty((ens.n_members, 1, ens.n_cols))
        for i in range(ens.n_members):
            state = AugmentedState(x[i], u[i], du[i])
            rows[i, 0, :] = barrier_observe(
                state, vs.constraint, streams.substream(i, t, CH_EPS)
            )
        obs = np.concatenate([obs, rows], axis=1)
    return obs


def update(
    ens: TrajectoryEnsemble,
    y_ref: np.ndarray,
    vs: VirtualSystem,
    streams: NoiseStreams,
    cov: Optional[SmootherCovariances] = None,
) -> TrajectoryEnsemble:
    """Kalman-shift every member's whole trajectory toward the reference.

    Each member gets its own perturbed observation; the shared gain is the
    trajectory-observation cross covariance times the inverse observation
    covariance.  A singular observation covariance is jittered
    (1e-9 * tr / rows on the diagonal) and counted in ens.jitter_events.
    """
    y_ref = np.asarray(y_ref, dtype=float)
    obs = _observe_members(ens, vs, streams, ens.t)
    if y_ref.shape != obs.shape[1:]:
        raise ValueError(f"y_ref shape {y_ref.shape} != observation {obs.shape[1:]}")

    obs_mean = obs.mean(axis=0)
    dev_y = obs - obs_mean
    dev_traj = ens.members - ens.mean
    sigma_y = _pair_covariance(dev_y, dev_y, ens.lam)
    sigma_y = 0.5 * (sigma_y + sigma_y.T)
    sigma_xy = _pair_covariance(dev_traj, dev_y, ens.lam)

    try:
        factor = cho_factor(sigma_y, lower=True)
    except np.linalg.LinAlgError:
        p = sigma_y.shape[0]
        jitter = _JITTER_REL * np.trace(sigma_y) / p + _JITTER_FLOOR
        factor = cho_factor(sigma_y + jitter * np.eye(p), lower=True)
        ens.jitter_events += 1

    gain = cho_solve(factor, sigma_xy.T).T
    ens.members = ens.members + gain @ (y_ref - obs)
    ens.mean = ens.members.mean(axis=0)

    if cov is not None:
        dev = ens.members - ens.mean
        cov.sigma_traj = _pair_covariance(dev, dev, ens.lam)
    return ens


def smooth_horizon(
    x0: AugmentedState,
    y_refs: np.ndarray,
    vs: VirtualSystem,
    h: int,
    n_members: int,
    streams: NoiseStreams,
    track_cov: bool = False,
) -> tuple[np.ndarray, Optional[SmootherCovariances]]:
    """Run the forward predict/update sweep over an h-step horizon.

    y_refs is either one (obs_rows x m) matrix reused every step or an
    (h, obs_rows, m) stack.  Returns the mean trajectory as
    (h+1, n+2l, m) slices plus covariances when tracking is on.
    """
    if h < 1:
        raise ValueError("horizon must be at least 1")
    y_refs = np.asarray(y_refs, dtype=float)
    if y_refs.ndim == 2:
        y_refs = np.broadcast_to(y_refs, (h, *y_refs.shape))
    elif y_refs.shape[0] != h:
        raise ValueError(f"need {h} reference observations, got {y_refs.shape[0]}")

    ens = init_ensemble(x0, n_members, shared_col_cov=vs.shared_col_cov)
    cov = SmootherCovariances(sigma_traj=np.zeros((ens.slice_rows,) * 2)) if track_cov else None
    for step in range(h):
        predict(ens, vs, streams, cov=cov)
        update(ens, y_refs[step], vs, streams, cov=cov)
    return ens.slices(), cov
