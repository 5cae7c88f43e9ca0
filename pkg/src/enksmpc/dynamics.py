"""Matrix-valued dynamics models: a linear test system and a 2-D Burgers solver.

Every model exposes the same contract: `state_rows` x `state_cols` state
matrices, `input_rows` x `state_cols` control matrices, and a deterministic
`step(x, u)`.  Steps broadcast over leading batch axes so that whole
ensembles or rollout bundles advance in one call.

The Burgers solver integrates

    d(phi)/dt + phi . grad(phi) = nu laplace(phi) + f

on the unit square with forward-Euler time stepping, second-order central
differences for diffusion, first-order upwind differences for advection
(direction picked per point by the sign of the local velocity), and
homogeneous Neumann boundaries via copy-neighbor ghost cells.  The two
velocity channels are packed as one (2n x n) matrix, phi_x above phi_y, so
state, control, and references share the column count n.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

__all__ = [
    "MatrixDynamics",
    "LinearDynamics",
    "linear_step",
    "BurgersConfig",
    "BurgersField",
    "BurgersDynamics",
    "CflError",
    "burgers_step",
    "make_initial_field",
]


@runtime_checkable
class MatrixDynamics(Protocol):
    """Deterministic matrix-in, matrix-out one-step transition map."""

    state_rows: int
    state_cols: int
    input_rows: int

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Advance state x (..., state_rows, state_cols) under control u."""
        ...


def linear_step(x: np.ndarray, u: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """One step of x' = a x + b u; broadcasts over leading axes of x and u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != u.shape[-1]:
        raise ValueError(f"x and u must share columns, got {x.shape} and {u.shape}")
    if a.shape[1] != x.shape[-2] or b.shape[1] != u.shape[-2]:
        raise ValueError(
            f"a {a.shape} / b {b.shape} inconsistent with x {x.shape}, u {u.shape}"
        )
    return a @ x + b @ u


@dataclass
class LinearDynamics:
    """x' = a x + b u with fixed system matrices."""

    a: np.ndarray
    b: np.ndarray
    state_cols: int

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("a must be square")
        if self.b.shape[0] != self.a.shape[0]:
            raise ValueError("b rows must match a")
        self.state_rows = self.a.shape[0]
        self.input_rows = self.b.shape[1]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return linear_step(x, u, self.a, self.b)


class CflError(RuntimeError):
    """Stability diagnostic exceeded its bound (or the field went non-finite)."""


@dataclass
class BurgersConfig:
    """Grid and solver settings for the 2-D Burgers system.

    control_mode 'boundary' takes a 2 x n force (rows f1, f2 added to the
    y=1 edge of phi_x and phi_y); 'pointwise' takes a full 2n x n force.
    The controller acts once per `substeps` solver steps.
    """

    grid_n: int = 32
    nu: float = 0.005
    dt: float = 0.001
    control_mode: str = "boundary"
    substeps: int = 1

    def __post_init__(self) -> None:
        if self.grid_n < 8:
            raise ValueError("grid_n must be at least 8")
        if self.nu <= 0 or self.dt <= 0:
            raise ValueError("nu and dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        if self.control_mode not in ("boundary", "pointwise"):
            raise ValueError(f"unknown control_mode {self.control_mode!r}")

    @property
    def dx(self) -> float:
        return 1.0 / (self.grid_n - 1)


@dataclass
class BurgersField:
    """Velocity field (phi_x, phi_y) on an n x n grid, with CFL diagnostics.

    `diffusion_number` and `advection_number` hold the stability diagnostics
    nu*dt/dx^2 and max|phi|*dt/dx recorded by the step that produced the field.
    """

    phi_x: np.ndarray
    phi_y: np.ndarray
    diffusion_number: float = field(default=0.0, compare=False)
    advection_number: float = field(default=0.0, compare=False)

    def __post_init__(self) -> None:
        self.phi_x = np.asarray(self.phi_x, dtype=float)
        self.phi_y = np.asarray(self.phi_y, dtype=float)
        if self.phi_x.shape != self.phi_y.shape or self.phi_x.ndim != 2:
            raise ValueError("phi_x and phi_y must be equal-shape 2-D arrays")
        if not (np.isfinite(self.phi_x).all() and np.isfinite(self.phi_y).all()):
            raise CflError("field contains non-finite entries")

    @property
    def packed(self) -> np.ndarray:
        return np.vstack([self.phi_x, self.phi_y])

    @classmethod
    def from_packed(cls, packed: np.ndarray, **kwargs) -> "BurgersField":
        packed = np.asarray(packed, dtype=float)
        n = packed.shape[-1]
        if packed.shape[-2] != 2 * n:
            raise ValueError(f"packed field must be 2n x n, got {packed.shape}")
        return cls(packed[:n], packed[n:], **kwargs)


def _neighbor_slices(q: np.ndarray):
    """Edge-padded up/down/left/right neighbors of q (..., n, n)."""
    pad = [(0, 0)] * (q.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(q, pad, mode="edge")
    core = (Ellipsis, slice(1, -1), slice(1, -1))
    up = p[..., :-2, 1:-1]      # row i-1 (smaller y)
    down = p[..., 2:, 1:-1]     # row i+1 (larger y)
    left = p[..., 1:-1, :-2]
    right = p[..., 1:-1, 2:]
    return up, down, left, right, p[core]


def _cfl_check(vx: np.ndarray, vy: np.ndarray, cfg: BurgersConfig) -> tuple[float, float]:
    dx = cfg.dx
    diff_num = cfg.nu * cfg.dt / dx**2
    vmax = max(float(np.max(np.abs(vx))), float(np.max(np.abs(vy))))
    adv_num = vmax * cfg.dt / dx
    if not np.isfinite(vmax):
        raise CflError("field contains non-finite entries")
    if diff_num > 0.25 or adv_num > 1.0:
        raise CflError(
            f"CFL violated: nu*dt/dx^2 = {diff_num:.4g} (limit 0.25), "
            f"max|phi|*dt/dx = {adv_num:.4g} (limit 1)"
        )
    return diff_num, adv_num


def _step_packed(packed: np.ndarray, force: np.ndarray | None, cfg: BurgersConfig):
    """One forward-Euler step on packed fields (..., 2n, n).

    Returns (new_packed, diffusion_number, advection_number).
    """
    n = cfg.grid_n
    dx = cfg.dx
    dt = cfg.dt
    vx = packed[..., :n, :]
    vy = packed[..., n:, :]
    diff_num, adv_num = _cfl_check(vx, vy, cfg)

    new_channels = []
    for q in (vx, vy):
        up, down, left, right, _ = _neighbor_slices(q)
        lap = (up + down + left + right - 4.0 * q) / dx**2
        # upwind one-sided differences, switched by local velocity sign
        ddx = np.where(vx > 0, q - left, right - q) / dx
        ddy = np.where(vy > 0, q - up, down - q) / dx
        new_channels.append(q + dt * (cfg.nu * lap - vx * ddx - vy * ddy))

    out = np.concatenate(new_channels, axis=-2)
    if force is not None:
        force = np.asarray(force, dtype=float)
        if cfg.control_mode == "pointwise":
            if force.shape[-2:] != (2 * n, n):
                raise ValueError(f"pointwise force must be 2n x n, got {force.shape}")
            out = out + dt * force
        else:
            if force.shape[-2:] != (2, n):
                raise ValueError(f"boundary force must be 2 x n, got {force.shape}")
            out[..., n - 1, :] += dt * force[..., 0, :]
            out[..., 2 * n - 1, :] += dt * force[..., 1, :]
    return out, diff_num, adv_num


def burgers_step(field: BurgersField, force: np.ndarray | None, cfg: BurgersConfig) -> BurgersField:
    """Advance one solver step of length cfg.dt; force adds to the source term."""
    out, diff_num, adv_num = _step_packed(field.packed, force, cfg)
    return BurgersField.from_packed(
        out, diffusion_number=diff_num, advection_number=adv_num
    )


def make_initial_field(cfg: BurgersConfig, seed: int) -> BurgersField:
    """Smooth random start: 4 low-wavenumber sine modes per channel.

    Amplitudes are uniform in [-0.5, 0.5], so entries are bounded by 2.
    """
    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, cfg.grid_n)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    modes = [(1, 1), (1, 2), (2, 1), (2, 2)]
    channels = []
    for _ in range(2):
        amps = rng.uniform(-0.5, 0.5, size=len(modes))
        q = np.zeros_like(xx)
        for a, (kx, ky) in zip(amps, modes):
            q += a * np.sin(np.pi * kx * xx) * np.sin(np.pi * ky * yy)
        channels.append(q)
    return BurgersField(channels[0], channels[1])


@dataclass
class BurgersDynamics:
    """MatrixDynamics adapter: one `step` = cfg.substeps solver steps.

    The force is held constant across the substeps of one control step.
    The last stability diagnostics are kept on the instance.
    """

    cfg: BurgersConfig

    def __post_init__(self) -> None:
        n = self.cfg.grid_n
        self.state_rows = 2 * n
        self.state_cols = n
        self.input_rows = 2 * n if self.cfg.control_mode == "pointwise" else 2
        self.last_diffusion_number = 0.0
        self.last_advection_number = 0.0

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=float)
        for _ in range(self.cfg.substeps):
            out, self.last_diffusion_number, self.last_advection_number = _step_packed(
                out, u, self.cfg
            )
        return out
