"""Longitudinal platoon dynamics with human car-following behavior.

The platoon is a single lane of n vehicles behind an externally driven head
vehicle (index 0).  Vehicle i keeps state (s_i, v_i): the gap to vehicle i-1
and its own speed.  Automated vehicles (CAVs) are driven by a commanded
acceleration; human-driven vehicles (HDVs) follow the Full Velocity
Difference car-following law.  Integration is forward Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import kernels

__all__ = [
    "FvdParams",
    "VehicleState",
    "PlatoonState",
    "PlatoonConfig",
    "DEFAULT_FVD",
    "optimal_velocity",
    "fvd_accel",
    "equilibrium_vmax",
    "step",
    "equilibrium_state",
]


@dataclass(frozen=True)
class FvdParams:
    """Full Velocity Difference parameters.

    alpha, beta: car-following gains (1/s); s_st / s_go: stopped and
    free-flow spacing thresholds (m); v_max: free-flow speed (m/s).
    """

    alpha: float = 0.6
    beta: float = 0.9
    s_st: float = 5.0
    s_go: float = 35.0
    v_max: float = 30.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("car-following gains must be positive")
        if not self.s_st < self.s_go:
            raise ValueError("require s_st < s_go")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


#: Gains and spacing thresholds used throughout the experiments; v_max is
#: derived so the (20 m, 15 m/s) operating point is an exact equilibrium.
DEFAULT_FVD = FvdParams(alpha=0.6, beta=0.9, s_st=5.0, s_go=35.0, v_max=30.0)


@dataclass(frozen=True)
class VehicleState:
    spacing: float
    velocity: float


@dataclass(frozen=True)
class PlatoonConfig:
    """Static description of the platoon: size, CAV positions, HDV models.

    comm_range is the number of vehicles ahead/behind that any vehicle can
    observe; the default covers the whole platoon.  fvd_overrides allows
    heterogeneous HDV parameters keyed by vehicle index.
    """

    n: int = 7
    cav_indices: tuple[int, ...] = (2, 4)
    fvd: FvdParams = DEFAULT_FVD
    fvd_overrides: dict[int, FvdParams] = field(default_factory=dict)
    dt: float = 0.1
    comm_range: int = 7

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.comm_range < 1:
            raise ValueError("comm_range must be >= 1")
        if not all(1 <= j <= self.n for j in self.cav_indices):
            raise ValueError("cav_indices must lie in 1..n")
        if len(set(self.cav_indices)) != len(self.cav_indices):
            raise ValueError("cav_indices must be distinct")
        object.__setattr__(self, "cav_indices", tuple(sorted(self.cav_indices)))

    @property
    def hdv_indices(self) -> tuple[int, ...]:
        cavs = set(self.cav_indices)
        return tuple(i for i in range(1, self.n + 1) if i not in cavs)

    def fvd_for(self, i: int) -> FvdParams:
        return self.fvd_overrides.get(i, self.fvd)

    def is_cav(self, i: int) -> bool:
        return i in self.cav_indices

    def in_range(self, observer: int, other: int) -> bool:
        """Whether `other` is within the observer's communication range.

        Index 0 denotes the head vehicle.
        """
        return abs(observer - other) <= self.comm_range


@dataclass(frozen=True)
class PlatoonState:
    """Snapshot of the platoon used as the simulation and control state.

    spacing[k] / velocity[k] hold (s_i, v_i) for vehicle i = k + 1; the
    state-vector ordering is [s_1, v_1, ..., s_n, v_n].  cav_mask[k] tags
    vehicle k + 1 as a CAV.
    """

    head_velocity: float
    spacing: np.ndarray
    velocity: np.ndarray
    cav_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "spacing", np.asarray(self.spacing, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        object.__setattr__(self, "cav_mask", np.asarray(self.cav_mask, dtype=bool))
        if not (self.spacing.shape == self.velocity.shape == self.cav_mask.shape):
            raise ValueError("spacing/velocity/cav_mask must have equal length")

    @property
    def n(self) -> int:
        return self.spacing.shape[0]

    @property
    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(float(s), float(v)) for s, v in zip(self.spacing, self.velocity)]

    def role(self, i: int) -> str:
        return "CAV" if self.cav_mask[i - 1] else "HDV"

    def s(self, i: int) -> float:
        return float(self.spacing[i - 1])

    def v(self, i: int) -> float:
        return float(self.velocity[i - 1])

    def v_prev(self, i: int) -> float:
        """Velocity of the vehicle directly ahead of i (head vehicle for i=1)."""
        return self.head_velocity if i == 1 else float(self.velocity[i - 2])

    def vector(self) -> np.ndarray:
        """State vector [s_1, v_1, ..., s_n, v_n]."""
        out = np.empty(2 * self.n)
        out[0::2] = self.spacing
        out[1::2] = self.velocity
        return out

    def min_spacing(self) -> float:
        return float(self.spacing.min())


def optimal_velocity(s: float, p: FvdParams) -> float:
    """Spacing-dependent desired speed: 0 below s_st, v_max above s_go,
    smooth cosine ramp in between."""
    if s <= p.s_st:
        return 0.0
    if s >= p.s_go:
        return p.v_max
    return 0.5 * p.v_max * (1.0 - math.cos(math.pi * (s - p.s_st) / (p.s_go - p.s_st)))


def fvd_accel(s: float, v: float, v_prev: float, p: FvdParams) -> float:
    """FVD acceleration: relax toward the desired speed for the current gap
    plus a velocity-difference term against the leader."""
    return p.alpha * (optimal_velocity(s, p) - v) + p.beta * (v_prev - v)


def equilibrium_vmax(s_star: float, v_star: float, p: FvdParams) -> float:
    """Free-flow speed that makes (s_star, v_star) an exact FVD equilibrium.

    Inverts the desired-speed ramp at s_star; only defined strictly between
    the stopped and free-flow thresholds.
    """
    if not (p.s_st < s_star < p.s_go):
        raise ValueError("equilibrium spacing must lie strictly inside (s_st, s_go)")
    denom = 1.0 - math.cos(math.pi * (s_star - p.s_st) / (p.s_go - p.s_st))
    return 2.0 * v_star / denom


def _hdv_param_arrays(cfg: PlatoonConfig) -> np.ndarray:
    """Per-vehicle (alpha, beta, s_st, s_go, v_max) rows; CAV rows are unused."""
    out = np.empty((cfg.n, 5))
    for i in range(1, cfg.n + 1):
        p = cfg.fvd_for(i)
        out[i - 1] = (p.alpha, p.beta, p.s_st, p.s_go, p.v_max)
    return out


def step(
    state: PlatoonState,
    u: np.ndarray,
    head_accel: float,
    cfg: PlatoonConfig,
    hdv_overrides: dict[int, float] | None = None,
) -> PlatoonState:
    """Advance one Euler step of length cfg.dt.

    u holds commanded accelerations for cfg.cav_indices in ascending order.
    hdv_overrides replaces the FVD output of selected HDVs with a fixed
    acceleration (used to inject irrational-driver disturbances).  Spacing
    updates use pre-update velocities; velocities are clamped at zero from
    below, spacing may go negative (recorded as a collision downstream).
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (len(cfg.cav_indices),):
        raise ValueError(
            f"expected {len(cfg.cav_indices)} control inputs, got {u.shape}"
        )

    accel = np.empty(cfg.n)
    params = _hdv_param_arrays(cfg)
    kernels.platoon_accels(
        state.spacing,
        state.velocity,
        state.head_velocity,
        state.cav_mask.astype(np.uint8),
        params,
        accel,
    )
    for k, j in enumerate(cfg.cav_indices):
        accel[j - 1] = u[k]
    if hdv_overrides:
        for i, a in hdv_overrides.items():
            if cfg.is_cav(i):
                raise ValueError(f"vehicle {i} is a CAV; overrides apply to HDVs")
            accel[i - 1] = a

    prev_v = np.concatenate(([state.head_velocity], state.velocity[:-1]))
    new_spacing = state.spacing + cfg.dt * (prev_v - state.velocity)
    new_velocity = np.maximum(0.0, state.velocity + cfg.dt * accel)
    new_head = max(0.0, state.head_velocity + cfg.dt * head_accel)
    return replace(
        state, head_velocity=new_head, spacing=new_spacing, velocity=new_velocity
    )


def equilibrium_state(
    cfg: PlatoonConfig, s_star: float = 20.0, v_star: float = 15.0
) -> PlatoonState:
    """Uniform-flow state: every gap at s_star, every speed (head included)
    at v_star."""
    mask = np.zeros(cfg.n, dtype=bool)
    for j in cfg.cav_indices:
        mask[j - 1] = True
    return PlatoonState(
        head_velocity=v_star,
        spacing=np.full(cfg.n, float(s_star)),
        velocity=np.full(cfg.n, float(v_star)),
        cav_mask=mask,
    )
