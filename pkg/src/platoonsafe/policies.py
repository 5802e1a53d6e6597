"""Nominal CAV controllers that stand in for a trained RL policy.

The default evaluation policy is a gain-scheduled linear feedback on
spacing and velocity errors against a (deliberately short) desired gap, so
the nominal controller is efficient but aggressive: without the safety
layer it tailgates, which is exactly the regime the benchmarks probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import PlatoonConfig, PlatoonState

__all__ = ["HeuristicPolicy", "FvdPolicy"]


@dataclass(frozen=True)
class HeuristicPolicy:
    """u = kp*(s - (d0 + t_des*v)) + kv*(v_prev - v), clipped to accel bounds.

    The default desired time gap (0.55 s) sits far below the FVD
    equilibrium headway, so the controller closes in on its leader unless
    the safety layer intervenes.
    """

    kp: float = 0.5
    kv: float = 1.2
    t_des: float = 0.55
    d0: float = 2.0
    a_min: float = -5.0
    a_max: float = 5.0

    def act(self, state: PlatoonState, j: int, cfg: PlatoonConfig) -> float:
        gap_err = state.s(j) - (self.d0 + self.t_des * state.v(j))
        u = self.kp * gap_err + self.kv * (state.v_prev(j) - state.v(j))
        return float(np.clip(u, self.a_min, self.a_max))

    def act_all(self, state: PlatoonState, cfg: PlatoonConfig) -> dict[int, float]:
        return {j: self.act(state, j, cfg) for j in cfg.cav_indices}


@dataclass(frozen=True)
class FvdPolicy:
    """CAVs mimic the human car-following law (the pure car-following
    baseline)."""

    def act(self, state: PlatoonState, j: int, cfg: PlatoonConfig) -> float:
        from .dynamics import fvd_accel

        return fvd_accel(state.s(j), state.v(j), state.v_prev(j), cfg.fvd_for(j))

    def act_all(self, state: PlatoonState, cfg: PlatoonConfig) -> dict[int, float]:
        return {j: self.act(state, j, cfg) for j in cfg.cav_indices}
