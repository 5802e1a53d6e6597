"""Scenario execution under the benchmark controllers M1-M5.

M1  pure car-following (CAVs behave like HDVs, no policy, no filter)
M2  nominal policy only (actuator-clipped, no safety layer)
M3  policy + non-cooperative safety (each HDV protected only by its
    nearest upstream CAV)
M4  policy + cooperative safety, no conformal margin (C = 0)
M5  policy + cooperative safety with the calibrated conformal margin

Evaluation is deterministic: stochastic policies are evaluated at their
mean action, and the scenarios are noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..dynamics import PlatoonConfig, PlatoonState, equilibrium_state, step
from ..policies import FvdPolicy, HeuristicPolicy
from ..safety import (
    CooperativeSafetyFilter,
    Estimates,
    SafetyLayerParams,
    cbf_value,
    preceding_cavs,
    reduced_order_h,
)
from .scenarios import ScenarioSpec

__all__ = [
    "BENCHMARKS",
    "BenchmarkSpec",
    "RunRecord",
    "noncooperative_params",
    "run_scenario",
]


@dataclass(frozen=True)
class BenchmarkSpec:
    id: str
    uses_policy: bool
    uses_safety: bool
    cooperative: bool
    conformal: bool

    @property
    def hdv_rows(self) -> str:
        return "all" if self.cooperative else "ego_coupled"


BENCHMARKS = {
    "M1": BenchmarkSpec("M1", uses_policy=False, uses_safety=False, cooperative=False, conformal=False),
    "M2": BenchmarkSpec("M2", uses_policy=True, uses_safety=False, cooperative=False, conformal=False),
    "M3": BenchmarkSpec("M3", uses_policy=True, uses_safety=True, cooperative=False, conformal=False),
    "M4": BenchmarkSpec("M4", uses_policy=True, uses_safety=True, cooperative=True, conformal=False),
    "M5": BenchmarkSpec("M5", uses_policy=True, uses_safety=True, cooperative=True, conformal=True),
}


def noncooperative_params(params: SafetyLayerParams, cfg: PlatoonConfig) -> SafetyLayerParams:
    """Restrict each HDV's cooperation to its nearest upstream CAV (the
    non-cooperative baseline M3)."""
    k_new = {}
    for (i, j), k in params.k_coop.items():
        ahead = preceding_cavs(i, cfg)
        nearest = max(ahead) if ahead else None
        k_new[(i, j)] = k if j == nearest else 0.0
    return replace(params, k_coop=k_new, gamma_cav=dict(params.gamma_cav), gamma_hdv=dict(params.gamma_hdv))


_STATUS_CODE = {"optimal": 0, "infeasible": 1, "numerical": 2}


@dataclass
class RunRecord:
    """Full per-step trace of one scenario run."""

    scenario: str
    benchmark: str
    dt: float
    cav_indices: tuple[int, ...]
    protected_hdvs: tuple[int, ...]
    t: np.ndarray  # (T,)
    head_v: np.ndarray  # (T,)
    spacing: np.ndarray  # (T, n)
    velocity: np.ndarray  # (T, n)
    h: np.ndarray  # (T, n)
    h_suf: np.ndarray  # (T, len(protected_hdvs))
    u_rl: np.ndarray  # (T, m)
    u_safe: np.ndarray  # (T, m)
    qp_status: np.ndarray  # (T, m) int; -1 when no QP ran
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.spacing.shape[1]

    @property
    def collision(self) -> bool:
        return bool(self.spacing.min() <= 0.0)

    def min_spacing(self) -> float:
        return float(self.spacing.min())

    def min_h_protected(self) -> float:
        """Worst barrier value over the system-level safety scope: the first
        CAV and everything behind it."""
        first = min(self.cav_indices)
        return float(self.h[:, first - 1 :].min())

    def qp_failures(self) -> int:
        return int(np.sum(self.qp_status > 0))

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "benchmark": self.benchmark,
            "collision": self.collision,
            "min_spacing": self.min_spacing(),
            "min_h_protected": self.min_h_protected(),
            "qp_failures": self.qp_failures(),
            "steps": int(self.t.shape[0]),
        }


def run_scenario(
    spec: ScenarioSpec,
    benchmark: str | BenchmarkSpec,
    cfg: PlatoonConfig,
    params: SafetyLayerParams,
    policy=None,
    estimator=None,
    conformal_c: float = 0.0,
    seed: int = 0,
    s_init: float = 20.0,
    v_init: float = 15.0,
) -> RunRecord:
    """Deterministic rollout of one scenario under one benchmark.

    estimator: a conformal BehaviorPredictor, or None for oracle estimates
    (exact car-following outputs, previous-step CAV inputs).  QP failures
    are recorded per step; the run continues on the clamped nominal action.
    """
    bm = BENCHMARKS[benchmark] if isinstance(benchmark, str) else benchmark
    if bm.uses_policy and policy is None:
        policy = HeuristicPolicy(a_min=params.a_min, a_max=params.a_max)
    if not bm.uses_policy:
        policy = FvdPolicy()

    run_params = params if bm.cooperative or not bm.uses_safety else noncooperative_params(params, cfg)
    filt = None
    if bm.uses_safety:
        filt = CooperativeSafetyFilter(
            cfg,
            run_params,
            conformal_c=(conformal_c if bm.conformal else 0.0),
            hdv_rows=bm.hdv_rows,
        )

    first = min(cfg.cav_indices)
    protected = tuple(i for i in cfg.hdv_indices if i > first)
    T = spec.steps(cfg.dt)
    m = len(cfg.cav_indices)
    rec = RunRecord(
        scenario=spec.name,
        benchmark=bm.id,
        dt=cfg.dt,
        cav_indices=cfg.cav_indices,
        protected_hdvs=protected,
        t=np.arange(1, T + 1) * cfg.dt,
        head_v=np.zeros(T),
        spacing=np.zeros((T, cfg.n)),
        velocity=np.zeros((T, cfg.n)),
        h=np.zeros((T, cfg.n)),
        h_suf=np.zeros((T, len(protected))),
        u_rl=np.zeros((T, m)),
        u_safe=np.zeros((T, m)),
        qp_status=np.full((T, m), -1, dtype=int),
        seed=seed,
    )

    state = equilibrium_state(cfg, s_init, v_init)
    prev_state = None
    prev_accel = np.zeros(cfg.n)
    prev_exec = {j: 0.0 for j in cfg.cav_indices}

    for k in range(T):
        t_now = k * cfg.dt
        u_rl = {j: policy.act(state, j, cfg) for j in cfg.cav_indices}

        if filt is not None:
            if estimator is None:
                est = Estimates.oracle(state, cfg, prev_exec)
            else:
                est = estimator.estimates(
                    prev_state if prev_state is not None else state, prev_accel, cfg
                )
            fr = filt.filter_step(state, u_rl, est)
            u_exec = fr.u_exec
            rec.u_safe[k] = fr.u_safe
            rec.qp_status[k] = [_STATUS_CODE[fr.statuses[j]] for j in cfg.cav_indices]
        elif bm.uses_policy:
            u_exec = np.clip(
                [u_rl[j] for j in cfg.cav_indices], params.a_min, params.a_max
            )
        else:
            u_exec = np.array([u_rl[j] for j in cfg.cav_indices])

        rec.u_rl[k] = [u_rl[j] for j in cfg.cav_indices]
        head_a = spec.head_accel(t_now, state.head_velocity, cfg.dt)
        nxt = step(state, u_exec, head_a, cfg, hdv_overrides=spec.hdv_overrides(t_now))

        prev_accel = (nxt.velocity - state.velocity) / cfg.dt
        prev_state = state
        prev_exec = {j: float(u_exec[c]) for c, j in enumerate(cfg.cav_indices)}
        state = nxt

        rec.head_v[k] = state.head_velocity
        rec.spacing[k] = state.spacing
        rec.velocity[k] = state.velocity
        rec.h[k] = state.spacing - run_params.tau * state.velocity
        for c, i in enumerate(protected):
            rec.h_suf[k, c] = reduced_order_h(i, state, run_params, cfg)
    return rec
