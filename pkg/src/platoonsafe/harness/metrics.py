"""Efficiency and tracking metrics over run records."""

from __future__ import annotations

import warnings

import numpy as np

from ..dynamics import PlatoonConfig
from ..safety import SafetyLayerParams
from .run import RunRecord, run_scenario
from .scenarios import ScenarioSpec, sine_scenario

__all__ = ["avg_time_headway", "aave", "sine_disturbance_eval"]


def avg_time_headway(record: RunRecord) -> float:
    """Mean of s/v over all CAVs and steps; samples with nonpositive speed
    are excluded (warned), and an all-invalid trace is an error."""
    cols = [j - 1 for j in record.cav_indices]
    s = record.spacing[:, cols]
    v = record.velocity[:, cols]
    valid = v > 0.0
    if not valid.any():
        raise ValueError("no valid headway samples (all CAV speeds nonpositive)")
    n_bad = int((~valid).sum())
    if n_bad:
        warnings.warn(f"excluding {n_bad} headway samples with nonpositive speed", stacklevel=2)
    return float(np.mean(s[valid] / v[valid]))


def aave(record: RunRecord) -> float:
    """Average absolute velocity error against the head vehicle, over all
    vehicles and the whole run."""
    return float(np.mean(np.abs(record.velocity - record.head_v[:, None])))


def sine_disturbance_eval(
    benchmark: str,
    cfg: PlatoonConfig,
    params: SafetyLayerParams,
    policy=None,
    estimator=None,
    conformal_c: float = 0.0,
    spec: ScenarioSpec | None = None,
) -> dict:
    """One row of the efficiency table: run the sine scenario under the
    benchmark and report (average time headway, AAVE) plus safety summary."""
    spec = spec or sine_scenario()
    rec = run_scenario(
        spec, benchmark, cfg, params, policy=policy, estimator=estimator, conformal_c=conformal_c
    )
    return {
        "benchmark": rec.benchmark,
        "avg_time_headway": avg_time_headway(rec),
        "aave": aave(rec),
        "collision": rec.collision,
        "min_h_protected": rec.min_h_protected(),
        "sine_period": spec.sine_period,
        "sine_amplitude": spec.accel,
    }
