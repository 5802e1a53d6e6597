"""Disturbance scenarios for the safety-critical and efficiency studies.

Scenario 1: the head vehicle brakes hard for a window and then accelerates
back to its equilibrium speed (mirrored magnitude, capped at v_eq).
Scenario 2: a following HDV overrides its car-following response with a
fixed irrational acceleration for a window, then resumes normal behavior.
The sine scenario drives the head vehicle with a sinusoidal acceleration
for the efficiency metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

__all__ = ["ScenarioSpec", "scenario1", "scenario2", "sine_scenario", "calm_scenario"]


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    kind: str  # "head_brake" | "hdv_accel" | "head_sine" | "calm"
    accel: float = 0.0
    start: float = 1.0
    duration: float = 0.0
    target: int = 0  # disturbed HDV index for kind="hdv_accel"
    sine_period: float = 20.0
    horizon: float = 30.0
    v_eq: float = 15.0

    def __post_init__(self):
        if self.duration > 0 and self.start + self.duration > self.horizon:
            raise ValueError("disturbance window must fit inside the horizon")

    def head_accel(self, t: float, v_head: float, dt: float) -> float:
        """Head-vehicle acceleration command at time t (state-aware so the
        recovery leg stops exactly at the equilibrium speed)."""
        if self.kind == "head_brake":
            if self.start <= t < self.start + self.duration:
                return -self.accel
            if self.start + self.duration <= t < self.start + 2 * self.duration:
                if v_head >= self.v_eq:
                    return 0.0
                return min(self.accel, (self.v_eq - v_head) / dt)
            return 0.0
        if self.kind == "head_sine":
            return self.accel * math.sin(2.0 * math.pi * t / self.sine_period)
        return 0.0

    def hdv_overrides(self, t: float) -> dict[int, float] | None:
        if self.kind == "hdv_accel" and self.start <= t < self.start + self.duration:
            return {self.target: self.accel}
        return None

    def with_cell(self, accel: float, duration: float) -> "ScenarioSpec":
        """Same scenario family at another (magnitude, duration) grid cell."""
        return replace(self, accel=float(accel), duration=float(duration))

    def steps(self, dt: float) -> int:
        return int(round(self.horizon / dt))


def scenario1(accel: float = 3.0, duration: float = 4.0, horizon: float = 30.0) -> ScenarioSpec:
    """Emergency braking of the head vehicle ahead of the platoon."""
    return ScenarioSpec(
        name="scenario1", kind="head_brake", accel=accel, start=1.0, duration=duration,
        horizon=horizon,
    )


def scenario2(
    accel: float = 2.5, duration: float = 4.5, target: int = 5, horizon: float = 30.0
) -> ScenarioSpec:
    """Irrational acceleration of a following HDV inside the platoon."""
    return ScenarioSpec(
        name="scenario2", kind="hdv_accel", accel=accel, start=1.0, duration=duration,
        target=target, horizon=horizon,
    )


def sine_scenario(
    amplitude: float = 2.0, period: float = 20.0, horizon: float = 100.0
) -> ScenarioSpec:
    """Sinusoidal head-vehicle acceleration for the efficiency study."""
    return ScenarioSpec(
        name="sine", kind="head_sine", accel=amplitude, start=0.0, sine_period=period,
        horizon=horizon,
    )


def calm_scenario(horizon: float = 30.0) -> ScenarioSpec:
    return ScenarioSpec(name="calm", kind="calm", horizon=horizon)
