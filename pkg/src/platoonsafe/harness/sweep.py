"""Safety-guaranteed-region sweeps over disturbance magnitude x duration.

A grid cell is safe when the scenario run at that (acceleration, duration)
produces no collision and the worst protected barrier value stays above
-tol.  Cells are independent and can be evaluated in parallel workers; the
result assembly is order-stable so the emitted matrices are deterministic.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..dynamics import PlatoonConfig
from ..safety import SafetyLayerParams
from .run import run_scenario
from .scenarios import ScenarioSpec

__all__ = ["SweepGrid", "SafetyRegion", "safety_region_sweep", "default_grid"]

H_TOL = 1e-3


@dataclass(frozen=True)
class SweepGrid:
    accels: tuple[float, ...]
    durations: tuple[float, ...]

    @property
    def n_cells(self) -> int:
        return len(self.accels) * len(self.durations)


def default_grid() -> SweepGrid:
    """10 x 12 default: 0.5..5.0 m/s^2 by 0.5, 0.5..6.0 s by 0.5."""
    return SweepGrid(
        accels=tuple(round(0.5 * k, 1) for k in range(1, 11)),
        durations=tuple(round(0.5 * k, 1) for k in range(1, 13)),
    )


@dataclass
class SafetyRegion:
    scenario: str
    benchmark: str
    accels: tuple[float, ...]
    durations: tuple[float, ...]
    safe: np.ndarray  # (len(accels), len(durations)) bool
    min_h: np.ndarray  # same shape
    collision: np.ndarray  # same shape, bool
    tol: float = H_TOL

    def count_safe(self) -> int:
        return int(self.safe.sum())

    def is_superset_of(self, other: "SafetyRegion") -> bool:
        """Cellwise containment: every cell safe in `other` is safe here."""
        if (self.accels, self.durations) != (other.accels, other.durations):
            raise ValueError("regions use different grids")
        return bool(np.all(self.safe | ~other.safe))

    def to_dict(self) -> dict:
        return {
            "format": "platoonsafe-region",
            "version": 1,
            "scenario": self.scenario,
            "benchmark": self.benchmark,
            "tol": self.tol,
            "accels": list(self.accels),
            "durations": list(self.durations),
            "safe": self.safe.astype(int).tolist(),
            "min_h": [[float(x) for x in row] for row in self.min_h],
            "collision": self.collision.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SafetyRegion":
        if d.get("format") != "platoonsafe-region" or d.get("version") != 1:
            raise ValueError("unrecognized region document")
        return cls(
            scenario=d["scenario"],
            benchmark=d["benchmark"],
            accels=tuple(d["accels"]),
            durations=tuple(d["durations"]),
            safe=np.asarray(d["safe"], dtype=bool),
            min_h=np.asarray(d["min_h"], dtype=float),
            collision=np.asarray(d["collision"], dtype=bool),
            tol=d["tol"],
        )


def _eval_cell(args):
    spec, benchmark, cfg, params, policy, estimator, conformal_c, tol = args
    rec = run_scenario(
        spec, benchmark, cfg, params, policy=policy, estimator=estimator, conformal_c=conformal_c
    )
    min_h = rec.min_h_protected()
    return (not rec.collision) and min_h >= -tol, min_h, rec.collision


def safety_region_sweep(
    base_spec: ScenarioSpec,
    benchmark: str,
    grid: SweepGrid,
    cfg: PlatoonConfig,
    params: SafetyLayerParams,
    policy=None,
    estimator=None,
    conformal_c: float = 0.0,
    tol: float = H_TOL,
    max_workers: int | None = None,
) -> SafetyRegion:
    """Evaluate the scenario family over the grid and return the region."""
    cells = [
        (
            base_spec.with_cell(a, d),
            benchmark,
            cfg,
            params,
            policy,
            estimator,
            conformal_c,
            tol,
        )
        for a in grid.accels
        for d in grid.durations
    ]
    workers = max_workers if max_workers is not None else (os.cpu_count() or 1)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_cell, cells, chunksize=8))
    else:
        results = [_eval_cell(c) for c in cells]

    shape = (len(grid.accels), len(grid.durations))
    safe = np.zeros(shape, dtype=bool)
    min_h = np.zeros(shape)
    coll = np.zeros(shape, dtype=bool)
    it = iter(results)
    for r, _a in enumerate(grid.accels):
        for c, _d in enumerate(grid.durations):
            s, h, col = next(it)
            safe[r, c] = s
            min_h[r, c] = h
            coll[r, c] = col
    return SafetyRegion(
        scenario=base_spec.name,
        benchmark=benchmark if isinstance(benchmark, str) else benchmark.id,
        accels=grid.accels,
        durations=grid.durations,
        safe=safe,
        min_h=min_h,
        collision=coll,
        tol=tol,
    )
