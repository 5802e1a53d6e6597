"""Cooperative safety filtering for mixed-autonomy vehicle platoons.

Library layout:

- ``dynamics``: platoon state, FVD car-following, Euler integration
- ``qpcore``: dense convex QP solver + implicit KKT differentiation
- ``safety``: barrier candidates, robust constraint rows, per-CAV QP assembly
- ``conformal``: acceleration predictors and split-conformal calibration
- ``marl``: observations, rewards, actor/critic, PPO with a differentiable
  safety layer
- ``harness``: scenarios, benchmark controllers, sweeps, metrics, CLI
"""

from ._backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
