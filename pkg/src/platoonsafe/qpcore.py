"""Dense convex QP solve and implicit differentiation of the solution map.

Problems have the shape  min 0.5 w'Qw  s.t.  Gw <= q  with Q positive
definite and q affine in outside parameters (the nominal control inputs and
the barrier gains).  The solution map w*(q) is differentiated by solving the
linear system obtained from the KKT conditions at the optimum, so exact
active sets from the active-set solver translate directly into exact
sensitivities away from weakly-active constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from . import _kernels_pure

__all__ = [
    "FEAS_TOL",
    "STAT_TOL",
    "ACTIVE_TOL",
    "QpProblem",
    "QpSolution",
    "QpSensitivities",
    "solve",
    "differentiate",
    "grad_check",
    "kkt_residuals",
]

FEAS_TOL = 1e-8  # allowed primal violation on returned solutions
STAT_TOL = 1e-6  # allowed stationarity residual
ACTIVE_TOL = 1e-8  # multipliers above this define the active set


@dataclass
class QpProblem:
    """min 0.5 w'Qw  s.t.  Gw <= q, plus the Jacobians of q in the external
    parameters (q is affine in both, so these are constant matrices)."""

    Q: np.ndarray
    G: np.ndarray
    q: np.ndarray
    dq_du_rl: np.ndarray | None = None  # (m, n_inputs)
    dq_dtheta: np.ndarray | None = None  # (m, n_gains)
    tags: tuple = ()

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, self.Q.shape[0])
        self.q = np.asarray(self.q, dtype=float)
        if self.q.shape[0] != self.G.shape[0]:
            raise ValueError("G and q row counts differ")

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]


@dataclass
class QpSolution:
    w: np.ndarray
    lam: np.ndarray
    status: str  # "optimal" | "infeasible" | "numerical"
    iterations: int = 0
    active_set: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.active_set = tuple(int(i) for i in np.nonzero(self.lam > ACTIVE_TOL)[0])


@dataclass
class QpSensitivities:
    dw_du_rl: np.ndarray | None
    dw_dtheta: np.ndarray | None
    degenerate: bool


_STATUS = {0: "optimal", 1: "infeasible", 2: "numerical"}


def solve(p: QpProblem) -> QpSolution:
    """Solve the QP; deterministic for fixed input.

    status "infeasible" means the constraint system admits no point; callers
    in the simulation treat that as a safety-layer failure and fall back to
    the clamped nominal action.
    """
    w, lam, code, iters = kernels.qp_solve(p.Q, p.G, p.q)
    return QpSolution(w=np.asarray(w), lam=np.asarray(lam), status=_STATUS[code], iterations=iters)


def kkt_residuals(p: QpProblem, sol: QpSolution) -> dict[str, float]:
    """Stationarity / primal-feasibility / complementarity residuals."""
    slack = p.G @ sol.w - p.q if p.n_rows else np.zeros(0)
    stat = p.Q @ sol.w + (p.G.T @ sol.lam if p.n_rows else 0.0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if p.dim else 0.0,
        "feasibility": float(np.max(slack)) if p.n_rows else 0.0,
        "complementarity": float(np.max(np.abs(sol.lam * slack))) if p.n_rows else 0.0,
    }


def _kkt_matrix(p: QpProblem, sol: QpSolution) -> np.ndarray:
    m = p.n_rows
    slack = p.G @ sol.w - p.q
    K = np.zeros((p.dim + m, p.dim + m))
    K[: p.dim, : p.dim] = p.Q
    K[: p.dim, p.dim :] = p.G.T
    K[p.dim :, : p.dim] = sol.lam[:, None] * p.G
    K[p.dim :, p.dim :] = np.diag(slack)
    return K


def differentiate(p: QpProblem, sol: QpSolution) -> QpSensitivities:
    """Sensitivities of the primal optimum to the q-parameters.

    Solves  K [dw; dlam] = [0; D(lam) dq]  with the KKT matrix K evaluated at
    the optimum.  K is singular exactly at weakly-active constraints
    (lam_i = 0 on a binding row); there the solve falls back to least
    squares and the result is flagged so training can treat it as a
    subgradient.
    """
    if sol.status != "optimal":
        raise ValueError("can only differentiate an optimal solution")
    m = p.n_rows
    blocks: list[np.ndarray] = []
    for jac in (p.dq_du_rl, p.dq_dtheta):
        if jac is not None:
            blocks.append(np.asarray(jac, dtype=float).reshape(m, -1))
        else:
            blocks.append(None)
    n_cols = sum(b.shape[1] for b in blocks if b is not None)
    if n_cols == 0:
        return QpSensitivities(None, None, degenerate=False)

    rhs = np.zeros((p.dim + m, n_cols))
    col = 0
    spans = []
    for b in blocks:
        if b is None:
            spans.append(None)
            continue
        rhs[p.dim :, col : col + b.shape[1]] = sol.lam[:, None] * b
        spans.append((col, col + b.shape[1]))
        col += b.shape[1]

    slack = p.G @ sol.w - p.q if m else np.zeros(0)
    weakly_active = bool(np.any((sol.lam <= ACTIVE_TOL) & (slack >= -1e-7))) if m else False

    K = _kkt_matrix(p, sol)
    degenerate = weakly_active
    try:
        X = np.linalg.solve(K, rhs)
        resid = np.max(np.abs(K @ X - rhs)) if rhs.size else 0.0
        if not np.isfinite(X).all() or resid > 1e-6 * max(1.0, np.max(np.abs(rhs))):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        X = np.linalg.lstsq(K, rhs, rcond=None)[0]
        degenerate = True

    out = []
    for span in spans:
        out.append(None if span is None else X[: p.dim, span[0] : span[1]])
    return QpSensitivities(dw_du_rl=out[0], dw_dtheta=out[1], degenerate=degenerate)


def grad_check(
    p: QpProblem,
    sol: QpSolution,
    direction: np.ndarray,
    which: str = "u_rl",
    fd_step: float = 1e-5,
) -> float:
    """Max relative error of the implicit sensitivities against central
    finite differences of the solver along one parameter direction.

    The finite-difference side re-solves the QP with q shifted through the
    stored affine Jacobian, so it is independent of the KKT-system path.
    """
    jac = p.dq_du_rl if which == "u_rl" else p.dq_dtheta
    if jac is None:
        raise ValueError(f"problem carries no Jacobian for {which!r}")
    direction = np.asarray(direction, dtype=float)
    sens = differentiate(p, sol)
    analytic = (sens.dw_du_rl if which == "u_rl" else sens.dw_dtheta) @ direction

    dq = np.asarray(jac) @ direction
    w_hi, _, code_hi, _ = _kernels_pure.qp_solve(p.Q, p.G, p.q + fd_step * dq)
    w_lo, _, code_lo, _ = _kernels_pure.qp_solve(p.Q, p.G, p.q - fd_step * dq)
    if code_hi != 0 or code_lo != 0:
        raise ValueError("finite-difference probe left the feasible regime")
    fd = (np.asarray(w_hi) - np.asarray(w_lo)) / (2.0 * fd_step)
    scale = max(1.0, float(np.max(np.abs(fd))))
    return float(np.max(np.abs(analytic - fd)) / scale)
