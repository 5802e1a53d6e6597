"""Barrier candidates, cooperative reduced-order barriers, and per-CAV QPs.

Safety of vehicle i is the headway condition h_i = s_i - tau*v_i >= 0.  A
CAV enforces its own barrier directly through its input.  A following HDV
has no input of its own, so it is protected through the reduced-order
candidate h_suf = h_i - sum_j k_ij h_j over the preceding CAVs j: keeping
h_suf and every h_j nonnegative is sufficient for h_i >= 0, and h_suf has
relative degree one in the CAV inputs.

Each CAV (the "ego") solves a small QP over correction inputs u_safe for
every CAV in its communication range plus one slack per protected HDV,
subject to actuator limits, the CAV barrier rows, and the HDV reduced-order
rows.  Unknown quantities in the HDV rows (the HDV's car-following output
and the other CAVs' executed inputs) enter as estimates; a conformal
threshold C inflates those rows by a worst-case margin E_con.

Sign note: differentiating h_suf along the dynamics gives the ego-input
term +tau*k_ij*u_j (a preceding CAV accelerating away raises the HDV's
barrier).  The source derivation carries a sign slip in this term; the
positive sign is required for the cooperative rows to actually enforce
forward invariance, and is what we implement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .dynamics import PlatoonConfig, PlatoonState, fvd_accel
from .qpcore import QpProblem, QpSolution, solve

__all__ = [
    "SafetyLayerParams",
    "CbfSpec",
    "ConstraintRow",
    "QpLayout",
    "Estimates",
    "FilterResult",
    "cbf_value",
    "preceding_cavs",
    "reduced_order_h",
    "input_matrix",
    "cav_cbf_spec",
    "hdv_cbf_spec",
    "e_con",
    "cav_constraint",
    "hdv_constraint",
    "build_qp",
    "CooperativeSafetyFilter",
]


@dataclass
class SafetyLayerParams:
    """Gains and weights of the safety layer.

    gamma_cav / gamma_hdv hold the class-K gains per vehicle index (these
    are the trainable theta_CBF parameters); k_coop[(i, j)] the cooperation
    coefficient of CAV j in HDV i's reduced-order barrier; slack weights
    b_i penalize relaxation of HDV rows.
    """

    tau: float = 0.3
    gamma_cav: dict[int, float] = field(default_factory=dict)
    gamma_hdv: dict[int, float] = field(default_factory=dict)
    k_coop: dict[tuple[int, int], float] = field(default_factory=dict)
    slack_weight: float = 1e3
    a_min: float = -5.0
    a_max: float = 5.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.a_min >= self.a_max:
            raise ValueError("require a_min < a_max")
        if self.slack_weight <= 0:
            raise ValueError("slack weights must be positive")
        for k in self.k_coop.values():
            if not 0.0 <= k <= 1.0:
                raise ValueError("cooperation coefficients must lie in [0, 1]")

    @classmethod
    def defaults(
        cls,
        cfg: PlatoonConfig,
        tau: float = 0.3,
        gamma: float = 1.0,
        k: float = 0.4,
        slack_weight: float = 1e3,
        a_min: float = -5.0,
        a_max: float = 5.0,
    ) -> "SafetyLayerParams":
        """Uniform gains/coefficients materialized for one platoon layout."""
        gamma_cav = {j: gamma for j in cfg.cav_indices}
        first = min(cfg.cav_indices)
        gamma_hdv = {i: gamma for i in cfg.hdv_indices if i > first}
        k_coop = {}
        for i in cfg.hdv_indices:
            for j in cfg.cav_indices:
                if j < i:
                    k_coop[(i, j)] = k
        return cls(
            tau=tau,
            gamma_cav=gamma_cav,
            gamma_hdv=gamma_hdv,
            k_coop=k_coop,
            slack_weight=slack_weight,
            a_min=a_min,
            a_max=a_max,
        )

    def k(self, i: int, j: int) -> float:
        return self.k_coop.get((i, j), 0.0)


@dataclass(frozen=True)
class CbfSpec:
    """Affine barrier h = c1'x + c2 over the [s_1, v_1, ..., s_n, v_n]
    state, with its class-K gain and owning vehicle."""

    c1: np.ndarray
    c2: float
    gamma: float
    owner: int
    kind: str  # "CAV" | "HDV_reduced"

    def value(self, state: PlatoonState) -> float:
        return float(self.c1 @ state.vector() + self.c2)


@dataclass(frozen=True)
class ConstraintRow:
    """One inequality coeffs . w <= rhs over an ego QP's decision vector."""

    coeffs: np.ndarray
    rhs: float
    tag: tuple


@dataclass(frozen=True)
class QpLayout:
    """Decision-vector layout of one ego QP: u_safe per in-range CAV
    (ascending index), then one slack per protected HDV."""

    ego: int
    cav_order: tuple[int, ...]
    hdv_order: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.cav_order) + len(self.hdv_order)

    def u_index(self, j: int) -> int:
        return self.cav_order.index(j)

    def sigma_index(self, i: int) -> int:
        return len(self.cav_order) + self.hdv_order.index(i)


@dataclass
class Estimates:
    """Estimated accelerations used by the HDV rows: executed inputs of
    other CAVs (u_hat) and car-following outputs of HDVs (f_hat)."""

    u_hat: dict[int, float] = field(default_factory=dict)
    f_hat: dict[int, float] = field(default_factory=dict)

    @classmethod
    def oracle(
        cls, state: PlatoonState, cfg: PlatoonConfig, u_exec: dict[int, float] | None = None
    ) -> "Estimates":
        """Exact estimates from the true car-following law (test fixture;
        the deployed filter uses the learned predictors)."""
        f_hat = {
            i: fvd_accel(state.s(i), state.v(i), state.v_prev(i), cfg.fvd_for(i))
            for i in cfg.hdv_indices
        }
        return cls(u_hat=dict(u_exec or {}), f_hat=f_hat)


def cbf_value(i: int, state: PlatoonState, tau: float) -> float:
    """Headway barrier h_i = s_i - tau * v_i."""
    if not 1 <= i <= state.n:
        raise IndexError(f"vehicle index {i} out of range 1..{state.n}")
    return state.s(i) - tau * state.v(i)


def cavs_in_range(ego: int, cfg: PlatoonConfig) -> tuple[int, ...]:
    return tuple(j for j in cfg.cav_indices if cfg.in_range(ego, j))


def preceding_cavs(i: int, cfg: PlatoonConfig) -> tuple[int, ...]:
    """CAVs ahead of vehicle i within its communication range."""
    return tuple(j for j in cfg.cav_indices if j < i and cfg.in_range(i, j))


def following_hdvs(ego: int, cfg: PlatoonConfig) -> tuple[int, ...]:
    return tuple(i for i in cfg.hdv_indices if i > ego and cfg.in_range(ego, i))


def reduced_order_h(i: int, state: PlatoonState, params: SafetyLayerParams, cfg: PlatoonConfig) -> float:
    """Cooperative reduced-order barrier h_suf for HDV i: its own barrier
    discounted by the preceding in-range CAVs' barriers."""
    if cfg.is_cav(i):
        raise ValueError(f"vehicle {i} is a CAV; reduced-order barriers protect HDVs")
    h = cbf_value(i, state, params.tau)
    for j in preceding_cavs(i, cfg):
        h -= params.k(i, j) * cbf_value(j, state, params.tau)
    return h


def input_matrix(cfg: PlatoonConfig) -> np.ndarray:
    """2n x m matrix mapping CAV inputs into the state derivative (each
    column hits the owning CAV's velocity slot)."""
    B = np.zeros((2 * cfg.n, len(cfg.cav_indices)))
    for col, j in enumerate(cfg.cav_indices):
        B[2 * (j - 1) + 1, col] = 1.0
    return B


def cav_cbf_spec(j: int, params: SafetyLayerParams, n: int) -> CbfSpec:
    c1 = np.zeros(2 * n)
    c1[2 * (j - 1)] = 1.0
    c1[2 * (j - 1) + 1] = -params.tau
    return CbfSpec(c1=c1, c2=0.0, gamma=params.gamma_cav.get(j, 1.0), owner=j, kind="CAV")


def hdv_cbf_spec(i: int, params: SafetyLayerParams, cfg: PlatoonConfig) -> CbfSpec:
    c1 = np.zeros(2 * cfg.n)
    c1[2 * (i - 1)] = 1.0
    c1[2 * (i - 1) + 1] = -params.tau
    for j in preceding_cavs(i, cfg):
        k = params.k(i, j)
        c1[2 * (j - 1)] -= k
        c1[2 * (j - 1) + 1] += k * params.tau
    return CbfSpec(
        c1=c1, c2=0.0, gamma=params.gamma_hdv.get(i, 1.0), owner=i, kind="HDV_reduced"
    )


def e_con(c1: np.ndarray, g_cols: np.ndarray, C: float) -> float:
    """Worst-case margin for a barrier row whose dynamics and input terms
    are estimated with per-entry error at most C: C*(||c1||_1 + ||
    |c1|'|g| ||_1), the Cauchy-Schwarz bound over the state and input
    channels."""
    c1 = np.abs(np.asarray(c1, dtype=float))
    g = np.abs(np.asarray(g_cols, dtype=float))
    return float(C) * (c1.sum() + float(np.abs(c1 @ g).sum()))


def cav_constraint(
    j: int,
    state: PlatoonState,
    u_rl_j: float,
    params: SafetyLayerParams,
    layout: QpLayout,
) -> ConstraintRow:
    """Barrier row for CAV j: dh_j/dt + gamma_j h_j >= 0 with the input
    split u_j = u_safe_j + u_rl_j, rearranged to <= form over u_safe_j."""
    coeffs = np.zeros(layout.dim)
    coeffs[layout.u_index(j)] = params.tau
    gamma = params.gamma_cav.get(j, 1.0)
    rhs = (
        state.v_prev(j)
        - state.v(j)
        - params.tau * u_rl_j
        + gamma * cbf_value(j, state, params.tau)
    )
    return ConstraintRow(coeffs=coeffs, rhs=rhs, tag=("CAV", j))


def hdv_constraint(
    i: int,
    state: PlatoonState,
    u_hat: dict[int, float],
    fhat_i: float,
    e_con_i: float,
    params: SafetyLayerParams,
    cfg: PlatoonConfig,
    layout: QpLayout,
    u_rl_ego: float = 0.0,
) -> ConstraintRow:
    """Reduced-order barrier row for HDV i in the ego's QP.

    The ego's own input stays symbolic (decision variable u_safe_ego plus
    its nominal u_rl_ego); the other preceding CAVs contribute their
    estimated executed inputs from u_hat.  The slack sigma_i relaxes the
    row, and e_con_i inflates it against estimation error.
    """
    ego = layout.ego
    coeffs = np.zeros(layout.dim)
    coeffs[layout.sigma_index(i)] = -1.0
    gamma = params.gamma_hdv.get(i, 1.0)
    base = state.v_prev(i) - state.v(i) - params.tau * fhat_i
    for j in preceding_cavs(i, cfg):
        k = params.k(i, j)
        if k == 0.0:
            continue
        base -= k * (state.v_prev(j) - state.v(j))
        if j == ego:
            coeffs[layout.u_index(ego)] = -params.tau * k
            base += params.tau * k * u_rl_ego
        else:
            if j not in u_hat:
                raise KeyError(f"missing input estimate for CAV {j} in HDV {i}'s row")
            base += params.tau * k * u_hat[j]
    h_suf = reduced_order_h(i, state, params, cfg)
    rhs = base + gamma * h_suf - e_con_i
    return ConstraintRow(coeffs=coeffs, rhs=rhs, tag=("HDV", i))


class CooperativeSafetyFilter:
    """Assembles and solves the per-CAV safety QPs for one platoon layout.

    The constraint matrix, objective, and margin coefficients depend only
    on the layout and parameters, so they are precomputed per ego; each
    simulation step only refreshes the right-hand side from the state, the
    nominal inputs, and the estimates.

    hdv_rows="all" gives every ego a row per following HDV in range (the
    cooperative formulation); "ego_coupled" keeps only rows whose
    cooperation coefficient couples the ego (the non-cooperative baseline).
    """

    def __init__(
        self,
        cfg: PlatoonConfig,
        params: SafetyLayerParams,
        conformal_c: float = 0.0,
        hdv_rows: str = "all",
    ):
        if hdv_rows not in ("all", "ego_coupled"):
            raise ValueError("hdv_rows must be 'all' or 'ego_coupled'")
        self.cfg = cfg
        self.params = params
        self.conformal_c = float(conformal_c)
        self.hdv_rows = hdv_rows
        B = input_matrix(cfg)
        self._templates = {
            ego: _EgoTemplate(ego, cfg, params, B, hdv_rows) for ego in cfg.cav_indices
        }

    def layout(self, ego: int) -> QpLayout:
        return self._templates[ego].layout

    def theta_labels(self, ego: int) -> tuple[tuple[str, int], ...]:
        """Per-column labels of the gain Jacobian of ego's QP."""
        return self._templates[ego].theta_labels

    def build_qp(
        self,
        ego: int,
        state: PlatoonState,
        u_rl: dict[int, float],
        estimates: Estimates,
        with_jacobians: bool = True,
    ) -> QpProblem:
        return self._templates[ego].problem(state, u_rl, estimates, self.conformal_c, with_jacobians)

    def filter_step(
        self, state: PlatoonState, u_rl: dict[int, float], estimates: Estimates
    ) -> "FilterResult":
        """Solve every ego's QP at the current state and return the executed
        inputs (each ego actuates only its own correction)."""
        cavs = self.cfg.cav_indices
        u_safe = np.zeros(len(cavs))
        statuses = {}
        sigmas = {}
        for col, ego in enumerate(cavs):
            t = self._templates[ego]
            q = t.q_vector(state, u_rl, estimates, self.conformal_c)
            w, lam, code, _ = kernels.qp_solve(t.Q, t.G, q)
            statuses[ego] = _STATUS_NAMES[code]
            if code == 0:
                u_safe[col] = w[t.layout.u_index(ego)]
                sigmas[ego] = {
                    i: float(w[t.layout.sigma_index(i)]) for i in t.layout.hdv_order
                }
            else:
                # failed QP: fall back to the clamped nominal action
                u_safe[col] = (
                    float(np.clip(u_rl[ego], self.params.a_min, self.params.a_max))
                    - u_rl[ego]
                )
                sigmas[ego] = {i: float("nan") for i in t.layout.hdv_order}
        u_nom = np.array([u_rl[j] for j in cavs])
        return FilterResult(
            u_rl=u_nom, u_safe=u_safe, u_exec=u_nom + u_safe, statuses=statuses, sigmas=sigmas
        )


@dataclass
class FilterResult:
    u_rl: np.ndarray
    u_safe: np.ndarray
    u_exec: np.ndarray
    statuses: dict[int, str]
    sigmas: dict[int, dict[int, float]]

    @property
    def all_optimal(self) -> bool:
        return all(s == "optimal" for s in self.statuses.values())


_STATUS_NAMES = {0: "optimal", 1: "infeasible", 2: "numerical"}


class _EgoTemplate:
    """Precomputed QP structure for one ego CAV."""

    def __init__(self, ego, cfg, params, B, hdv_rows):
        self.ego = ego
        self.cfg = cfg
        self.params = params
        cav_order = cavs_in_range(ego, cfg)
        hdvs = following_hdvs(ego, cfg)
        if hdv_rows == "ego_coupled":
            hdvs = tuple(i for i in hdvs if params.k(i, ego) > 0.0)
        self.layout = QpLayout(ego=ego, cav_order=cav_order, hdv_order=hdvs)
        if not cav_order:
            raise ValueError(f"no CAVs within communication range of {ego}")

        nc, nh = len(cav_order), len(hdvs)
        dim = nc + nh
        self.Q = np.diag([1.0] * nc + [2.0 * params.slack_weight] * nh)

        rows = []
        tags = []
        for j in cav_order:
            r = np.zeros(dim)
            r[self.layout.u_index(j)] = 1.0
            rows.append(r)
            tags.append(("act_hi", j))
            rows.append(-r)
            tags.append(("act_lo", j))
        for j in cav_order:
            r = np.zeros(dim)
            r[self.layout.u_index(j)] = params.tau
            rows.append(r)
            tags.append(("CAV", j))
        for i in hdvs:
            r = np.zeros(dim)
            r[self.layout.sigma_index(i)] = -1.0
            k_ego = params.k(i, ego)
            if k_ego > 0.0 and ego in preceding_cavs(i, cfg):
                r[self.layout.u_index(ego)] = -params.tau * k_ego
            rows.append(r)
            tags.append(("HDV", i))
        self.G = np.vstack(rows) if rows else np.zeros((0, dim))
        self.tags = tuple(tags)
        self.m = len(rows)

        # constant Jacobian of q in the nominal inputs of the in-range CAVs
        J = np.zeros((self.m, nc))
        for r, tag in enumerate(self.tags):
            kind, idx = tag
            if kind == "act_hi":
                J[r, self.layout.u_index(idx)] = -1.0
            elif kind == "act_lo":
                J[r, self.layout.u_index(idx)] = 1.0
            elif kind == "CAV":
                J[r, self.layout.u_index(idx)] = -params.tau
            elif kind == "HDV":
                k_ego = params.k(idx, ego)
                if k_ego > 0.0 and ego in preceding_cavs(idx, cfg):
                    J[r, self.layout.u_index(ego)] = params.tau * k_ego
        self.dq_du_rl = J
        self.theta_labels = tuple(("CAV", j) for j in cav_order) + tuple(
            ("HDV", i) for i in hdvs
        )

        # conformal margin per HDV row scales linearly with the threshold C
        self.econ_coef = {}
        for i in hdvs:
            spec = hdv_cbf_spec(i, params, cfg)
            self.econ_coef[i] = e_con(spec.c1, B, 1.0)

    def q_vector(self, state, u_rl, estimates, C):
        p = self.params
        q = np.empty(self.m)
        for r, (kind, idx) in enumerate(self.tags):
            if kind == "act_hi":
                q[r] = p.a_max - u_rl[idx]
            elif kind == "act_lo":
                q[r] = u_rl[idx] - p.a_min
            elif kind == "CAV":
                gamma = p.gamma_cav.get(idx, 1.0)
                q[r] = (
                    state.v_prev(idx)
                    - state.v(idx)
                    - p.tau * u_rl[idx]
                    + gamma * cbf_value(idx, state, p.tau)
                )
            else:  # HDV row
                i = idx
                if i not in estimates.f_hat:
                    raise KeyError(f"missing car-following estimate for HDV {i}")
                base = state.v_prev(i) - state.v(i) - p.tau * estimates.f_hat[i]
                for j in preceding_cavs(i, self.cfg):
                    k = p.k(i, j)
                    if k == 0.0:
                        continue
                    base -= k * (state.v_prev(j) - state.v(j))
                    if j == self.ego:
                        base += p.tau * k * u_rl[self.ego]
                    else:
                        if j not in estimates.u_hat:
                            raise KeyError(
                                f"missing input estimate for CAV {j} in HDV {i}'s row"
                            )
                        base += p.tau * k * estimates.u_hat[j]
                gamma = p.gamma_hdv.get(i, 1.0)
                h_suf = reduced_order_h(i, state, p, self.cfg)
                q[r] = base + gamma * h_suf - C * self.econ_coef[i]
        return q

    def problem(self, state, u_rl, estimates, C, with_jacobians=True):
        q = self.q_vector(state, u_rl, estimates, C)
        dq_dtheta = None
        if with_jacobians:
            dq_dtheta = np.zeros((self.m, len(self.theta_labels)))
            for r, (kind, idx) in enumerate(self.tags):
                if kind == "CAV":
                    col = self.theta_labels.index(("CAV", idx))
                    dq_dtheta[r, col] = cbf_value(idx, state, self.params.tau)
                elif kind == "HDV":
                    col = self.theta_labels.index(("HDV", idx))
                    dq_dtheta[r, col] = reduced_order_h(idx, state, self.params, self.cfg)
        return QpProblem(
            Q=self.Q,
            G=self.G,
            q=q,
            dq_du_rl=self.dq_du_rl if with_jacobians else None,
            dq_dtheta=dq_dtheta,
            tags=self.tags,
        )


def build_qp(
    ego: int,
    state: PlatoonState,
    u_rl: dict[int, float],
    estimates: Estimates,
    C: float,
    params: SafetyLayerParams,
    cfg: PlatoonConfig,
    hdv_rows: str = "all",
) -> QpProblem:
    """One-shot assembly of ego's safety QP (see CooperativeSafetyFilter
    for the cached variant used inside rollouts)."""
    if ego not in cfg.cav_indices:
        raise ValueError(f"vehicle {ego} is not a CAV")
    B = input_matrix(cfg)
    return _EgoTemplate(ego, cfg, params, B, hdv_rows).problem(state, u_rl, estimates, C)


def solve_ego_qp(problem: QpProblem) -> QpSolution:
    return solve(problem)
