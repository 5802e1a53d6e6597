"""Pure-numpy implementations of the hot kernels.

These are the reference semantics for the compiled extension in
``_speedups.pyx``; the two must agree to float precision (see the backend
parity tests).  Problem sizes are tiny (QP dimension <= ~16), so everything
uses dense linear algebra with per-iteration re-factorization.
"""

from __future__ import annotations

import numpy as np

QP_OPTIMAL = 0
QP_INFEASIBLE = 1
QP_NUMERICAL = 2

_ADD_TOL = 1e-10  # constraint counts as violated beyond this
_ZERO_TOL = 1e-11  # curvature below this means the step direction vanished


def platoon_accels(spacing, velocity, head_velocity, cav_mask, params, out):
    """FVD accelerations for every vehicle (CAV slots are filled too and
    overwritten by the caller).  params rows: (alpha, beta, s_st, s_go, v_max).
    """
    n = spacing.shape[0]
    for k in range(n):
        alpha, beta, s_st, s_go, v_max = params[k]
        s = spacing[k]
        if s <= s_st:
            v_des = 0.0
        elif s >= s_go:
            v_des = v_max
        else:
            v_des = 0.5 * v_max * (1.0 - np.cos(np.pi * (s - s_st) / (s_go - s_st)))
        v_prev = head_velocity if k == 0 else velocity[k - 1]
        out[k] = alpha * (v_des - velocity[k]) + beta * (v_prev - velocity[k])
    return out


def qp_solve(Q, G, q, max_iter=0):
    """Dual active-set solve of min 0.5 w'Qw  s.t.  Gw <= q, Q > 0.

    Starts from the unconstrained optimum w = 0 and adds violated
    constraints one at a time, taking combined primal/dual steps and
    dropping blocking constraints, until the worst violation is gone or the
    problem is detected infeasible.

    Returns (w, lam, status, iterations).
    """
    Q = np.asarray(Q, dtype=float)
    G = np.asarray(G, dtype=float)
    q = np.asarray(q, dtype=float)
    n = Q.shape[0]
    m = G.shape[0]
    w = np.zeros(n)
    lam = np.zeros(m)
    if m == 0:
        return w, lam, QP_OPTIMAL, 0
    if max_iter <= 0:
        max_iter = 50 * (n + m + 1)

    active: list[int] = []
    iters = 0
    while True:
        # most violated inactive constraint
        resid = G @ w - q
        resid[active] = -np.inf
        p = int(np.argmax(resid))
        if resid[p] <= _ADD_TOL:
            return w, lam, QP_OPTIMAL, iters

        # resolve constraint p, possibly dropping blockers on the way
        while True:
            iters += 1
            if iters > max_iter:
                return w, lam, QP_NUMERICAL, iters

            gp = G[p]
            qinv_gp = np.linalg.solve(Q, gp)
            if active:
                GA = G[active]
                S = GA @ np.linalg.solve(Q, GA.T)
                try:
                    r = np.linalg.solve(S, GA @ qinv_gp)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(S, GA @ qinv_gp, rcond=None)[0]
                z = -(qinv_gp - np.linalg.solve(Q, GA.T @ r))
            else:
                r = np.zeros(0)
                z = -qinv_gp

            curv = -(gp @ z)  # = gp' H gp >= 0
            viol = gp @ w - q[p]

            # dual blocking step: first active multiplier driven to zero
            t1 = np.inf
            blocker = -1
            for idx, k in enumerate(active):
                if r[idx] > _ZERO_TOL:
                    cand = lam[k] / r[idx]
                    if cand < t1:
                        t1 = cand
                        blocker = k
            t2 = viol / curv if curv > _ZERO_TOL else np.inf

            if t1 == np.inf and t2 == np.inf:
                return w, lam, QP_INFEASIBLE, iters

            t = min(t1, t2)
            if t2 < np.inf:
                w = w + t * z
            for idx, k in enumerate(active):
                lam[k] -= t * r[idx]
            lam[p] += t

            if t == t2:
                active.append(p)
                break  # p satisfied; go look for the next violation
            # partial (dual) step: drop the blocker, keep resolving p
            active.remove(blocker)
            lam[blocker] = 0.0
