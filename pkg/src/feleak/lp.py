"""Feasibility solvers for box-bounded linear systems, written from scratch.

Two engines behind one result type:

* `simplex_phase1`: bounded-variable phase-1 simplex on a dense tableau.
  Finds a vertex of the feasible set or certifies infeasibility. Pivoting is
  most-negative reduced cost until progress stalls, then Bland's rule, which
  cannot cycle. Every nonbasic variable is held at zero in a local frame;
  variables sitting at their upper bound are represented through the
  substitution x -> range - x ("column flip"), so entering variables always
  increase from zero.

* `analytic_center`: infeasible-start Newton method on the log-barrier of the
  box and inequality constraints, with equality constraints handled through
  their KKT system. Converges to the analytic center of the feasible region,
  an interior point. It cannot certify infeasibility; it reports an iteration
  limit instead.

A vertex pins many variables to their bounds, an interior point balances
them; for underdetermined image recovery the interior point is the faithful
choice and the vertex posterizes. Callers pick per use case.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

SOLVED = "solved"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

EQ_TOL = 1e-6      # accepted equality violation on returned points
BOUND_TOL = 1e-8   # accepted bound / inequality violation


@dataclass
class SolveOutcome:
    x: np.ndarray          # feasible point, or None
    status: str
    iterations: int


def _as_parts(A_eq, b_eq, A_ub, b_ub, lb, ub):
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    m_eq = 0 if A_eq is None else np.asarray(A_eq).shape[0]
    m_ub = 0 if A_ub is None else np.asarray(A_ub).shape[0]
    blocks, rhs = [], []
    if m_eq:
        blocks.append(np.asarray(A_eq, dtype=np.float64))
        rhs.append(np.asarray(b_eq, dtype=np.float64))
    if m_ub:
        blocks.append(np.asarray(A_ub, dtype=np.float64))
        rhs.append(np.asarray(b_ub, dtype=np.float64))
    return lb, ub, m_eq, m_ub, blocks, rhs


def simplex_phase1(A_eq, b_eq, A_ub=None, b_ub=None, lb=None, ub=None,
                   max_iter=50000, time_limit=None, tol=1e-9) -> SolveOutcome:
    """Find any point with A_eq x = b_eq, A_ub x <= b_ub, lb <= x <= ub.

    Minimizes the sum of artificial variables; zero optimum means feasible
    and the structural part of the basis is the answer. A positive optimum
    is a certificate of infeasibility.
    """
    lb, ub, m_eq, m_ub, blocks, rhs = _as_parts(A_eq, b_eq, A_ub, b_ub, lb, ub)
    n = lb.shape[0]
    A = np.vstack(blocks)
    b = np.concatenate(rhs) - A @ lb     # shift x to start at its lower bound
    m = m_eq + m_ub
    rng_x = ub - lb
    n_s = m_ub
    s0 = b[m_eq:] if m_ub else np.zeros(0)
    # artificials: every equality row, plus inequality rows whose slack
    # would start negative
    art_rows = list(range(m_eq)) + [m_eq + i for i in range(m_ub) if s0[i] < -1e-12]
    n_a = len(art_rows)
    N = n + n_s + n_a
    T = np.zeros((m, N))
    T[:, :n] = A
    for i in range(m_ub):
        T[m_eq + i, n + i] = 1.0
    xb = b.copy()
    basis = np.empty(m, dtype=int)
    for i in range(m_ub):
        basis[m_eq + i] = n + i
    for k, row in enumerate(art_rows):
        if xb[row] < 0:
            T[row, :] *= -1.0
            xb[row] = -xb[row]
        T[row, n + n_s + k] = 1.0
        basis[row] = n + n_s + k
    rngv = np.concatenate([rng_x, np.full(n_s, np.inf), np.full(n_a, np.inf)])
    flipped = np.zeros(N, dtype=bool)
    is_basic = np.zeros(N, dtype=bool)
    is_basic[basis] = True
    is_art = np.zeros(N, dtype=bool)
    is_art[n + n_s:] = True
    cost = np.zeros(N)
    cost[n + n_s:] = 1.0
    red = cost - cost[basis] @ T
    obj = float(cost[basis] @ xb)
    stall, last_obj, bland = 0, obj, False
    start = time.perf_counter()
    it = 0
    rows_idx = np.arange(m)
    while it < max_iter:
        if obj < 1e-10:
            break
        if time_limit is not None and it % 256 == 0 \
                and time.perf_counter() - start > time_limit:
            return SolveOutcome(None, ITERATION_LIMIT, it)
        it += 1
        # entering: any nonbasic, non-artificial column with negative
        # reduced cost (left artificials never come back)
        elig = (~is_basic) & (red < -tol) & (~is_art)
        cand = np.flatnonzero(elig)
        if cand.size == 0:
            break  # phase-1 optimum reached with obj > 0
        q = int(cand[0]) if bland else int(cand[np.argmin(red[cand])])
        col = T[:, q].copy()
        # ratio test over three exit events: basic hits lower bound, basic
        # hits upper bound, entering variable spans its own range
        lim, leave, to_upper = rngv[q], -2, False
        pos = col > tol
        if pos.any():
            rows = np.flatnonzero(pos)
            ratios = xb[rows] / col[rows]
            if bland:
                best = float(ratios.min())
                tied = rows[ratios <= best + 1e-12]
                i0 = int(tied[np.argmin(basis[tied])])
                r0 = xb[i0] / col[i0]
            else:
                k0 = int(np.argmin(ratios))
                i0, r0 = int(rows[k0]), float(ratios[k0])
            if r0 < lim:
                lim, leave, to_upper = max(r0, 0.0), i0, False
        neg = col < -tol
        if neg.any():
            rows = np.flatnonzero(neg & np.isfinite(rngv[basis]))
            if rows.size:
                ratios = (rngv[basis[rows]] - xb[rows]) / (-col[rows])
                k0 = int(np.argmin(ratios))
                if ratios[k0] < lim:
                    lim, leave, to_upper = max(float(ratios[k0]), 0.0), int(rows[k0]), True
        if not np.isfinite(lim):
            return SolveOutcome(None, "unbounded", it)
        if leave == -2:
            # entering variable crosses its whole range: bound flip only
            xb -= col * lim
            T[:, q] *= -1.0
            red[q] = -red[q]
            flipped[q] = ~flipped[q]
        else:
            p = leave
            piv = T[p, q]
            T[p, :] /= piv
            xb[p] /= piv
            other = rows_idx != p
            fac = T[other, q].copy()
            T[other, :] -= np.outer(fac, T[p, :])
            xb[other] -= fac * xb[p]
            red -= red[q] * T[p, :]
            old = basis[p]
            is_basic[old] = False
            basis[p] = q
            is_basic[q] = True
            if to_upper:
                # leaving variable parks at its upper bound: flip its column
                # so it reads as zero again
                xb -= T[:, old] * rngv[old]
                T[:, old] *= -1.0
                red[old] = -red[old]
                flipped[old] = ~flipped[old]
        obj = float(cost[basis] @ xb)
        if obj > last_obj - 1e-12:
            stall += 1
            if stall > 80:
                bland = True  # degenerate plateau: switch to Bland for good
        else:
            stall = 0
        last_obj = obj
    if obj >= 1e-10:
        status = INFEASIBLE if it < max_iter else ITERATION_LIMIT
        return SolveOutcome(None, status, it)
    xt = np.zeros(N)
    xt[basis] = xb
    xt = np.where(flipped, rngv - xt, xt)
    return SolveOutcome(xt[:n] + lb, SOLVED, it)


def _barrier_residuals(x, nu, A_eq, b_eq, A_ub, b_ub, lb, ub):
    xl = x - lb
    xu = ub - x
    g = -1.0 / xl + 1.0 / xu
    if A_ub is not None:
        s = b_ub - A_ub @ x
        g = g + A_ub.T @ (1.0 / s)
    r_dual = g + (A_eq.T @ nu if A_eq is not None else 0.0)
    r_pri = (A_eq @ x - b_eq) if A_eq is not None else np.zeros(0)
    return r_dual, r_pri


def analytic_center(A_eq, b_eq, A_ub=None, b_ub=None, lb=None, ub=None,
                    max_iter=100, time_limit=None, tol_pri=1e-9,
                    tol_dual=1e-6) -> SolveOutcome:
    """Newton iteration toward the analytic center of the feasible region.

    Starts at the box midpoint (always strictly inside the box, not
    necessarily on the equalities) and drives the equality residual and the
    barrier gradient to zero together. Steps are damped twice: a 0.99
    fraction-to-boundary cap keeps the iterate strictly interior, and
    backtracking enforces residual decrease.

    Start precondition: the box midpoint must strictly satisfy A_ub x < b_ub.
    Two-sided threshold rows (S, -S with a positive threshold) always do,
    since S maps the midpoint to zero. Generic inequality systems violating
    this are refused immediately with an iteration-limit status; use the
    simplex engine for those.
    """
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    A_eq = None if A_eq is None else np.asarray(A_eq, dtype=np.float64)
    b_eq = None if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    A_ub = None if A_ub is None else np.asarray(A_ub, dtype=np.float64)
    b_ub = None if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    n = lb.shape[0]
    m_eq = 0 if A_eq is None else A_eq.shape[0]
    x = 0.5 * (lb + ub)
    if A_ub is not None and np.any(b_ub - A_ub @ x <= 0):
        # start precondition violated (see docstring): cannot seed the barrier
        return SolveOutcome(None, ITERATION_LIMIT, 0)
    nu = np.zeros(m_eq)
    start = time.perf_counter()
    for it in range(1, max_iter + 1):
        if time_limit is not None and time.perf_counter() - start > time_limit:
            return SolveOutcome(None, ITERATION_LIMIT, it)
        xl = x - lb
        xu = ub - x
        hd = 1.0 / xl ** 2 + 1.0 / xu ** 2
        g = -1.0 / xl + 1.0 / xu
        if A_ub is not None:
            s = b_ub - A_ub @ x
            g = g + A_ub.T @ (1.0 / s)
            H = np.diag(hd) + (A_ub * (1.0 / s ** 2)[:, None]).T @ A_ub
            dense_h = True
        else:
            dense_h = False
        r_pri = (A_eq @ x - b_eq) if m_eq else np.zeros(0)
        r_dual = g + (A_eq.T @ nu if m_eq else 0.0)
        res0 = np.sqrt(np.dot(r_dual, r_dual) + np.dot(r_pri, r_pri))
        if np.max(np.abs(r_pri), initial=0.0) < tol_pri \
                and np.linalg.norm(r_dual) <= tol_dual * max(1.0, np.linalg.norm(g)):
            return SolveOutcome(x, SOLVED, it - 1)
        # Newton step on [H A'; A 0] via the Schur complement in nu
        try:
            if dense_h:
                factor = scipy.linalg.cho_factor(H)
                solve_h = lambda r: scipy.linalg.cho_solve(factor, r)
            else:
                solve_h = lambda r: r / hd[:, None] if r.ndim == 2 else r / hd
            if m_eq:
                hin_at = solve_h(A_eq.T)
                hin_rd = solve_h(r_dual)
                S = A_eq @ hin_at
                rhs = r_pri - A_eq @ hin_rd
                try:
                    dnu = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), rhs)
                except np.linalg.LinAlgError:
                    dnu = np.linalg.lstsq(S, rhs, rcond=None)[0]
                dx = -(hin_rd + hin_at @ dnu)
            else:
                dnu = np.zeros(0)
                dx = -solve_h(r_dual)
        except np.linalg.LinAlgError:
            return SolveOutcome(None, ITERATION_LIMIT, it)
        # keep strictly inside the box and the inequality region
        alpha = 1.0
        mask = dx < 0
        if mask.any():
            alpha = min(alpha, 0.99 * np.min(xl[mask] / -dx[mask]))
        mask = dx > 0
        if mask.any():
            alpha = min(alpha, 0.99 * np.min(xu[mask] / dx[mask]))
        if A_ub is not None:
            ds = A_ub @ dx
            mask = ds > 0
            if mask.any():
                alpha = min(alpha, 0.99 * np.min(s[mask] / ds[mask]))
        # backtrack until the combined residual actually drops
        for _ in range(40):
            xt = x + alpha * dx
            nut = nu + alpha * dnu
            rd, rp = _barrier_residuals(xt, nut, A_eq, b_eq, A_ub, b_ub, lb, ub)
            res = np.sqrt(np.dot(rd, rd) + np.dot(rp, rp))
            if res <= (1.0 - 0.01 * alpha) * res0:
                break
            alpha *= 0.5
        else:
            return SolveOutcome(None, ITERATION_LIMIT, it)
        x = xt
        nu = nut
    rd, rp = _barrier_residuals(x, nu, A_eq, b_eq, A_ub, b_ub, lb, ub)
    if np.max(np.abs(rp), initial=0.0) < tol_pri:
        return SolveOutcome(x, SOLVED, max_iter)
    return SolveOutcome(None, ITERATION_LIMIT, max_iter)


def check_point(x, A_eq, b_eq, A_ub=None, b_ub=None, lb=None, ub=None,
                eq_tol=EQ_TOL, bound_tol=BOUND_TOL) -> bool:
    """Independent feasibility check at the advertised tolerances."""
    if A_eq is not None and np.max(np.abs(A_eq @ x - b_eq), initial=0.0) > eq_tol:
        return False
    if A_ub is not None and np.max(A_ub @ x - b_ub, initial=0.0) > bound_tol:
        return False
    if lb is not None and np.min(x - lb) < -bound_tol:
        return False
    if ub is not None and np.min(ub - x) < -bound_tol:
        return False
    return True
