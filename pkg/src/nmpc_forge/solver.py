"""Built-in NLP solution stack: dense active-set QP under an SQP method.

The QP solver handles
    min 1/2 x'Hx + c'x   s.t.  lbA <= Ax <= ubA,  lbx <= x <= ubx
with equalities written as equal bounds.  Equalities are eliminated through
an SVD null-space basis, then a dual active-set method (Goldfarb-Idnani
family) walks one-sided inequality constraints to optimality: it needs no
feasible starting point and detects infeasibility cleanly.  A warm-start
active set is honored by pre-loading the working set.

The SQP method linearizes the stage-structured NLP, solves the QP with the
previous active set, globalizes with an l1 merit line search, and declares
optimality on the KKT residuals of the nonlinear problem.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import expr as ex


class SolverError(ValueError):
    pass


# ---------------------------------------------------------------------------
# QP data and the active-set solver
# ---------------------------------------------------------------------------


@dataclass
class Qp:
    H: np.ndarray
    c: np.ndarray
    A: np.ndarray
    lbA: np.ndarray
    ubA: np.ndarray
    lbx: np.ndarray
    ubx: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n) if np.size(self.A) \
            else np.zeros((0, n))
        self.lbA = np.asarray(self.lbA, dtype=float).reshape(-1)
        self.ubA = np.asarray(self.ubA, dtype=float).reshape(-1)
        self.lbx = np.asarray(self.lbx, dtype=float).reshape(-1)
        self.ubx = np.asarray(self.ubx, dtype=float).reshape(-1)
        if self.H.shape != (n, n):
            raise SolverError("H must be n x n")
        if not (self.lbA.size == self.ubA.size == self.A.shape[0]):
            raise SolverError("row bounds must match A")
        if not (self.lbx.size == self.ubx.size == n):
            raise SolverError("variable bounds must match n")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass
class QpResult:
    x: np.ndarray
    lam_A: np.ndarray
    lam_x: np.ndarray
    active_set: list[int]
    status: str  # "optimal" | "infeasible" | "max_iter" | "singular"
    iterations: int


from collections import OrderedDict

_NULLSPACE_CACHE: "OrderedDict[bytes, tuple]" = OrderedDict()
_FACTOR_CACHE: "OrderedDict[bytes, tuple]" = OrderedDict()


def _cached(cache: OrderedDict, key: bytes, build, limit: int = 4):
    hit = cache.get(key)
    if hit is not None:
        cache.move_to_end(key)
        return hit
    val = build()
    cache[key] = val
    while len(cache) > limit:
        cache.popitem(last=False)
    return val


def _chol_or_jitter(G: np.ndarray, tau0: float = 1e-14):
    """Cholesky with an escalating diagonal shift; None when hopeless."""
    scale = max(1.0, float(np.trace(np.abs(G))) / max(G.shape[0], 1))
    tau = 0.0
    for _ in range(80):
        try:
            L = np.linalg.cholesky(G + tau * np.eye(G.shape[0]))
            return L, tau
        except np.linalg.LinAlgError:
            tau = max(2.0 * tau, tau0 * scale)
            if tau > 1e12 * scale:
                break
    return None, tau


def solve_qp(qp: Qp, x0: np.ndarray | None = None,
             active_set: Sequence[int] | None = None,
             max_iterations: int | None = None) -> QpResult:
    """Dense convex QP by null-space elimination + dual active set.

    Constraint codes in `active_set`: row i at its lower bound is `2*i`, at
    its upper bound `2*i + 1`; variable j at a bound is `2*m + 2*j (+1)`.
    Only inequality sides appear (equalities are always active).
    """
    n, m = qp.n, qp.m
    feas_tol = 1e-10
    if np.any(qp.lbA > qp.ubA + feas_tol) or np.any(qp.lbx > qp.ubx + feas_tol):
        return QpResult(np.zeros(n), np.zeros(m), np.zeros(n), [], "infeasible", 0)
    if max_iterations is None:
        max_iterations = 10 * (n + m + 1)

    # Split equalities (equal bounds) from inequality sides.
    row_eq = np.isclose(qp.lbA, qp.ubA, rtol=0.0, atol=0.0)
    var_eq = qp.lbx == qp.ubx
    eq_rows = [(qp.A[i], qp.lbA[i], ("row", i)) for i in range(m) if row_eq[i]]
    for j in range(n):
        if var_eq[j]:
            e = np.zeros(n)
            e[j] = 1.0
            eq_rows.append((e, qp.lbx[j], ("var", j)))

    # One-sided inequality pool, in deterministic code order.
    cons_rows = []
    codes = []
    for i in range(m):
        if row_eq[i]:
            continue
        if np.isfinite(qp.lbA[i]):
            cons_rows.append((qp.A[i], qp.lbA[i]))
            codes.append(2 * i)
        if np.isfinite(qp.ubA[i]):
            cons_rows.append((-qp.A[i], -qp.ubA[i]))
            codes.append(2 * i + 1)
    for j in range(n):
        if var_eq[j]:
            continue
        e = np.zeros(n)
        e[j] = 1.0
        if np.isfinite(qp.lbx[j]):
            cons_rows.append((e, qp.lbx[j]))
            codes.append(2 * m + 2 * j)
        if np.isfinite(qp.ubx[j]):
            cons_rows.append((-e, -qp.ubx[j]))
            codes.append(2 * m + 2 * j + 1)

    # Null-space reduction for the equalities.  Receding-horizon use hits the
    # same equality Jacobian over and over, so the SVD is worth caching.
    if eq_rows:
        Aeq = np.array([r[0] for r in eq_rows])
        beq = np.array([r[1] for r in eq_rows])
        U, s, Vt = _cached(_NULLSPACE_CACHE, Aeq.tobytes(),
                           lambda: np.linalg.svd(Aeq, full_matrices=True))
        tol = max(Aeq.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
        r = int(np.sum(s > tol))
        x_p = Vt[:r].T @ ((U[:, :r].T @ beq) / s[:r]) if r else np.zeros(n)
        if np.linalg.norm(Aeq @ x_p - beq, ord=np.inf) > 1e-8 * (
                1.0 + np.linalg.norm(beq, ord=np.inf)):
            return QpResult(np.zeros(n), np.zeros(m), np.zeros(n), [],
                            "infeasible", 0)
        Z = Vt[r:].T  # n x (n - r)
    else:
        Aeq = np.zeros((0, n))
        beq = np.zeros(0)
        x_p = np.zeros(n)
        Z = np.eye(n)
        U = np.zeros((0, 0))
        s = np.zeros(0)
        Vt = np.zeros((0, n))
        r = 0

    n_red = Z.shape[1]
    C = np.array([c for c, _ in cons_rows]) if cons_rows else np.zeros((0, n))
    d = np.array([b for _, b in cons_rows]) if cons_rows else np.zeros(0)
    Cz = C @ Z if n_red else np.zeros((len(cons_rows), 0))
    dz = d - C @ x_p if len(cons_rows) else np.zeros(0)

    lam_A = np.zeros(m)
    lam_x = np.zeros(n)

    def finish(v, u, ws, status, iters):
        x = x_p + (Z @ v if n_red else 0.0)
        lam_A[:] = 0.0
        lam_x[:] = 0.0
        for idx, mult in zip(ws, u):
            code = codes[idx]
            if code < 2 * m:
                i, upper = divmod(code, 2)
                lam_A[i] = mult if upper else -mult
            else:
                j, upper = divmod(code - 2 * m, 2)
                lam_x[j] = mult if upper else -mult
        if eq_rows and r:
            resid = -(qp.H @ x + qp.c + qp.A.T @ lam_A + lam_x)
            # A_eq' lam_eq = resid, minimum-norm through the SVD factors.
            lam_eq = U[:, :r] @ ((Vt[:r] @ resid) / s[:r])
            for (row, _b, tag), mult in zip(eq_rows, lam_eq):
                if tag[0] == "row":
                    lam_A[tag[1]] += mult
                else:
                    lam_x[tag[1]] += mult
        return QpResult(x, lam_A, lam_x, sorted(codes[i] for i in ws),
                        status, iters)

    if n_red == 0:
        # Fully determined by equalities; check the inequality sides.
        if len(cons_rows) and np.any(C @ x_p - d < -1e-9 * (1 + np.abs(d))):
            return QpResult(np.zeros(n), np.zeros(m), np.zeros(n), [],
                            "infeasible", 0)
        return finish(np.zeros(0), [], [], "optimal", 0)

    G = Z.T @ qp.H @ Z
    G = 0.5 * (G + G.T)
    a = Z.T @ (qp.c + qp.H @ x_p)

    def factor():
        L_, tau_ = _chol_or_jitter(G)
        if L_ is None:
            return None
        G_ = G + tau_ * np.eye(n_red) if tau_ > 0.0 else G
        if tau_ > 0.0:
            L_ = np.linalg.cholesky(G_)
        return G_, np.linalg.inv(L_).T

    got = _cached(_FACTOR_CACHE, G.tobytes(), factor)
    if got is None:
        return QpResult(np.zeros(n), np.zeros(m), np.zeros(n), [], "singular", 0)
    G, J0 = got

    # Goldfarb-Idnani state: J with J'GJ = I, working-set normals factored
    # as J' N = [R; 0].  Rank-one working-set changes are Givens updates, so
    # each iteration costs O(n^2) and stays numerically tight.
    J = J0.copy()
    R = np.zeros((n_red, n_red))
    v = -(J @ (J.T @ a))
    ws: list[int] = []
    u: list[float] = []
    iters = 0

    def rotate_cols(i, c_, s_):
        col_i = J[:, i].copy()
        col_i1 = J[:, i + 1]
        J[:, i] = c_ * col_i + s_ * col_i1
        J[:, i + 1] = -s_ * col_i + c_ * col_i1

    def add_to_working_set(p, u_plus, d_vec):
        q = len(ws)
        for i in range(n_red - 1, q, -1):
            di, dj = d_vec[i - 1], d_vec[i]
            if dj == 0.0:
                continue
            r_ = math.hypot(di, dj)
            c_, s_ = di / r_, dj / r_
            d_vec[i - 1] = r_
            d_vec[i] = 0.0
            rotate_cols(i - 1, c_, s_)
        R[: q + 1, q] = d_vec[: q + 1]
        ws.append(p)
        u.append(u_plus)

    def drop_from_working_set(k):
        q = len(ws)
        R[:, k: q - 1] = R[:, k + 1: q]
        R[:, q - 1] = 0.0
        for i in range(k, q - 1):
            ri, rj = R[i, i], R[i + 1, i]
            if rj != 0.0:
                r_ = math.hypot(ri, rj)
                c_, s_ = ri / r_, rj / r_
                row_i = R[i, i: q - 1].copy()
                row_i1 = R[i + 1, i: q - 1]
                R[i, i: q - 1] = c_ * row_i + s_ * row_i1
                R[i + 1, i: q - 1] = -s_ * row_i + c_ * row_i1
                rotate_cols(i, c_, s_)
        ws.pop(k)
        u.pop(k)

    # Seed the working set from the warm start, keeping dual feasibility.
    if active_set:
        code_index = {c: i for i, c in enumerate(codes)}
        seed = [code_index[c] for c in active_set if c in code_index]
        Nseed: list[int] = []
        for idx in seed:
            cand = Nseed + [idx]
            if np.linalg.matrix_rank(Cz[cand], tol=1e-10) == len(cand):
                Nseed.append(idx)
        while Nseed:
            q = len(Nseed)
            Nw = Cz[Nseed]
            K = np.zeros((n_red + q, n_red + q))
            K[:n_red, :n_red] = G
            K[:n_red, n_red:] = Nw.T
            K[n_red:, :n_red] = Nw
            rhs = np.concatenate([-a, dz[Nseed]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                Nseed = []
                break
            v_seed = sol[:n_red]
            u_seed = list(-sol[n_red:])
            if min(u_seed) >= 0.0:
                v = v_seed
                ws = Nseed
                u = u_seed
                break
            Nseed.pop(int(np.argmin(u_seed)))
        if ws:
            B = J0.T @ Cz[ws].T  # = L^-1 N'
            Qfull, Rthin = np.linalg.qr(B, mode="complete")
            J = J0 @ Qfull
            R[:, :] = 0.0
            R[: len(ws), : len(ws)] = Rthin[: len(ws), : len(ws)]

    big = np.inf
    while True:
        if iters > max_iterations:
            return finish(v, u, ws, "max_iter", iters)
        viol = dz - Cz @ v if len(cons_rows) else np.zeros(0)
        if len(viol):
            viol[ws] = -np.inf  # working-set rows are active by construction
        if len(viol) == 0 or viol.max() <= 1e-10 * (1.0 + np.abs(dz).max(initial=0.0)):
            return finish(v, u, ws, "optimal", iters)
        p = int(np.argmax(viol))
        n_plus = Cz[p]
        # Bring constraint p into the working set; its multiplier u_plus
        # accumulates over partial (dual) steps.
        u_plus = 0.0
        while True:
            iters += 1
            if iters > max_iterations:
                return finish(v, u, ws, "max_iter", iters)
            q = len(ws)
            d_vec = J.T @ n_plus
            z = J[:, q:] @ d_vec[q:]
            if q:
                try:
                    rdir = np.linalg.solve(R[:q, :q], d_vec[:q])
                except np.linalg.LinAlgError:
                    return finish(v, u, ws, "singular", iters)
            else:
                rdir = np.zeros(0)
            ztn = float(n_plus @ z)
            z_scale = float(np.linalg.norm(n_plus) * np.linalg.norm(z))
            # Dual step length (blocking constraint in the working set).
            t1 = big
            blk = -1
            for ii, (ui, ri) in enumerate(zip(u, rdir)):
                if ri > 1e-14:
                    ratio = ui / ri
                    if ratio < t1 - 1e-15:
                        t1 = ratio
                        blk = ii
            if ztn <= 1e-11 * max(1.0, z_scale):
                # Incoming row depends on the working set: dual step only.
                if blk < 0 or not np.isfinite(t1):
                    return finish(v, u, ws, "infeasible", iters)
                u_plus += t1
                u = [ui - t1 * ri for ui, ri in zip(u, rdir)]
                drop_from_working_set(blk)
                continue
            t2 = float(dz[p] - n_plus @ v) / ztn
            t = min(t1, t2)
            v = v + t * z
            u = [ui - t * ri for ui, ri in zip(u, rdir)]
            u_plus += t
            if t == t2 and t <= t1:
                add_to_working_set(p, u_plus, d_vec)
                break
            drop_from_working_set(blk)


# ---------------------------------------------------------------------------
# SQP options, stats, solution
# ---------------------------------------------------------------------------


@dataclass
class SqpOptions:
    max_iterations: int = 50
    tol_primal: float = 1e-8
    tol_dual: float = 1e-6
    hessian: str = "auto"  # "auto" | "exact" | "gauss_newton"
    reg_floor: float = 1e-8
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 20
    penalty_growth: float = 1.5
    penalty_floor: float = 1.0
    max_qp_iterations: int | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise SolverError("max_iterations must be >= 1")
        for name in ("tol_primal", "tol_dual", "reg_floor"):
            if getattr(self, name) <= 0:
                raise SolverError(f"{name} must be positive")
        if self.hessian not in ("auto", "exact", "gauss_newton"):
            raise SolverError(f"unknown Hessian mode {self.hessian!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SqpOptions":
        return cls(**(d or {}))


@dataclass
class SolveStats:
    iterations: int = 0
    solve_time_s: float = 0.0
    status: str = "solved"
    primal_inf: float = 0.0
    dual_inf: float = 0.0
    qp_iterations: int = 0

    def as_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "solve_time_s": self.solve_time_s,
            "primal_inf": self.primal_inf,
            "dual_inf": self.dual_inf,
            "qp_iterations": self.qp_iterations,
        }


@dataclass
class Solution:
    w: np.ndarray
    lam_g: np.ndarray
    lam_h: np.ndarray
    lam_bounds: np.ndarray
    objective: float
    stats: SolveStats
    active_set: list[int] = field(default_factory=list)
    # One record per major iteration: (merit before, merit after accepted
    # step, step size, directional derivative, penalty).
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# SQP driver
# ---------------------------------------------------------------------------


def _solve_elastic(H, grad, Jg, g0, Jh, h0, lb, ub, rho, reg, max_iterations):
    """l1-penalty QP: equality and inequality rows get penalized slacks, so
    the subproblem is always feasible and its step minimizes the local model
    of the merit function."""
    n = grad.size
    m_g = g0.size
    m_h = h0.size
    n_aug = n + 2 * m_g + m_h
    H_aug = np.zeros((n_aug, n_aug))
    H_aug[:n, :n] = H
    H_aug[np.arange(n, n_aug), np.arange(n, n_aug)] = reg
    c_aug = np.concatenate([grad, np.full(2 * m_g + m_h, rho)])
    rows = np.zeros((m_g + m_h, n_aug))
    if m_g:
        rows[:m_g, :n] = Jg
        rows[:m_g, n:n + m_g] = -np.eye(m_g)
        rows[:m_g, n + m_g:n + 2 * m_g] = np.eye(m_g)
    if m_h:
        rows[m_g:, :n] = Jh
        rows[m_g:, n + 2 * m_g:] = -np.eye(m_h)
    lbA = np.concatenate([-g0, np.full(m_h, -np.inf)])
    ubA = np.concatenate([-g0, -h0])
    lb_aug = np.concatenate([lb, np.zeros(2 * m_g + m_h)])
    ub_aug = np.concatenate([ub, np.full(2 * m_g + m_h, np.inf)])
    qp = Qp(H_aug, c_aug, rows, lbA, ubA, lb_aug, ub_aug)
    res = solve_qp(qp, max_iterations=max_iterations)
    if res.status != "optimal":
        return None
    return QpResult(res.x[:n], res.lam_A, res.lam_x[:n], [], res.status,
                    res.iterations)


def _violations(ev, w, g, h):
    bound_viol = np.maximum(ev.lbw - w, 0.0) + np.maximum(w - ev.ubw, 0.0)
    parts = [np.abs(g).max(initial=0.0)]
    if h.size:
        parts.append(np.maximum(h, 0.0).max(initial=0.0))
    parts.append(bound_viol.max(initial=0.0))
    return max(parts)


def _theta(g, h):
    t = float(np.abs(g).sum())
    if h.size:
        t += float(np.maximum(h, 0.0).sum())
    return t


def sqp_solve(nlp, p, init=None, opts: SqpOptions | None = None) -> Solution:
    """Solve the transcribed problem for one parameter vector.

    `init` may be a primal vector, a previous `Solution` (hot start), or
    None for the default initializer.
    """
    opts = opts or SqpOptions()
    p = np.asarray(p, dtype=float).reshape(-1)
    ev = nlp.evaluator(p)
    n_w = ev.n_w

    warm_active: list[int] = []
    lam_g = np.zeros(ev.m_g)
    lam_h = np.zeros(ev.m_h)
    if init is None:
        w = nlp.default_init(p) if hasattr(nlp, "default_init") else np.zeros(n_w)
    elif isinstance(init, Solution):
        w = init.w.copy()
        if init.lam_g.size == ev.m_g:
            lam_g = init.lam_g.copy()
        if init.lam_h.size == ev.m_h:
            lam_h = init.lam_h.copy()
        warm_active = list(init.active_set)
    else:
        w = np.asarray(init, dtype=float).reshape(-1).copy()
        if w.size != n_w:
            raise SolverError(f"initial guess must have {n_w} entries")
    w = np.clip(w, ev.lbw, ev.ubw)

    t_start = time.perf_counter()
    stats = SolveStats(status="max_iter")
    rho = opts.penalty_floor
    qp_iters_total = 0
    trace: list = []
    objective = math.nan
    mode = opts.hessian
    if mode == "auto":
        mode = "gauss_newton" if getattr(ev, "has_gn", False) else "exact"
    if mode == "gauss_newton" and not getattr(ev, "has_gn", False):
        mode = "exact"

    def fail(status, it):
        stats.status = status
        stats.iterations = it
        stats.solve_time_s = time.perf_counter() - t_start
        stats.qp_iterations = qp_iters_total
        return Solution(w, lam_g, lam_h, np.zeros(n_w), objective, stats,
                        warm_active, trace)

    sticky_elastic = False
    for it in range(1, opts.max_iterations + 1):
        f0 = ev.f(w)
        g0 = ev.g(w)
        h0 = ev.h(w)
        grad = ev.grad(w)
        Jg = ev.jac_g(w)
        Jh = ev.jac_h(w)
        pieces = [np.atleast_1d(np.asarray(x, dtype=float)) for x in
                  (f0, g0, h0, grad)]
        if any(not np.all(np.isfinite(x)) for x in pieces) or \
                not np.all(np.isfinite(Jg)) or not np.all(np.isfinite(Jh)):
            return fail("numerical_error", it - 1)

        if mode == "gauss_newton":
            H = ev.gn_hess(w)
        else:
            H = ev.hess_lag(w, 1.0, lam_g, lam_h)
        if H is None or not np.all(np.isfinite(H)):
            return fail("numerical_error", it - 1)
        H = 0.5 * (H + H.T)
        L, tau = _chol_or_jitter(H, tau0=opts.reg_floor)
        if L is None:
            return fail("numerical_error", it - 1)
        if tau > 0.0:
            H = H + tau * np.eye(n_w)

        elastic = sticky_elastic
        res = None
        if not elastic:
            rows = np.vstack([Jg, Jh]) if (Jg.size or Jh.size) else np.zeros((0, n_w))
            lbA = np.concatenate([-g0, np.full(h0.shape, -np.inf)])
            ubA = np.concatenate([-g0, -h0])
            qp = Qp(H, grad, rows, lbA, ubA, ev.lbw - w, ev.ubw - w)
            res = solve_qp(qp, active_set=warm_active,
                           max_iterations=opts.max_qp_iterations)
            qp_iters_total += res.iterations
            if res.status == "infeasible":
                elastic = True
            elif res.status in ("singular", "max_iter"):
                return fail("numerical_error", it)
            else:
                warm_active = res.active_set
        if elastic:
            # Inconsistent linearization: fall back to the penalized QP whose
            # step minimizes the local model of the l1 merit function under
            # the same penalty, which guarantees a merit descent direction.
            rho = max(rho, 1e3)
            res = _solve_elastic(H, grad, Jg, g0, Jh, h0, ev.lbw - w,
                                 ev.ubw - w, rho,
                                 opts.reg_floor, opts.max_qp_iterations)
            if res is None:
                return fail("infeasible_qp", it)
            qp_iters_total += res.iterations
            warm_active = []
        d = res.x
        lam_g_new = res.lam_A[: ev.m_g]
        lam_h_new = res.lam_A[ev.m_g:]
        lam_b_new = res.lam_x
        if elastic:
            # Stay in elastic mode until the linearization is consistent.
            theta_lin = _theta(g0 + Jg @ d if ev.m_g else g0,
                               h0 + Jh @ d if ev.m_h else h0)
            sticky_elastic = theta_lin > opts.tol_primal

        # l1 merit line search with Armijo condition.
        theta0 = _theta(g0, h0)
        theta_pred = _theta(g0 + Jg @ d if ev.m_g else g0,
                            h0 + Jh @ d if ev.m_h else h0)
        if not elastic:
            lam_scale = max(
                np.abs(lam_g_new).max(initial=0.0),
                np.abs(lam_h_new).max(initial=0.0),
                np.abs(lam_b_new).max(initial=0.0),
            )
            rho = max(rho, opts.penalty_growth * lam_scale, opts.penalty_floor)
        phi0 = f0 + rho * theta0
        D = float(grad @ d) + rho * (theta_pred - theta0)
        alpha = 1.0
        accepted = False
        step_norm = float(np.abs(d).max(initial=0.0))
        for _ in range(opts.max_backtracks + 1):
            w_trial = np.clip(w + alpha * d, ev.lbw, ev.ubw)
            f_t = ev.f(w_trial)
            g_t = ev.g(w_trial)
            h_t = ev.h(w_trial)
            phi_t = f_t + rho * _theta(g_t, h_t)
            if np.isfinite(phi_t) and phi_t <= phi0 + opts.armijo_c1 * alpha * D + 1e-14:
                accepted = True
                break
            alpha *= opts.backtrack_factor
        if not accepted:
            return fail("line_search_failure", it)
        trace.append((phi0, phi_t, alpha, D, rho))

        w = w_trial
        lam_g, lam_h, lam_b = lam_g_new, lam_h_new, lam_b_new
        objective = ev.f(w)

        g1 = ev.g(w)
        h1 = ev.h(w)
        grad1 = ev.grad(w)
        Jg1 = ev.jac_g(w)
        Jh1 = ev.jac_h(w)
        primal_inf = _violations(ev, w, g1, h1)
        stat = grad1.copy()
        if Jg1.size:
            stat += Jg1.T @ lam_g
        if Jh1.size:
            stat += Jh1.T @ lam_h
        stat += lam_b
        dual_inf = float(np.abs(stat).max(initial=0.0))
        stats.iterations = it
        if primal_inf <= opts.tol_primal and \
                dual_inf <= opts.tol_dual * (1.0 + np.abs(grad1).max(initial=0.0)):
            stats.status = "solved"
            stats.primal_inf = primal_inf
            stats.dual_inf = dual_inf
            stats.solve_time_s = time.perf_counter() - t_start
            stats.qp_iterations = qp_iters_total
            return Solution(w, lam_g, lam_h, lam_b, float(objective), stats,
                            warm_active, trace)
        if step_norm <= 1e-14 * (1.0 + np.abs(w).max(initial=0.0)):
            # No progress possible; report where we stand.
            stats.status = "max_iter"
            break

    g1 = ev.g(w)
    h1 = ev.h(w)
    stats.primal_inf = _violations(ev, w, g1, h1)
    grad1 = ev.grad(w)
    stat = grad1.copy()
    if ev.m_g:
        stat += ev.jac_g(w).T @ lam_g
    if ev.m_h:
        stat += ev.jac_h(w).T @ lam_h
    stats.dual_inf = float(np.abs(stat).max(initial=0.0))
    stats.solve_time_s = time.perf_counter() - t_start
    stats.qp_iterations = qp_iters_total
    return Solution(w, lam_g, lam_h, np.zeros(n_w), float(objective), stats,
                    warm_active, trace)


def kkt_residual(nlp, point, multipliers, p):
    """(primal inf, dual inf, complementarity) at a point.

    `multipliers` is (lam_g, lam_h, lam_bounds); missing entries are zero.
    """
    ev = nlp.evaluator(np.asarray(p, dtype=float).reshape(-1))
    w = np.asarray(point, dtype=float).reshape(-1)
    lam_g, lam_h, lam_b = multipliers
    lam_g = np.zeros(ev.m_g) if lam_g is None else np.asarray(lam_g, float)
    lam_h = np.zeros(ev.m_h) if lam_h is None else np.asarray(lam_h, float)
    lam_b = np.zeros(ev.n_w) if lam_b is None else np.asarray(lam_b, float)
    g = ev.g(w)
    h = ev.h(w)
    primal = _violations(ev, w, g, h)
    stat = ev.grad(w)
    if g.size:
        stat = stat + ev.jac_g(w).T @ lam_g
    if h.size:
        stat = stat + ev.jac_h(w).T @ lam_h
    stat = stat + lam_b
    dual = float(np.abs(stat).max(initial=0.0))
    comp = float(np.abs(lam_h * h).sum()) if h.size else 0.0
    return primal, dual, comp


# ---------------------------------------------------------------------------
# Flat NLP: plain FunctionDefs behind the evaluator protocol
# ---------------------------------------------------------------------------


class FlatNlp:
    """An NLP given directly as functions of (w, p); derivative functions
    are derived symbolically.  Used for solver-level tests and as the
    reference implementation of the evaluator protocol."""

    def __init__(self, f: ex.FunctionDef, g: ex.FunctionDef | None = None,
                 h: ex.FunctionDef | None = None,
                 lbw=None, ubw=None):
        self.f_fn = f
        self.g_fn = g
        self.h_fn = h
        self.n_w = f.inputs[0].n
        self.n_p = f.inputs[1].n if f.n_in > 1 else 0
        self.lbw = np.full(self.n_w, -np.inf) if lbw is None else \
            np.asarray(lbw, dtype=float)
        self.ubw = np.full(self.n_w, np.inf) if ubw is None else \
            np.asarray(ubw, dtype=float)
        self.m_g = g.outputs[0].n if g is not None else 0
        self.m_h = h.outputs[0].n if h is not None else 0
        self._derived: dict = {}

    def default_init(self, p):
        return np.zeros(self.n_w)

    def pack_parameters(self, values):
        return np.zeros(max(self.n_p, 1))

    def _d(self, key):
        if key in self._derived:
            return self._derived[key]
        w = self.f_fn.inputs[0]
        if key == "grad":
            fn = ex.jacobian(self.f_fn, 0, 0, mode="reverse")
        elif key == "jac_g":
            fn = ex.jacobian(self.g_fn, 0, 0)
        elif key == "jac_h":
            fn = ex.jacobian(self.h_fn, 0, 0)
        elif key == "hess_f":
            fn = ex.hessian(self.f_fn, 0)
        elif key in ("hess_g", "hess_h"):
            src = self.g_fn if key == "hess_g" else self.h_fn
            lam = ex.sym("lam_" + key[-1], src.outputs[0].n)
            out = src.outputs[0]
            dot = ex.sum_entries(lam * out) if out.n > 1 else lam * out
            inputs = list(src.inputs) + [lam]
            fn = ex.hessian(ex.FunctionDef(key, inputs, [dot]), 0)
        else:
            raise KeyError(key)
        self._derived[key] = fn
        return fn

    def evaluator(self, p):
        return _FlatEvaluator(self, np.asarray(p, dtype=float).reshape(-1))


class _FlatEvaluator:
    def __init__(self, nlp: FlatNlp, p):
        self.nlp = nlp
        self.p = p if p.size else np.zeros(1)
        self.n_w = nlp.n_w
        self.m_g = nlp.m_g
        self.m_h = nlp.m_h
        self.lbw = nlp.lbw
        self.ubw = nlp.ubw
        self.has_gn = False

    def _args(self, w):
        if self.nlp.f_fn.n_in > 1:
            return [np.asarray(w, float), self.p]
        return [np.asarray(w, float)]

    def _fnargs(self, fn, w):
        if fn.n_in > 1:
            return [np.asarray(w, float), self.p][: fn.n_in]
        return [np.asarray(w, float)]

    def f(self, w):
        return float(ex.feval(self.nlp.f_fn, self._fnargs(self.nlp.f_fn, w))[0][0])

    def grad(self, w):
        fn = self.nlp._d("grad")
        return ex.feval(fn, self._fnargs(fn, w))[0]

    def g(self, w):
        if self.nlp.g_fn is None:
            return np.zeros(0)
        fn = self.nlp.g_fn
        return ex.feval(fn, self._fnargs(fn, w))[0]

    def h(self, w):
        if self.nlp.h_fn is None:
            return np.zeros(0)
        fn = self.nlp.h_fn
        return ex.feval(fn, self._fnargs(fn, w))[0]

    def jac_g(self, w):
        if self.nlp.g_fn is None:
            return np.zeros((0, self.n_w))
        fn = self.nlp._d("jac_g")
        return ex.feval(fn, self._fnargs(fn, w))[0].reshape(self.m_g, self.n_w)

    def jac_h(self, w):
        if self.nlp.h_fn is None:
            return np.zeros((0, self.n_w))
        fn = self.nlp._d("jac_h")
        return ex.feval(fn, self._fnargs(fn, w))[0].reshape(self.m_h, self.n_w)

    def hess_lag(self, w, sigma, lam_g, lam_h):
        fn = self.nlp._d("hess_f")
        H = sigma * ex.feval(fn, self._fnargs(fn, w))[0].reshape(self.n_w, self.n_w)
        if self.nlp.g_fn is not None and self.m_g:
            fn = self.nlp._d("hess_g")
            args = self._fnargs(self.nlp.g_fn, w) + [np.asarray(lam_g, float)]
            H = H + ex.feval(fn, args)[0].reshape(self.n_w, self.n_w)
        if self.nlp.h_fn is not None and self.m_h:
            fn = self.nlp._d("hess_h")
            args = self._fnargs(self.nlp.h_fn, w) + [np.asarray(lam_h, float)]
            H = H + ex.feval(fn, args)[0].reshape(self.n_w, self.n_w)
        return H

    def gn_hess(self, w):
        return None
