"""Direct transcription of a canonical OCP into a finite-dimensional NLP.

Multiple shooting (default): states at every node are decision variables
tied together by integrator defect constraints.  Single shooting: states are
eliminated by forward simulation and only controls (plus the free horizon
length) remain.

The produced `Nlp` is stage-structured: one small compiled function per
per-interval quantity (integrator step, running-cost increment, path rows,
algebraic residual) plus boundary/terminal functions.  Stage functions are
evaluated batched across all intervals, and everything the solver needs
(Jacobians, Hessian contractions, Gauss-Newton residuals) is derived from
them symbolically once and then cached.  Flat `f(w, p)` / `g(w, p)` /
`h(w, p)` functions over the whole decision vector are available for
serialization checks and as a reference implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import expr as ex
from .ocp import CanonicalOcp, OcpError


class TranscriptionError(ValueError):
    pass


@dataclass(frozen=True)
class IntegratorCfg:
    scheme: str = "rk4"  # "rk4" | "euler"
    substeps: int = 1

    def __post_init__(self):
        if self.scheme not in ("rk4", "euler"):
            raise TranscriptionError(f"unknown integrator scheme {self.scheme!r}")
        if self.substeps < 1:
            raise TranscriptionError("substeps must be >= 1")


def _intg_from_name(intg: str) -> str:
    if intg in ("rk", "rk4"):
        return "rk4"
    if intg == "euler":
        return "euler"
    raise TranscriptionError(f"unknown integrator {intg!r}")


class MultipleShooting:
    """Transcription method: states at all nodes are decision variables."""

    kind = "multiple_shooting"

    def __init__(self, N: int = 20, intg: str = "rk", M: int = 1,
                 cost_quadrature: str = "integrator"):
        if N < 1:
            raise TranscriptionError("N must be >= 1")
        if cost_quadrature not in ("integrator", "left_rectangle"):
            raise TranscriptionError(f"unknown cost quadrature {cost_quadrature!r}")
        self.N = int(N)
        self.intg = IntegratorCfg(_intg_from_name(intg), int(M))
        self.cost_quadrature = cost_quadrature


class SingleShooting(MultipleShooting):
    """Transcription method: states eliminated by forward substitution."""

    kind = "single_shooting"


# ---------------------------------------------------------------------------
# Integrator steps (public helper + symbolic building blocks)
# ---------------------------------------------------------------------------


def _symbolic_arg(a):
    if isinstance(a, ex.Expr):
        return a
    arr = np.asarray(a, dtype=float).reshape(-1)
    return ex.from_vector(arr.tolist()) if arr.size > 1 else ex.const(arr[0])


def _call_fn(rhs: ex.FunctionDef, args, symbolic: bool):
    if symbolic:
        return rhs.apply([_symbolic_arg(a) for a in args])[0]
    return ex.feval(rhs, args)[0]


def rk4_step(rhs: ex.FunctionDef, x, u, h, p=None):
    """One classical Runge-Kutta-4 step with the control held constant.

    `rhs` maps (x, u[, p]) to dx/dt.  Symbolic when any argument is an
    expression, numeric otherwise.
    """
    symbolic = any(isinstance(a, ex.Expr) for a in (x, u, h, p) if a is not None)
    extra = [p] if p is not None else []
    if symbolic:
        x = ex.as_expr(x) if not isinstance(x, ex.Expr) else x
        h = ex.as_expr(h)
    f = lambda xv: _call_fn(rhs, [xv, u] + extra, symbolic)
    k1 = f(x)
    k2 = f(x + (h / 2.0) * k1 if symbolic else x + (h / 2.0) * k1)
    k3 = f(x + (h / 2.0) * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def euler_step(rhs: ex.FunctionDef, x, u, h, p=None):
    symbolic = any(isinstance(a, ex.Expr) for a in (x, u, h, p) if a is not None)
    extra = [p] if p is not None else []
    return x + h * _call_fn(rhs, [x, u] + extra, symbolic)


# ---------------------------------------------------------------------------
# Stage-function construction
# ---------------------------------------------------------------------------

_RK4_POINTS = ((0.0, 1.0 / 6.0), (0.5, 2.0 / 6.0), (0.5, 2.0 / 6.0), (1.0, 1.0 / 6.0))


@dataclass
class ParamEntry:
    name: str
    length: int
    stage_varying: bool
    ps_offset: int  # offset inside the per-stage parameter vector
    p_offset: int  # offset inside the packed runtime parameter vector


@dataclass
class StageFunctions:
    """Primal per-interval functions; derivatives are derived lazily."""

    phi: ex.FunctionDef  # (v, ps) -> next state
    cost: ex.FunctionDef | None  # (v, ps) -> running-cost increment
    cost0: ex.FunctionDef | None  # (v, ps) -> at-t0 objective
    mayer: ex.FunctionDef | None  # (vm, ps) -> terminal objective
    path: ex.FunctionDef | None  # (v, ps) -> one-sided rows (<= 0)
    path_term: ex.FunctionDef | None  # (vm, ps) -> one-sided rows at node N
    path_eq: ex.FunctionDef | None  # (v, ps) -> equality rows (= 0)
    alg: ex.FunctionDef | None  # (v, ps) -> algebraic residual
    boundary_eq: ex.FunctionDef | None  # (vb, ps0, psT) -> rows (= 0)
    boundary_ineq: ex.FunctionDef | None  # (vb, ps0, psT) -> rows (<= 0)
    res: ex.FunctionDef | None  # Gauss-Newton residuals per interval
    res0: ex.FunctionDef | None
    res_mayer: ex.FunctionDef | None

    def named(self) -> dict[str, ex.FunctionDef]:
        out = {}
        for key in ("phi", "cost", "cost0", "mayer", "path", "path_term",
                    "path_eq", "alg", "boundary_eq", "boundary_ineq",
                    "res", "res0", "res_mayer"):
            fn = getattr(self, key)
            if fn is not None:
                out[key] = fn
        return out


def _sos_addends(expr: ex.Expr) -> list[ex.Expr] | None:
    """Flatten a + tree; subtraction or negation makes the sign unknowable."""
    if expr.kind == "add":
        left = _sos_addends(expr.children[0])
        right = _sos_addends(expr.children[1])
        if left is None or right is None:
            return None
        return left + right
    if expr.kind in ("sub", "neg"):
        return None
    return [expr]


def _sos_split(addend: ex.Expr, param_ids: set[int], extra_ok: set[int]):
    """Match `coef * base**2` where coef only involves parameters/constants.

    Returns (coef or None, base) or None when the addend is not such a
    product.  A parameter-only addend returns ("skip",) since it cannot
    curve the Hessian.
    """
    factors: list[ex.Expr] = []

    def flatten(e):
        if e.kind == "mul":
            flatten(e.children[0])
            flatten(e.children[1])
        else:
            factors.append(e)

    flatten(addend)
    square_base = None
    coeffs: list[ex.Expr] = []
    for f in factors:
        is_square = False
        if f.kind == "pow" and f.children[1].kind == "const" and \
                f.children[1].value == 2.0 and f.children[0].n == 1:
            base = f.children[0]
            is_square = True
        elif f.kind == "mul" and f.children[0] is f.children[1]:
            base = f.children[0]
            is_square = True
        if is_square and square_base is None and _depends_on_vars(base, param_ids, extra_ok):
            square_base = base
        else:
            coeffs.append(f)
    if square_base is None:
        if all(not _depends_on_vars(f, param_ids, extra_ok) for f in factors):
            return ("skip",)
        return None
    for c in coeffs:
        if _depends_on_vars(c, param_ids, extra_ok):
            return None
    if not coeffs:
        return (None, square_base)
    coef = coeffs[0]
    for c in coeffs[1:]:
        coef = coef * c
    return (coef, square_base)


def _depends_on_vars(e: ex.Expr, param_ids: set[int], extra_ok: set[int]) -> bool:
    """True when `e` references anything beyond parameters and constants."""
    for s in ex.symbols_in([e]):
        if id(s) not in param_ids and id(s) not in extra_ok:
            return True
    return False


@dataclass
class Nlp:
    """Stage-structured nonlinear program with a fixed decision layout.

    Decision vector (multiple shooting):
    [x_0 .. x_N | u_0 .. u_{N-1} | z_0 .. z_{N-1} | T(free time only)];
    single shooting keeps only the controls (and T).
    """

    method_kind: str
    N: int
    n_x: int
    n_u: int
    n_z: int
    horizon_kind: str
    horizon_value: float
    intg: IntegratorCfg
    cost_quadrature: str
    params: list[ParamEntry]
    n_ps: int
    n_p: int
    stage: StageFunctions
    lbw: np.ndarray
    ubw: np.ndarray
    m_boundary_eq: int
    m_path_eq_stage: int
    m_path_stage: int
    m_path_term: int
    m_boundary_ineq: int
    state_names: list[str]
    control_names: list[str]
    algebraic_names: list[str]
    model_names: list[str]
    component_table: dict[str, tuple[str, int]]
    initial_state_params: dict[int, str]
    terminal_state_params: dict[int, str]
    model_x_slices: list[tuple[int, int]]
    solver_options: dict = field(default_factory=dict)
    _derived: dict = field(default_factory=dict, repr=False)

    # -- layout -----------------------------------------------------------
    @property
    def free_time(self) -> bool:
        return self.horizon_kind == "free"

    @property
    def n_w(self) -> int:
        if self.method_kind == "single_shooting":
            return self.N * self.n_u + (1 if self.free_time else 0)
        return ((self.N + 1) * self.n_x + self.N * self.n_u + self.N * self.n_z
                + (1 if self.free_time else 0))

    @property
    def n_v(self) -> int:
        return self.n_x + self.n_u + self.n_z + 1 + (1 if self.free_time else 0)

    @property
    def m_g(self) -> int:
        m_defect = self.N * self.n_x if self.method_kind == "multiple_shooting" else 0
        return (m_defect + self.m_boundary_eq + self.N * self.n_z
                + self.N * self.m_path_eq_stage)

    @property
    def m_h(self) -> int:
        base = self.N * self.m_path_stage + self.m_path_term + self.m_boundary_ineq
        if self.method_kind == "single_shooting":
            base += self._ss_bound_rows()
        return base

    def x_index(self, k: int) -> slice:
        if self.method_kind == "single_shooting":
            raise TranscriptionError("states are not decision variables here")
        return slice(k * self.n_x, (k + 1) * self.n_x)

    def u_index(self, k: int) -> slice:
        if self.method_kind == "single_shooting":
            return slice(k * self.n_u, (k + 1) * self.n_u)
        off = (self.N + 1) * self.n_x
        return slice(off + k * self.n_u, off + (k + 1) * self.n_u)

    def z_index(self, k: int) -> slice:
        off = (self.N + 1) * self.n_x + self.N * self.n_u
        return slice(off + k * self.n_z, off + (k + 1) * self.n_z)

    @property
    def T_index(self) -> int | None:
        return self.n_w - 1 if self.free_time else None

    def fixed_dt(self) -> float:
        return self.horizon_value / self.N

    # -- parameters ---------------------------------------------------------
    def parameter_table(self) -> dict[str, tuple[int, bool]]:
        return {p.name: (p.length, p.stage_varying) for p in self.params}

    def pack_parameters(self, values: dict[str, np.ndarray] | None) -> np.ndarray:
        values = values or {}
        p = np.zeros(self.n_p)
        known = {e.name for e in self.params}
        for name in values:
            if name not in known:
                raise TranscriptionError(f"unknown parameter {name!r}")
        for entry in self.params:
            if entry.name not in values:
                continue
            arr = np.asarray(values[entry.name], dtype=float).reshape(-1)
            if entry.stage_varying:
                if arr.size == entry.length:
                    arr = np.tile(arr, self.N)
                if arr.size != entry.length * self.N:
                    raise TranscriptionError(
                        f"stage-varying parameter {entry.name!r} expects "
                        f"{entry.length} or {entry.length * self.N} values")
                p[entry.p_offset:entry.p_offset + arr.size] = arr
            else:
                if arr.size != entry.length:
                    raise TranscriptionError(
                        f"parameter {entry.name!r} expects {entry.length} values")
                p[entry.p_offset:entry.p_offset + entry.length] = arr
        return p

    def stage_parameter_matrix(self, p: np.ndarray) -> np.ndarray:
        """(n_ps, N) matrix of per-stage parameter vectors."""
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.size != self.n_p:
            raise TranscriptionError(f"parameter vector must have {self.n_p} entries")
        ps = np.empty((self.n_ps, self.N))
        for entry in self.params:
            sl = slice(entry.ps_offset, entry.ps_offset + entry.length)
            if entry.stage_varying:
                block = p[entry.p_offset:entry.p_offset + entry.length * self.N]
                ps[sl, :] = block.reshape(self.N, entry.length).T
            else:
                ps[sl, :] = p[entry.p_offset:entry.p_offset + entry.length, None]
        return ps

    def terminal_parameter_vector(self, p: np.ndarray) -> np.ndarray:
        ps = np.empty(self.n_ps)
        for entry in self.params:
            sl = slice(entry.ps_offset, entry.ps_offset + entry.length)
            if entry.stage_varying:
                off = entry.p_offset + entry.length * (self.N - 1)
                ps[sl] = p[off:off + entry.length]
            else:
                ps[sl] = p[entry.p_offset:entry.p_offset + entry.length]
        return ps

    # -- default initial guess ---------------------------------------------
    def default_init(self, p: np.ndarray) -> np.ndarray:
        w = np.zeros(self.n_w)
        if self.free_time:
            w[self.T_index] = self.horizon_value
        if self.method_kind == "single_shooting":
            return w
        by_name = {e.name: e for e in self.params}
        for mi, (lo, hi) in enumerate(self.model_x_slices):
            x0 = xf = None
            pname = self.initial_state_params.get(mi)
            if pname and not by_name[pname].stage_varying:
                e = by_name[pname]
                x0 = p[e.p_offset:e.p_offset + e.length]
            pname = self.terminal_state_params.get(mi)
            if pname and not by_name[pname].stage_varying:
                e = by_name[pname]
                xf = p[e.p_offset:e.p_offset + e.length]
            if x0 is None:
                continue
            if xf is None:
                xf = x0
            for k in range(self.N + 1):
                tau = k / self.N
                w[self.x_index(k)][lo:hi] = (1 - tau) * x0 + tau * xf
        return w

    # -- evaluators -----------------------------------------------------------
    def evaluator(self, p: np.ndarray):
        if self.method_kind == "multiple_shooting":
            return MultipleShootingEvaluator(self, p)
        return SingleShootingEvaluator(self, p)

    def _ss_bound_rows(self) -> int:
        """Single shooting: state bounds become inequality rows."""
        lo, hi = self._state_bounds
        rows = int(np.isfinite(hi).sum() + np.isfinite(lo).sum())
        nz = int(np.isfinite(self._z_bounds[1]).sum() + np.isfinite(self._z_bounds[0]).sum())
        return (self.N + 1) * rows + self.N * nz

    # populated by transcribe(); single shooting keeps state bounds here
    _state_bounds: tuple[np.ndarray, np.ndarray] = (np.zeros(0), np.zeros(0))
    _z_bounds: tuple[np.ndarray, np.ndarray] = (np.zeros(0), np.zeros(0))

    # -- derived functions -----------------------------------------------
    def derived(self, key: str) -> ex.FunctionDef | None:
        """Lazily built derivative functions, cached per NLP."""
        if key in self._derived:
            return self._derived[key]
        fn = self._build_derived(key)
        self._derived[key] = fn
        return fn

    def _build_derived(self, key: str):
        sf = self.stage
        if key == "phi_jac":
            return ex.jacobian(sf.phi, 0, 0)
        if key == "cost_grad":
            return None if sf.cost is None else ex.jacobian(sf.cost, 0, 0, mode="reverse")
        if key == "cost_hess":
            return None if sf.cost is None else ex.hessian(sf.cost, 0)
        if key == "cost0_grad":
            return None if sf.cost0 is None else ex.jacobian(sf.cost0, 0, 0, mode="reverse")
        if key == "cost0_hess":
            return None if sf.cost0 is None else ex.hessian(sf.cost0, 0)
        if key == "mayer_grad":
            return None if sf.mayer is None else ex.jacobian(sf.mayer, 0, 0, mode="reverse")
        if key == "mayer_hess":
            return None if sf.mayer is None else ex.hessian(sf.mayer, 0)
        if key == "path_jac":
            return None if sf.path is None else ex.jacobian(sf.path, 0, 0)
        if key == "path_term_jac":
            return None if sf.path_term is None else ex.jacobian(sf.path_term, 0, 0)
        if key == "path_eq_jac":
            return None if sf.path_eq is None else ex.jacobian(sf.path_eq, 0, 0)
        if key == "alg_jac":
            return None if sf.alg is None else ex.jacobian(sf.alg, 0, 0)
        if key == "boundary_eq_jac":
            return None if sf.boundary_eq is None else ex.jacobian(sf.boundary_eq, 0, 0)
        if key == "boundary_ineq_jac":
            return None if sf.boundary_ineq is None else ex.jacobian(sf.boundary_ineq, 0, 0)
        if key == "res_jac":
            return None if sf.res is None else ex.jacobian(sf.res, 0, 0)
        if key == "res0_jac":
            return None if sf.res0 is None else ex.jacobian(sf.res0, 0, 0)
        if key == "res_mayer_jac":
            return None if sf.res_mayer is None else ex.jacobian(sf.res_mayer, 0, 0)
        if key == "hess_dyn":
            return self._contraction_hessian(sf.phi, "lam_dyn")
        if key == "hess_path":
            return None if sf.path is None else self._contraction_hessian(sf.path, "lam_path")
        if key == "hess_path_eq":
            return None if sf.path_eq is None else self._contraction_hessian(sf.path_eq, "lam_pe")
        if key == "hess_alg":
            return None if sf.alg is None else self._contraction_hessian(sf.alg, "lam_alg")
        if key == "hess_path_term":
            return None if sf.path_term is None else self._contraction_hessian(sf.path_term, "lam_pt")
        if key == "hess_boundary":
            rows = []
            fns = [f for f in (sf.boundary_eq, sf.boundary_ineq) if f is not None]
            if not fns:
                return None
            vb = fns[0].inputs[0]
            ps0 = fns[0].inputs[1]
            psT = fns[0].inputs[2]
            lam_syms = []
            total = None
            for i, fn in enumerate(fns):
                lam = ex.sym(f"lam_b{i}", fn.outputs[0].n)
                lam_syms.append(lam)
                out = fn.apply([vb, ps0, psT])[0]
                dot = ex.sum_entries(lam * out) if out.n > 1 else lam * out
                total = dot if total is None else total + dot
            f = ex.FunctionDef("boundary_contraction", [vb, ps0, psT] + lam_syms, [total])
            return ex.hessian(f, 0)
        raise KeyError(key)

    def _contraction_hessian(self, fn: ex.FunctionDef, lam_name: str):
        """Hessian w.r.t. v of lam . fn(v, ps)."""
        v, ps = fn.inputs
        lam = ex.sym(lam_name, fn.outputs[0].n)
        out = fn.apply([v, ps])[0]
        dot = ex.sum_entries(lam * out) if out.n > 1 else lam * out
        f = ex.FunctionDef(fn.name + "_contraction", [v, ps, lam], [dot])
        return ex.hessian(f, 0)

    # -- flat reference functions ------------------------------------------
    def objective_function(self) -> ex.FunctionDef:
        return self._flat()[0]

    def equality_function(self) -> ex.FunctionDef:
        return self._flat()[1]

    def inequality_function(self) -> ex.FunctionDef:
        return self._flat()[2]

    def _flat(self):
        if "flat" in self._derived:
            return self._derived["flat"]
        if self.method_kind != "multiple_shooting":
            raise TranscriptionError(
                "flat reference functions are built for multiple shooting only")
        w = ex.sym("w", self.n_w)
        p = ex.sym("p", max(self.n_p, 1))
        N = self.N
        dt = (w[self.T_index] / N) if self.free_time else ex.const(self.fixed_dt())
        T = w[self.T_index] if self.free_time else ex.const(self.horizon_value)

        def ps_at(k: int) -> ex.Expr:
            parts = []
            for e in self.params:
                off = e.p_offset + (e.length * k if e.stage_varying else 0)
                parts.append(p[off:off + e.length])
            return ex.concat(*parts) if parts else ex.zeros(1)

        def v_at(k: int) -> ex.Expr:
            parts = [w[self.x_index(k)]]
            if self.n_u:
                parts.append(w[self.u_index(k)])
            if self.n_z:
                parts.append(w[self.z_index(k)])
            t0 = ex.const(float(k)) * dt
            parts.append(t0)
            if self.free_time:
                parts.append(dt)
            return ex.concat(*parts)

        def vm() -> ex.Expr:
            parts = [w[self.x_index(N)], T]
            return ex.concat(*parts)

        sf = self.stage
        f_total = ex.const(0.0)
        for k in range(N):
            if sf.cost is not None:
                f_total = f_total + sf.cost.apply([v_at(k), ps_at(k)])[0]
        if sf.cost0 is not None:
            f_total = f_total + sf.cost0.apply([v_at(0), ps_at(0)])[0]
        if sf.mayer is not None:
            f_total = f_total + sf.mayer.apply([vm(), ps_at(N - 1)])[0]

        g_rows = []
        for k in range(N):
            step = sf.phi.apply([v_at(k), ps_at(k)])[0]
            g_rows.append(w[self.x_index(k + 1)] - step)
        if sf.boundary_eq is not None:
            vb = ex.concat(w[self.x_index(0)], w[self.x_index(N)], T)
            g_rows.append(sf.boundary_eq.apply([vb, ps_at(0), ps_at(N - 1)])[0])
        if sf.alg is not None:
            for k in range(N):
                g_rows.append(sf.alg.apply([v_at(k), ps_at(k)])[0])
        if sf.path_eq is not None:
            for k in range(N):
                g_rows.append(sf.path_eq.apply([v_at(k), ps_at(k)])[0])

        h_rows = []
        if sf.path is not None:
            for k in range(N):
                h_rows.append(sf.path.apply([v_at(k), ps_at(k)])[0])
        if sf.path_term is not None:
            h_rows.append(sf.path_term.apply([vm(), ps_at(N - 1)])[0])
        if sf.boundary_ineq is not None:
            vb = ex.concat(w[self.x_index(0)], w[self.x_index(N)], T)
            h_rows.append(sf.boundary_ineq.apply([vb, ps_at(0), ps_at(N - 1)])[0])

        f_fn = ex.FunctionDef("nlp_f", [w, p], [f_total])
        g_fn = ex.FunctionDef("nlp_g", [w, p],
                              [ex.concat(*g_rows) if g_rows else ex.zeros(1)])
        h_fn = ex.FunctionDef("nlp_h", [w, p],
                              [ex.concat(*h_rows) if h_rows else ex.zeros(1)])
        self._derived["flat"] = (f_fn, g_fn, h_fn)
        return self._derived["flat"]


# ---------------------------------------------------------------------------
# transcribe(): canonical OCP -> Nlp
# ---------------------------------------------------------------------------


def transcribe(canon: CanonicalOcp, method: MultipleShooting) -> Nlp:
    if canon.n_z and method.kind == "single_shooting":
        raise TranscriptionError("single shooting does not support algebraic states")
    N = method.N
    n_x, n_u, n_z = canon.n_x, canon.n_u, canon.n_z
    free = canon.horizon_kind == "free"

    # Per-stage parameter vector layout (constant params shared, varying per
    # stage) and the packed runtime parameter vector.
    params: list[ParamEntry] = []
    ps_off = 0
    p_off = 0
    for p in canon.params:
        params.append(ParamEntry(p.name, p.length, p.stage_varying, ps_off, p_off))
        ps_off += p.length
        p_off += p.length * (N if p.stage_varying else 1)
    n_ps = max(ps_off, 1)
    n_p = p_off

    sv = ex.sym("v", n_x + n_u + n_z + 1 + (1 if free else 0))
    sps = ex.sym("ps", n_ps)
    x_part = sv[0:n_x]
    u_part = sv[n_x:n_x + n_u] if n_u else None
    z_part = sv[n_x + n_u:n_x + n_u + n_z] if n_z else None
    t0_part = sv[n_x + n_u + n_z]
    dt_expr = sv[n_x + n_u + n_z + 1] if free else ex.const(canon.horizon_value / N)
    T_expr = ex.const(float(N)) * dt_expr if free else ex.const(canon.horizon_value)

    # Map model/parameter symbols onto stage-vector slices.
    subs: dict = {}
    for mi, m in enumerate(canon.models):
        xo = canon.x_offsets[mi]
        subs[m.x] = x_part[xo:xo + m.n_x] if (xo, m.n_x) != (0, n_x) else x_part
        if m.u is not None:
            uo = canon.u_offsets[mi]
            subs[m.u] = u_part[uo:uo + m.n_u] if (uo, m.n_u) != (0, n_u) else u_part
        if m.z is not None:
            zo = canon.z_offsets[mi]
            subs[m.z] = z_part[zo:zo + m.n_z] if (zo, m.n_z) != (0, n_z) else z_part
    for entry, p in zip(params, canon.params):
        subs[p.sym] = sps[entry.ps_offset:entry.ps_offset + entry.length]

    def stage_sub(e: ex.Expr, t_value: ex.Expr) -> ex.Expr:
        b = dict(subs)
        b[canon.t_sym] = t_value
        if free:
            b[canon.T_expr] = T_expr
        else:
            b["T_horizon"] = T_expr
        return ex.substitute(e, b)

    # Dynamics as a function of a detached state symbol so the integrator can
    # re-apply it at internal points.
    rx = ex.sym("rx", n_x)
    rhs_rows = []
    for mi, m in enumerate(canon.models):
        b = dict(subs)
        xo = canon.x_offsets[mi]
        b[m.x] = rx[xo:xo + m.n_x] if (xo, m.n_x) != (0, n_x) else rx
        rhs_rows.append(ex.substitute(m.rhs, b))
    rhs_expr = ex.concat(*rhs_rows)

    def rhs_at(xe: ex.Expr) -> ex.Expr:
        return ex.substitute(rhs_expr, {rx: xe})

    # Detach state and time so the quadrature can re-sample expressions at
    # the integrator's internal points.
    rt = ex.sym("rt", 1)

    def detach(e: ex.Expr) -> ex.Expr:
        b = dict(subs)
        for mi, m in enumerate(canon.models):
            xo = canon.x_offsets[mi]
            b[m.x] = rx[xo:xo + m.n_x] if (xo, m.n_x) != (0, n_x) else rx
        b[canon.t_sym] = rt
        if free:
            b[canon.T_expr] = T_expr
        return ex.substitute(e, b)

    lag = canon.lagrange
    has_cost = not (lag.kind == "const" and lag.value == 0.0)
    lag_expr = detach(lag) if has_cost else None

    def lag_at(xe: ex.Expr, te: ex.Expr) -> ex.Expr:
        return ex.substitute(lag_expr, {rx: xe, rt: te})

    M = method.intg.substeps
    h_sub = dt_expr / M if M > 1 else dt_expr

    # Integrator chain + cost quadrature along it.
    X = x_part
    q_terms: list[ex.Expr] = []
    sample_points: list[tuple[ex.Expr, ex.Expr, ex.Expr]] = []  # (state, time, weight)
    for j in range(M):
        tj = t0_part + h_sub * float(j) if j else t0_part
        if method.intg.scheme == "rk4":
            k1 = rhs_at(X)
            x2 = X + (h_sub / 2.0) * k1
            k2 = rhs_at(x2)
            x3 = X + (h_sub / 2.0) * k2
            k3 = rhs_at(x3)
            x4 = X + h_sub * k3
            k4 = rhs_at(x4)
            X_next = X + (h_sub / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if has_cost and method.cost_quadrature == "integrator":
                pts = ((X, 0.0, 1.0 / 6.0), (x2, 0.5, 2.0 / 6.0),
                       (x3, 0.5, 2.0 / 6.0), (x4, 1.0, 1.0 / 6.0))
                for state, c, wq in pts:
                    tc = tj + h_sub * c if c else tj
                    q_terms.append((h_sub * wq) * lag_at(state, tc))
                    sample_points.append((state, tc, h_sub * wq))
        else:
            X_next = X + h_sub * rhs_at(X)
            if has_cost and method.cost_quadrature == "integrator":
                q_terms.append(h_sub * lag_at(X, tj))
                sample_points.append((X, tj, h_sub))
        X = X_next
    if has_cost and method.cost_quadrature == "left_rectangle":
        dt_full = dt_expr
        q_terms = [dt_full * lag_at(x_part, t0_part)]
        sample_points = [(x_part, t0_part, dt_full)]

    phi_fn = ex.FunctionDef("stage_phi", [sv, sps], [X])
    cost_fn = None
    if has_cost:
        q = q_terms[0]
        for t in q_terms[1:]:
            q = q + t
        cost_fn = ex.FunctionDef("stage_cost", [sv, sps], [q])

    # Gauss-Newton residuals when every objective term is a sum of squares.
    param_ids = {id(p.sym) for p in canon.params}
    extra_ok = {id(canon.t_sym)}
    gn_ok = True
    lag_residuals: list[tuple[ex.Expr | None, ex.Expr]] = []
    for term in canon.lagrange_terms:
        addends = _sos_addends(term)
        if addends is None:
            gn_ok = False
            break
        for a in addends:
            split = _sos_split(a, param_ids, extra_ok)
            if split is None:
                gn_ok = False
                break
            if split != ("skip",):
                lag_residuals.append(split)
        if not gn_ok:
            break

    def term_residuals(terms):
        out = []
        for term in terms:
            addends = _sos_addends(term)
            if addends is None:
                return None
            for a in addends:
                split = _sos_split(a, param_ids, extra_ok)
                if split is None:
                    return None
                if split != ("skip",):
                    out.append(split)
        return out

    mayer_residuals = term_residuals(canon.mayer_terms) if gn_ok else None
    cost0_residuals = term_residuals(canon.cost_t0_terms) if gn_ok else None
    gn_ok = gn_ok and mayer_residuals is not None and cost0_residuals is not None

    res_fn = None
    if gn_ok and has_cost and lag_residuals:
        entries = []
        detached_res = [(None if coef is None else detach(coef), detach(base))
                        for coef, base in lag_residuals]
        for state, tc, wq in sample_points:
            for coef, base in detached_res:
                r = ex.substitute(base, {rx: state, rt: tc})
                if coef is not None:
                    cv = ex.substitute(coef, {rx: state, rt: tc})
                    scale = ex.sqrt(wq * cv)
                else:
                    scale = ex.sqrt(wq)
                entries.append(scale * r)
        res_fn = ex.FunctionDef("stage_res", [sv, sps], [ex.concat(*entries)])

    # At-t0 objective, evaluated on the stage-0 vector.
    cost0_fn = None
    res0_fn = None
    c0 = canon.cost_t0
    if not (c0.kind == "const" and c0.value == 0.0):
        cost0_fn = ex.FunctionDef("cost_t0", [sv, sps], [stage_sub(c0, t0_part)])
        if gn_ok and cost0_residuals:
            entries = [
                (ex.sqrt(stage_sub(coef, t0_part)) if coef is not None else ex.const(1.0))
                * stage_sub(base, t0_part)
                for coef, base in cost0_residuals
            ]
            res0_fn = ex.FunctionDef("cost_t0_res", [sv, sps], [ex.concat(*entries)])

    # Terminal vector and terminal-side functions.
    svm = ex.sym("vm", n_x + 1)
    xm_part = svm[0:n_x]
    Tm = svm[n_x]

    def term_sub(e: ex.Expr) -> ex.Expr:
        b = {}
        for mi, m in enumerate(canon.models):
            xo = canon.x_offsets[mi]
            b[m.x] = xm_part[xo:xo + m.n_x] if (xo, m.n_x) != (0, n_x) else xm_part
        for entry, p in zip(params, canon.params):
            b[p.sym] = sps[entry.ps_offset:entry.ps_offset + entry.length]
        b[canon.t_sym] = Tm
        if free:
            b[canon.T_expr] = Tm
        return ex.substitute(e, b)

    mayer_fn = None
    res_mayer_fn = None
    vf = canon.mayer
    if not (vf.kind == "const" and vf.value == 0.0):
        mayer_fn = ex.FunctionDef("mayer", [svm, sps], [term_sub(vf)])
        if gn_ok and mayer_residuals:
            entries = [
                (ex.sqrt(term_sub(coef)) if coef is not None else ex.const(1.0))
                * term_sub(base)
                for coef, base in mayer_residuals
            ]
            res_mayer_fn = ex.FunctionDef("mayer_res", [svm, sps], [ex.concat(*entries)])

    # Path rows: split two-sided rows into one-sided "<= 0" rows.
    path_rows: list[ex.Expr] = []
    path_term_rows: list[ex.Expr] = []
    u_ids = {id(m.u) for m in canon.models if m.u is not None}
    for row in canon.path_ineq:
        state_only = not any(id(s) in u_ids for s in ex.symbols_in([row.expr]))
        for side_expr in _one_sided(row):
            path_rows.append(stage_sub(side_expr, t0_part))
            if state_only:
                path_term_rows.append(term_sub(side_expr))
    path_fn = (ex.FunctionDef("stage_path", [sv, sps], [ex.concat(*path_rows)])
               if path_rows else None)
    path_term_fn = (ex.FunctionDef("path_terminal", [svm, sps],
                                   [ex.concat(*path_term_rows)])
                    if path_term_rows else None)

    path_eq_rows = [stage_sub(row.expr, t0_part) for row in canon.path_eq]
    path_eq_fn = (ex.FunctionDef("stage_path_eq", [sv, sps],
                                 [ex.concat(*path_eq_rows)])
                  if path_eq_rows else None)

    alg_fn = None
    if n_z:
        alg_rows = []
        for m in canon.models:
            if m.alg is not None:
                alg_rows.append(stage_sub(m.alg, t0_part))
        alg_fn = ex.FunctionDef("stage_alg", [sv, sps], [ex.concat(*alg_rows)])

    # Boundary rows over (x0, xN, T), with per-anchor parameter vectors.
    svb = ex.sym("vb", 2 * n_x + 1)
    sps0 = ex.sym("ps0", n_ps)
    spsT = ex.sym("psT", n_ps)

    def boundary_sub(e: ex.Expr, anchor: str) -> ex.Expr:
        b = {}
        base = svb[0:n_x] if anchor == "t0" else svb[n_x:2 * n_x]
        pssym = sps0 if anchor == "t0" else spsT
        for mi, m in enumerate(canon.models):
            xo = canon.x_offsets[mi]
            b[m.x] = base[xo:xo + m.n_x] if (xo, m.n_x) != (0, n_x) else base
        for entry, p in zip(params, canon.params):
            b[p.sym] = pssym[entry.ps_offset:entry.ps_offset + entry.length]
        b[canon.t_sym] = ex.const(0.0) if anchor == "t0" else svb[2 * n_x]
        if free:
            b[canon.T_expr] = svb[2 * n_x]
        return ex.substitute(e, b)

    beq_rows = [boundary_sub(row.expr, row.anchor) for row in canon.boundary_eq]
    boundary_eq_fn = (ex.FunctionDef("boundary_eq", [svb, sps0, spsT],
                                     [ex.concat(*beq_rows)])
                      if beq_rows else None)
    bineq_rows = []
    for row in canon.boundary_ineq:
        for side_expr in _one_sided(row):
            bineq_rows.append(boundary_sub(side_expr, row.anchor))
    boundary_ineq_fn = (ex.FunctionDef("boundary_ineq", [svb, sps0, spsT],
                                       [ex.concat(*bineq_rows)])
                        if bineq_rows else None)

    # Simple bounds on the decision vector.
    x_lo = np.full(n_x, -math.inf)
    x_hi = np.full(n_x, math.inf)
    u_lo = np.full(n_u, -math.inf)
    u_hi = np.full(n_u, math.inf)
    z_lo = np.full(n_z, -math.inf)
    z_hi = np.full(n_z, math.inf)
    arrays = {"x": (x_lo, x_hi), "u": (u_lo, u_hi), "z": (z_lo, z_hi)}
    for vb_ in canon.var_bounds:
        lo_arr, hi_arr = arrays[vb_.kind]
        sl = slice(vb_.offset, vb_.offset + vb_.length)
        lo_arr[sl] = np.maximum(lo_arr[sl], vb_.lower)
        hi_arr[sl] = np.minimum(hi_arr[sl], vb_.upper)

    single = method.kind == "single_shooting"
    if single:
        n_w = N * n_u + (1 if free else 0)
        lbw = np.full(n_w, -math.inf)
        ubw = np.full(n_w, math.inf)
        for k in range(N):
            lbw[k * n_u:(k + 1) * n_u] = u_lo
            ubw[k * n_u:(k + 1) * n_u] = u_hi
    else:
        n_w = (N + 1) * n_x + N * n_u + N * n_z + (1 if free else 0)
        lbw = np.full(n_w, -math.inf)
        ubw = np.full(n_w, math.inf)
        for k in range(N + 1):
            lbw[k * n_x:(k + 1) * n_x] = x_lo
            ubw[k * n_x:(k + 1) * n_x] = x_hi
        off = (N + 1) * n_x
        for k in range(N):
            lbw[off + k * n_u:off + (k + 1) * n_u] = u_lo
            ubw[off + k * n_u:off + (k + 1) * n_u] = u_hi
        off += N * n_u
        for k in range(N):
            lbw[off + k * n_z:off + (k + 1) * n_z] = z_lo
            ubw[off + k * n_z:off + (k + 1) * n_z] = z_hi
    if free:
        lbw[-1] = 0.1 * canon.horizon_value
        ubw[-1] = 10.0 * canon.horizon_value

    state_names = []
    control_names = []
    algebraic_names = []
    component_table: dict[str, tuple[str, int]] = {}
    model_x_slices = []
    for mi, (m, mname) in enumerate(zip(canon.models, canon.model_names)):
        xo = canon.x_offsets[mi]
        model_x_slices.append((xo, xo + m.n_x))
        for i, s in enumerate(m.state_names):
            state_names.append(s)
            component_table[f"{mname}.{s}"] = ("x", xo + i)
            component_table.setdefault(s, ("x", xo + i))
        for i, c in enumerate(m.control_names):
            control_names.append(c)
            component_table[f"{mname}.{c}"] = ("u", canon.u_offsets[mi] + i)
            component_table.setdefault(c, ("u", canon.u_offsets[mi] + i))
        for i, a in enumerate(m.algebraic_names):
            algebraic_names.append(a)
            component_table[f"{mname}.{a}"] = ("z", canon.z_offsets[mi] + i)
            component_table.setdefault(a, ("z", canon.z_offsets[mi] + i))

    stage = StageFunctions(
        phi=phi_fn, cost=cost_fn, cost0=cost0_fn, mayer=mayer_fn,
        path=path_fn, path_term=path_term_fn, path_eq=path_eq_fn, alg=alg_fn,
        boundary_eq=boundary_eq_fn, boundary_ineq=boundary_ineq_fn,
        res=res_fn, res0=res0_fn, res_mayer=res_mayer_fn,
    )

    nlp = Nlp(
        method_kind=method.kind,
        N=N,
        n_x=n_x,
        n_u=n_u,
        n_z=n_z,
        horizon_kind=canon.horizon_kind,
        horizon_value=canon.horizon_value,
        intg=method.intg,
        cost_quadrature=method.cost_quadrature,
        params=params,
        n_ps=n_ps,
        n_p=n_p,
        stage=stage,
        lbw=lbw,
        ubw=ubw,
        m_boundary_eq=sum(r.expr.n for r in canon.boundary_eq),
        m_path_eq_stage=sum(r.expr.n for r in canon.path_eq),
        m_path_stage=len(path_rows),
        m_path_term=len(path_term_rows),
        m_boundary_ineq=len(bineq_rows),
        state_names=state_names,
        control_names=control_names,
        algebraic_names=algebraic_names,
        model_names=list(canon.model_names),
        component_table=component_table,
        initial_state_params=dict(canon.initial_state_params),
        terminal_state_params=dict(canon.terminal_state_params),
        model_x_slices=model_x_slices,
        solver_options=dict(canon.solver_options),
    )
    nlp._state_bounds = (x_lo, x_hi)
    nlp._z_bounds = (z_lo, z_hi)
    return nlp


def _one_sided(row) -> list[ex.Expr]:
    """lo <= e <= hi  ->  rows in '<= 0' form (upper first)."""
    out = []
    if row.upper is not None and np.isfinite(row.upper):
        out.append(row.expr - ex.const(row.upper) if row.upper != 0.0 else row.expr)
    if row.lower is not None and np.isfinite(row.lower):
        out.append(ex.const(row.lower) - row.expr)
    if not out:
        raise TranscriptionError("constraint row has no finite side")
    return out


def multiple_shooting(canon: CanonicalOcp, N: int,
                      intg: IntegratorCfg | None = None, **kw) -> Nlp:
    cfg = intg or IntegratorCfg()
    return transcribe(canon, MultipleShooting(
        N=N, intg=cfg.scheme, M=cfg.substeps, **kw))


def single_shooting(canon: CanonicalOcp, N: int,
                    intg: IntegratorCfg | None = None, **kw) -> Nlp:
    cfg = intg or IntegratorCfg()
    return transcribe(canon, SingleShooting(
        N=N, intg=cfg.scheme, M=cfg.substeps, **kw))


# ---------------------------------------------------------------------------
# Evaluators: batched stage evaluation + dense assembly
# ---------------------------------------------------------------------------



def _cols(arr: np.ndarray, rows: int, n: int) -> np.ndarray:
    """View `arr` as a (rows, n) batch, broadcasting constant outputs."""
    if arr.ndim == 1:
        arr = arr[:, None]
    return np.broadcast_to(arr, (rows, n))

class _FnCache:
    """Evaluate a (v, ps)-style function, caching outputs that cannot depend
    on the decision variables (constant rows, weight-only Hessians)."""

    def __init__(self, fn: ex.FunctionDef):
        self.fn = fn
        self.tape = fn.tape()
        v_sym = fn.inputs[0]
        ps_sym = fn.inputs[1] if fn.n_in > 1 else None
        syms = {id(s) for s in ex.symbols_in(fn.outputs)}
        self.depends_v = id(v_sym) in syms
        extra = syms - {id(v_sym)} - ({id(ps_sym)} if ps_sym is not None else set())
        self.cacheable = (not self.depends_v) and not extra and fn.n_in == 2
        self.ps_refs = (sorted(ex.referenced_entries(fn.outputs, ps_sym))
                        if (self.cacheable and ps_sym is not None) else [])
        self._key = None
        self._value = None

    def __call__(self, V, PS):
        if not self.cacheable:
            return self.tape.run([V, PS])[0]
        key = PS[self.ps_refs, :].tobytes() if self.ps_refs else b""
        if self._key != key:
            self._value = self.tape.run([V[:, :1] * 0.0, PS])[0]
            self._key = key
        return self._value


class MultipleShootingEvaluator:
    """All solver-facing evaluations for one (Nlp, parameter vector) pair."""

    def __init__(self, nlp: Nlp, p: np.ndarray):
        self.nlp = nlp
        self.p = np.asarray(p, dtype=float).reshape(-1)
        self.PS = nlp.stage_parameter_matrix(self.p)
        self.ps0 = self.PS[:, 0]
        self.psT = nlp.terminal_parameter_vector(self.p)
        self.N = nlp.N
        self._vcols_memo: dict[int, list] = {}
        self.lbw = nlp.lbw
        self.ubw = nlp.ubw
        self.n_w = nlp.n_w
        self.m_g = nlp.m_g
        self.m_h = nlp.m_h
        # Gauss-Newton is usable when every cost piece has residuals.
        sf = nlp.stage
        self.has_gn = (
            (sf.cost is None or sf.res is not None)
            and (sf.cost0 is None or sf.res0 is not None)
            and (sf.mayer is None or sf.res_mayer is not None)
        )

    # -- small helpers ------------------------------------------------------
    def _cache(self, key: str, fn: ex.FunctionDef | None):
        """Function caches live on the NLP so repeated solves share them."""
        if fn is None:
            return None
        store = self.nlp._derived
        c = store.get(("cache", key))
        if c is None:
            c = _FnCache(fn)
            store[("cache", key)] = c
        return c

    def _dt(self, w) -> float:
        nlp = self.nlp
        return w[nlp.T_index] / nlp.N if nlp.free_time else nlp.fixed_dt()

    def _T(self, w) -> float:
        nlp = self.nlp
        return w[nlp.T_index] if nlp.free_time else nlp.horizon_value

    def split(self, w):
        nlp = self.nlp
        N = nlp.N
        X = w[: (N + 1) * nlp.n_x].reshape(N + 1, nlp.n_x).T
        off = (N + 1) * nlp.n_x
        U = w[off: off + N * nlp.n_u].reshape(N, nlp.n_u).T if nlp.n_u else \
            np.zeros((0, N))
        off += N * nlp.n_u
        Z = w[off: off + N * nlp.n_z].reshape(N, nlp.n_z).T if nlp.n_z else \
            np.zeros((0, N))
        return X, U, Z

    def _V(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, Z = self.split(w)
        dt = self._dt(w)
        t0 = np.arange(self.N) * dt
        rows = [X[:, : self.N]]
        if nlp.n_u:
            rows.append(U)
        if nlp.n_z:
            rows.append(Z)
        rows.append(t0[None, :])
        if nlp.free_time:
            rows.append(np.full((1, self.N), dt))
        return np.concatenate(rows, axis=0)

    def _vb(self, w) -> np.ndarray:
        nlp = self.nlp
        xN = w[nlp.x_index(nlp.N)]
        return np.concatenate([w[nlp.x_index(0)], xN, [self._T(w)]])

    def _vm(self, w) -> np.ndarray:
        nlp = self.nlp
        return np.concatenate([w[nlp.x_index(nlp.N)], [self._T(w)]])

    # Column map: stage-vector column -> (w column, chain coefficient).
    def _vcols(self, k: int):
        cache = self._vcols_memo
        cols = cache.get(k)
        if cols is not None:
            return cols
        nlp = self.nlp
        cols = []
        xs = nlp.x_index(k)
        for i in range(nlp.n_x):
            cols.append((i, xs.start + i, 1.0))
        if nlp.n_u:
            us = nlp.u_index(k)
            for i in range(nlp.n_u):
                cols.append((nlp.n_x + i, us.start + i, 1.0))
        if nlp.n_z:
            zs = nlp.z_index(k)
            for i in range(nlp.n_z):
                cols.append((nlp.n_x + nlp.n_u + i, zs.start + i, 1.0))
        if nlp.free_time:
            t0_col = nlp.n_x + nlp.n_u + nlp.n_z
            cols.append((t0_col, nlp.T_index, k / nlp.N))
            cols.append((t0_col + 1, nlp.T_index, 1.0 / nlp.N))
        cache[k] = cols
        return cols

    def _bcols(self):
        nlp = self.nlp
        cols = []
        for i in range(nlp.n_x):
            cols.append((i, nlp.x_index(0).start + i, 1.0))
        for i in range(nlp.n_x):
            cols.append((nlp.n_x + i, nlp.x_index(nlp.N).start + i, 1.0))
        if nlp.free_time:
            cols.append((2 * nlp.n_x, nlp.T_index, 1.0))
        return cols

    def _mcols(self):
        nlp = self.nlp
        cols = [(i, nlp.x_index(nlp.N).start + i, 1.0) for i in range(nlp.n_x)]
        if nlp.free_time:
            cols.append((nlp.n_x, nlp.T_index, 1.0))
        return cols

    # -- objective ----------------------------------------------------------
    def f(self, w) -> float:
        nlp = self.nlp
        total = 0.0
        if nlp.stage.cost is not None:
            q = self._cache("cost", nlp.stage.cost)(self._V(w), self.PS)
            q = _cols(q, 1, self.N)
            for k in range(self.N):
                total += q[0, k]
        if nlp.stage.cost0 is not None:
            total += float(nlp.stage.cost0.tape().run(
                [self._V(w)[:, 0], self.ps0])[0][0])
        if nlp.stage.mayer is not None:
            total += float(nlp.stage.mayer.tape().run([self._vm(w), self.psT])[0][0])
        return float(total)

    def grad(self, w) -> np.ndarray:
        nlp = self.nlp
        g = np.zeros(self.n_w)
        if nlp.stage.cost is not None:
            gv = self._cache("cost_grad", nlp.derived("cost_grad"))(self._V(w), self.PS)
            gv = _cols(gv, nlp.n_v, self.N)
            for k in range(self.N):
                for vc, wc, coef in self._vcols(k):
                    g[wc] += coef * gv[vc, k]
        if nlp.stage.cost0 is not None:
            gv0 = nlp.derived("cost0_grad").tape().run(
                [self._V(w)[:, 0], self.ps0])[0]
            gv0 = np.broadcast_to(gv0, (nlp.n_v,))
            for vc, wc, coef in self._vcols(0):
                g[wc] += coef * gv0[vc]
        if nlp.stage.mayer is not None:
            gm = nlp.derived("mayer_grad").tape().run([self._vm(w), self.psT])[0]
            gm = np.broadcast_to(gm, (nlp.n_x + 1,))
            for vc, wc, coef in self._mcols():
                g[wc] += coef * gm[vc]
        return g

    # -- equality constraints ------------------------------------------------
    def g(self, w) -> np.ndarray:
        nlp = self.nlp
        N = nlp.N
        X, U, Z = self.split(w)
        V = self._V(w)
        parts = []
        x_next = nlp.stage.phi.tape().run([V, self.PS])[0]
        parts.append((X[:, 1:] - x_next).T.ravel())
        if nlp.stage.boundary_eq is not None:
            parts.append(nlp.stage.boundary_eq.tape().run(
                [self._vb(w), self.ps0, self.psT])[0])
        if nlp.stage.alg is not None:
            parts.append(self._cache("alg", nlp.stage.alg)(V, self.PS).T.ravel())
        if nlp.stage.path_eq is not None:
            out = self._cache("path_eq", nlp.stage.path_eq)(V, self.PS)
            parts.append(_cols(out, nlp.m_path_eq_stage, N).T.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def jac_g(self, w) -> np.ndarray:
        nlp = self.nlp
        N = nlp.N
        J = np.zeros((self.m_g, self.n_w))
        V = self._V(w)
        jv = self._cache("phi_jac", nlp.derived("phi_jac"))(V, self.PS)
        jv = _cols(jv, nlp.n_x * nlp.n_v, N).reshape(nlp.n_x, nlp.n_v, N)
        for k in range(N):
            rows = slice(k * nlp.n_x, (k + 1) * nlp.n_x)
            xs1 = nlp.x_index(k + 1)
            J[rows, xs1] = np.eye(nlp.n_x)
            for vc, wc, coef in self._vcols(k):
                J[rows, wc] -= coef * jv[:, vc, k]
        row0 = N * nlp.n_x
        if nlp.stage.boundary_eq is not None:
            jb = nlp.derived("boundary_eq_jac").tape().run(
                [self._vb(w), self.ps0, self.psT])[0]
            m = nlp.m_boundary_eq
            jb = np.broadcast_to(jb, (m * (2 * nlp.n_x + 1),)).reshape(
                m, 2 * nlp.n_x + 1)
            for vc, wc, coef in self._bcols():
                J[row0:row0 + m, wc] += coef * jb[:, vc]
            row0 += m
        if nlp.stage.alg is not None:
            ja = self._cache("alg_jac", nlp.derived("alg_jac"))(V, self.PS)
            ja = _cols(ja, nlp.n_z * nlp.n_v, N).reshape(nlp.n_z, nlp.n_v, N)
            for k in range(N):
                rows = slice(row0 + k * nlp.n_z, row0 + (k + 1) * nlp.n_z)
                for vc, wc, coef in self._vcols(k):
                    J[rows, wc] += coef * ja[:, vc, k]
            row0 += N * nlp.n_z
        if nlp.stage.path_eq is not None:
            m = nlp.m_path_eq_stage
            jp = self._cache("path_eq_jac", nlp.derived("path_eq_jac"))(V, self.PS)
            jp = _cols(jp, m * nlp.n_v, N).reshape(m, nlp.n_v, N)
            for k in range(N):
                rows = slice(row0 + k * m, row0 + (k + 1) * m)
                for vc, wc, coef in self._vcols(k):
                    J[rows, wc] += coef * jp[:, vc, k]
        return J

    # -- inequality constraints ----------------------------------------------
    def h(self, w) -> np.ndarray:
        nlp = self.nlp
        parts = []
        if nlp.stage.path is not None:
            out = self._cache("path", nlp.stage.path)(self._V(w), self.PS)
            parts.append(_cols(out, nlp.m_path_stage, self.N).T.ravel())
        if nlp.stage.path_term is not None:
            parts.append(nlp.stage.path_term.tape().run([self._vm(w), self.psT])[0])
        if nlp.stage.boundary_ineq is not None:
            parts.append(nlp.stage.boundary_ineq.tape().run(
                [self._vb(w), self.ps0, self.psT])[0])
        return np.concatenate(parts) if parts else np.zeros(0)

    def jac_h(self, w) -> np.ndarray:
        nlp = self.nlp
        N = nlp.N
        J = np.zeros((self.m_h, self.n_w))
        row0 = 0
        if nlp.stage.path is not None:
            m = nlp.m_path_stage
            jp = self._cache("path_jac", nlp.derived("path_jac"))(self._V(w), self.PS)
            jp = _cols(jp, m * nlp.n_v, N).reshape(m, nlp.n_v, N)
            for k in range(N):
                rows = slice(row0 + k * m, row0 + (k + 1) * m)
                for vc, wc, coef in self._vcols(k):
                    J[rows, wc] += coef * jp[:, vc, k]
            row0 += N * m
        if nlp.stage.path_term is not None:
            m = nlp.m_path_term
            jt = nlp.derived("path_term_jac").tape().run([self._vm(w), self.psT])[0]
            jt = np.broadcast_to(jt, (m * (nlp.n_x + 1),)).reshape(m, nlp.n_x + 1)
            for vc, wc, coef in self._mcols():
                J[row0:row0 + m, wc] += coef * jt[:, vc]
            row0 += m
        if nlp.stage.boundary_ineq is not None:
            m = nlp.m_boundary_ineq
            jb = nlp.derived("boundary_ineq_jac").tape().run(
                [self._vb(w), self.ps0, self.psT])[0]
            jb = np.broadcast_to(jb, (m * (2 * nlp.n_x + 1),)).reshape(
                m, 2 * nlp.n_x + 1)
            for vc, wc, coef in self._bcols():
                J[row0:row0 + m, wc] += coef * jb[:, vc]
        return J

    # -- Hessians -------------------------------------------------------------
    def _scatter_stage_hess(self, H, Hv, k):
        nlp = self.nlp
        if not nlp.free_time:
            # Pure selection: one dense block copy (t0 column has no target).
            nv = nlp.n_x + nlp.n_u + nlp.n_z
            widx = self._stage_windex(k)
            H[np.ix_(widx, widx)] += Hv[:nv, :nv]
            return
        cols = self._vcols(k)
        for vc_i, wc_i, ci in cols:
            row = Hv[vc_i]
            for vc_j, wc_j, cj in cols:
                val = ci * cj * row[vc_j]
                if val != 0.0:
                    H[wc_i, wc_j] += val

    def _stage_windex(self, k: int):
        memo = self._vcols_memo
        key = ("w", k)
        idx = memo.get(key)
        if idx is None:
            idx = np.array([wc for _vc, wc, _c in self._vcols(k)
                            if _vc < self.nlp.n_x + self.nlp.n_u + self.nlp.n_z])
            memo[key] = idx
        return idx

    def _scatter_block(self, H, Hv, cols):
        for vc_i, wc_i, ci in cols:
            for vc_j, wc_j, cj in cols:
                val = ci * cj * Hv[vc_i, vc_j]
                if val != 0.0:
                    H[wc_i, wc_j] += val

    def split_lam_g(self, lam_g):
        nlp = self.nlp
        N = nlp.N
        o = N * nlp.n_x
        lam_defect = lam_g[:o].reshape(N, nlp.n_x).T
        lam_beq = lam_g[o:o + nlp.m_boundary_eq]
        o += nlp.m_boundary_eq
        lam_alg = lam_g[o:o + N * nlp.n_z].reshape(N, nlp.n_z).T if nlp.n_z else None
        o += N * nlp.n_z
        m = nlp.m_path_eq_stage
        lam_pe = lam_g[o:o + N * m].reshape(N, m).T if m else None
        return lam_defect, lam_beq, lam_alg, lam_pe

    def split_lam_h(self, lam_h):
        nlp = self.nlp
        N = nlp.N
        m = nlp.m_path_stage
        o = N * m
        lam_path = lam_h[:o].reshape(N, m).T if m else None
        lam_pt = lam_h[o:o + nlp.m_path_term]
        o += nlp.m_path_term
        lam_bineq = lam_h[o:o + nlp.m_boundary_ineq]
        return lam_path, lam_pt, lam_bineq

    def hess_lag(self, w, sigma, lam_g, lam_h) -> np.ndarray:
        nlp = self.nlp
        N = nlp.N
        n_v = nlp.n_v
        H = np.zeros((self.n_w, self.n_w))
        V = self._V(w)
        lam_defect, lam_beq, lam_alg, lam_pe = self.split_lam_g(lam_g)
        lam_path, lam_pt, lam_bineq = self.split_lam_h(lam_h)

        def add_batched(out, scale_per_stage=None):
            out = _cols(out, n_v * n_v, N).reshape(n_v, n_v, N)
            for k in range(N):
                Hk = out[:, :, k]
                if scale_per_stage is not None:
                    Hk = Hk * scale_per_stage[k]
                self._scatter_stage_hess(H, Hk, k)

        if nlp.stage.cost is not None and sigma != 0.0:
            out = self._cache("cost_hess", nlp.derived("cost_hess"))(V, self.PS)
            add_batched(out, np.full(N, sigma))
        hd = nlp.derived("hess_dyn")
        out = hd.tape().run([V, self.PS, -lam_defect])[0]
        add_batched(out)
        if nlp.stage.path is not None and lam_path is not None:
            hp = nlp.derived("hess_path")
            out = hp.tape().run([V, self.PS, lam_path])[0]
            add_batched(out)
        if nlp.stage.alg is not None and lam_alg is not None:
            ha = nlp.derived("hess_alg")
            out = ha.tape().run([V, self.PS, lam_alg])[0]
            add_batched(out)
        if nlp.stage.path_eq is not None and lam_pe is not None:
            hpe = nlp.derived("hess_path_eq")
            out = hpe.tape().run([V, self.PS, lam_pe])[0]
            add_batched(out)
        if nlp.stage.cost0 is not None and sigma != 0.0:
            h0 = nlp.derived("cost0_hess").tape().run([V[:, 0], self.ps0])[0]
            h0 = np.broadcast_to(h0, (n_v * n_v,)).reshape(n_v, n_v)
            self._scatter_block(H, sigma * h0, self._vcols(0))
        if nlp.stage.mayer is not None and sigma != 0.0:
            hm = nlp.derived("mayer_hess").tape().run([self._vm(w), self.psT])[0]
            nm = nlp.n_x + 1
            hm = np.broadcast_to(hm, (nm * nm,)).reshape(nm, nm)
            self._scatter_block(H, sigma * hm, self._mcols())
        if nlp.stage.path_term is not None and lam_pt.size:
            hpt_fn = nlp.derived("hess_path_term")
            hpt = hpt_fn.tape().run([self._vm(w), self.psT, lam_pt])[0]
            nm = nlp.n_x + 1
            hpt = np.broadcast_to(hpt, (nm * nm,)).reshape(nm, nm)
            self._scatter_block(H, hpt, self._mcols())
        hb_fn = nlp.derived("hess_boundary")
        if hb_fn is not None:
            args = [self._vb(w), self.ps0, self.psT]
            if nlp.stage.boundary_eq is not None:
                args.append(lam_beq)
            if nlp.stage.boundary_ineq is not None:
                args.append(lam_bineq)
            hb = hb_fn.tape().run(args)[0]
            nb = 2 * nlp.n_x + 1
            hb = np.broadcast_to(hb, (nb * nb,)).reshape(nb, nb)
            self._scatter_block(H, hb, self._bcols())
        return H

    def gn_hess(self, w) -> np.ndarray | None:
        if not self.has_gn:
            return None
        nlp = self.nlp
        H = np.zeros((self.n_w, self.n_w))
        if nlp.stage.res is not None:
            m = nlp.stage.res.outputs[0].n
            jr = self._cache("res_jac", nlp.derived("res_jac"))(self._V(w), self.PS)
            jr = _cols(jr, m * nlp.n_v, self.N).reshape(m, nlp.n_v, self.N)
            for k in range(self.N):
                cols = self._vcols(k)
                Jk = jr[:, :, k]
                Hv = 2.0 * (Jk.T @ Jk)
                self._scatter_block(H, Hv, cols)
        if nlp.stage.res0 is not None:
            jr0 = nlp.derived("res0_jac").tape().run([self._V(w)[:, 0], self.ps0])[0]
            m = nlp.stage.res0.outputs[0].n
            J0 = np.broadcast_to(jr0, (m * nlp.n_v,)).reshape(m, nlp.n_v)
            self._scatter_block(H, 2.0 * (J0.T @ J0), self._vcols(0))
        if nlp.stage.res_mayer is not None:
            jrm = nlp.derived("res_mayer_jac").tape().run([self._vm(w), self.psT])[0]
            m = nlp.stage.res_mayer.outputs[0].n
            Jm = np.broadcast_to(jrm, (m * (nlp.n_x + 1),)).reshape(m, nlp.n_x + 1)
            self._scatter_block(H, 2.0 * (Jm.T @ Jm), self._mcols())
        return H

    def resimulate(self, w) -> np.ndarray:
        """Roll the integrator forward from x_0 with the solution controls."""
        nlp = self.nlp
        X, U, Z = self.split(w)
        dt = self._dt(w)
        xs = np.empty_like(X)
        xs[:, 0] = X[:, 0]
        phi = nlp.stage.phi.tape()
        for k in range(self.N):
            v = [xs[:, k]]
            if nlp.n_u:
                v.append(U[:, k])
            if nlp.n_z:
                v.append(Z[:, k])
            v.append([k * dt])
            if nlp.free_time:
                v.append([dt])
            out = phi.run([np.concatenate(v), self.PS[:, k]])[0]
            xs[:, k + 1] = out
        return xs


class SingleShootingEvaluator:
    """Forward-substitution evaluator: states come from rolling the
    integrator, sensitivities from chaining stage Jacobians."""

    def __init__(self, nlp: Nlp, p: np.ndarray):
        self.nlp = nlp
        self.p = np.asarray(p, dtype=float).reshape(-1)
        self.PS = nlp.stage_parameter_matrix(self.p)
        self.ps0 = self.PS[:, 0]
        self.psT = nlp.terminal_parameter_vector(self.p)
        self.N = nlp.N
        self.lbw = nlp.lbw
        self.ubw = nlp.ubw
        self.n_w = nlp.n_w
        x0p = nlp.initial_state_params
        if len(x0p) != len(nlp.model_x_slices):
            raise TranscriptionError(
                "single shooting needs the initial state pinned to a parameter "
                "for every model")
        self.x0 = np.zeros(nlp.n_x)
        by_name = {e.name: e for e in nlp.params}
        for mi, (lo, hi) in enumerate(nlp.model_x_slices):
            e = by_name[x0p[mi]]
            self.x0[lo:hi] = self.p[e.p_offset:e.p_offset + e.length]
        self.m_g = nlp.m_boundary_eq + self.N * nlp.m_path_eq_stage
        sf = nlp.stage
        self.has_gn = (
            (sf.cost is None or sf.res is not None)
            and (sf.cost0 is None or sf.res0 is not None)
            and (sf.mayer is None or sf.res_mayer is not None)
        )
        xlo, xhi = nlp._state_bounds
        self._xlo_rows = np.where(np.isfinite(xlo))[0]
        self._xhi_rows = np.where(np.isfinite(xhi))[0]
        self.m_h = (self.N * nlp.m_path_stage + nlp.m_path_term
                    + nlp.m_boundary_ineq
                    + (self.N + 1) * (len(self._xlo_rows) + len(self._xhi_rows)))

    def _dt(self, w):
        nlp = self.nlp
        return w[nlp.T_index] / nlp.N if nlp.free_time else nlp.fixed_dt()

    def _T(self, w):
        nlp = self.nlp
        return w[nlp.T_index] if nlp.free_time else nlp.horizon_value

    def _controls(self, w):
        return w[: self.N * self.nlp.n_u].reshape(self.N, self.nlp.n_u).T

    _cache_key = None
    _cache_val = None
    _cache_S = None

    def _rollout(self, w, need_sens: bool = True):
        """States, per-stage inputs, and state sensitivities dx_k/dw.

        Rollouts are memoized per decision vector: the merit line search
        evaluates f/g/h several times at the same trial points.
        """
        nlp = self.nlp
        N = self.N
        key = w.tobytes()
        if self._cache_key == key and (not need_sens or self._cache_S is not None):
            X, U, Vs = self._cache_val
            return X, U, self._cache_S, Vs
        U = self._controls(w)
        dt = self._dt(w)
        X = np.empty((nlp.n_x, N + 1))
        X[:, 0] = self.x0
        S = np.zeros((N + 1, nlp.n_x, self.n_w)) if need_sens else None
        Vs = np.empty((nlp.n_v, N))
        phi = nlp.stage.phi.tape()
        jac = nlp.derived("phi_jac").tape() if need_sens else None
        for k in range(N):
            v = [X[:, k]]
            if nlp.n_u:
                v.append(U[:, k])
            v.append([k * dt])
            if nlp.free_time:
                v.append([dt])
            vk = np.concatenate(v)
            Vs[:, k] = vk
            X[:, k + 1] = phi.run([vk, self.PS[:, k]])[0]
            if not need_sens:
                continue
            Jv = jac.run([vk, self.PS[:, k]])[0]
            Jv = np.broadcast_to(Jv, (nlp.n_x * nlp.n_v,)).reshape(nlp.n_x, nlp.n_v)
            A = Jv[:, : nlp.n_x]
            S[k + 1] = A @ S[k]
            if nlp.n_u:
                B = Jv[:, nlp.n_x: nlp.n_x + nlp.n_u]
                S[k + 1][:, k * nlp.n_u:(k + 1) * nlp.n_u] += B
            if nlp.free_time:
                t0c = nlp.n_x + nlp.n_u + nlp.n_z
                S[k + 1][:, nlp.T_index] += (Jv[:, t0c] * (k / N)
                                             + Jv[:, t0c + 1] / N)
        self._cache_key = key
        self._cache_val = (X, U, Vs)
        self._cache_S = S
        return X, U, S, Vs

    def _vcol_chain(self, k, S):
        """dv_k/dw as a dense matrix."""
        nlp = self.nlp
        M = np.zeros((nlp.n_v, self.n_w))
        M[: nlp.n_x] = S[k]
        if nlp.n_u and k < self.N:
            M[nlp.n_x: nlp.n_x + nlp.n_u, k * nlp.n_u:(k + 1) * nlp.n_u] = np.eye(nlp.n_u)
        if nlp.free_time:
            t0c = nlp.n_x + nlp.n_u + nlp.n_z
            M[t0c, nlp.T_index] = k / self.N
            M[t0c + 1, nlp.T_index] = 1.0 / self.N
        return M

    def _vm_chain(self, S):
        nlp = self.nlp
        M = np.zeros((nlp.n_x + 1, self.n_w))
        M[: nlp.n_x] = S[self.N]
        if nlp.free_time:
            M[nlp.n_x, nlp.T_index] = 1.0
        return M

    def _vb_chain(self, S):
        nlp = self.nlp
        M = np.zeros((2 * nlp.n_x + 1, self.n_w))
        M[nlp.n_x: 2 * nlp.n_x] = S[self.N]
        if nlp.free_time:
            M[2 * nlp.n_x, nlp.T_index] = 1.0
        return M

    def _vm(self, X, w):
        return np.concatenate([X[:, self.N], [self._T(w)]])

    def _vb(self, X, w):
        return np.concatenate([X[:, 0], X[:, self.N], [self._T(w)]])

    def f(self, w) -> float:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w, need_sens=False)
        total = 0.0
        if nlp.stage.cost is not None:
            tape = nlp.stage.cost.tape()
            for k in range(self.N):
                total += float(np.broadcast_to(
                    tape.run([Vs[:, k], self.PS[:, k]])[0], (1,))[0])
        if nlp.stage.cost0 is not None:
            total += float(nlp.stage.cost0.tape().run([Vs[:, 0], self.ps0])[0][0])
        if nlp.stage.mayer is not None:
            total += float(nlp.stage.mayer.tape().run(
                [self._vm(X, w), self.psT])[0][0])
        return total

    def grad(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w)
        g = np.zeros(self.n_w)
        if nlp.stage.cost is not None:
            gt = nlp.derived("cost_grad").tape()
            for k in range(self.N):
                gv = np.broadcast_to(gt.run([Vs[:, k], self.PS[:, k]])[0], (nlp.n_v,))
                g += self._vcol_chain(k, S).T @ gv
        if nlp.stage.cost0 is not None:
            gv = np.broadcast_to(
                nlp.derived("cost0_grad").tape().run([Vs[:, 0], self.ps0])[0],
                (nlp.n_v,))
            g += self._vcol_chain(0, S).T @ gv
        if nlp.stage.mayer is not None:
            gm = np.broadcast_to(
                nlp.derived("mayer_grad").tape().run([self._vm(X, w), self.psT])[0],
                (nlp.n_x + 1,))
            g += self._vm_chain(S).T @ gm
        return g

    def g(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w, need_sens=False)
        parts = []
        if nlp.stage.boundary_eq is not None:
            parts.append(nlp.stage.boundary_eq.tape().run(
                [self._vb(X, w), self.ps0, self.psT])[0])
        if nlp.stage.path_eq is not None:
            tape = nlp.stage.path_eq.tape()
            m = nlp.m_path_eq_stage
            for k in range(self.N):
                parts.append(np.broadcast_to(
                    tape.run([Vs[:, k], self.PS[:, k]])[0], (m,)))
        return np.concatenate(parts) if parts else np.zeros(0)

    def jac_g(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w)
        J = np.zeros((self.m_g, self.n_w))
        row0 = 0
        if nlp.stage.boundary_eq is not None:
            m = nlp.m_boundary_eq
            jb = np.broadcast_to(
                nlp.derived("boundary_eq_jac").tape().run(
                    [self._vb(X, w), self.ps0, self.psT])[0],
                (m * (2 * nlp.n_x + 1),)).reshape(m, 2 * nlp.n_x + 1)
            J[:m] = jb @ self._vb_chain(S)
            row0 += m
        if nlp.stage.path_eq is not None:
            m = nlp.m_path_eq_stage
            jt = nlp.derived("path_eq_jac").tape()
            for k in range(self.N):
                jp = np.broadcast_to(
                    jt.run([Vs[:, k], self.PS[:, k]])[0],
                    (m * nlp.n_v,)).reshape(m, nlp.n_v)
                J[row0:row0 + m] = jp @ self._vcol_chain(k, S)
                row0 += m
        return J

    def h(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w, need_sens=False)
        parts = []
        if nlp.stage.path is not None:
            tape = nlp.stage.path.tape()
            m = nlp.m_path_stage
            for k in range(self.N):
                parts.append(np.broadcast_to(
                    tape.run([Vs[:, k], self.PS[:, k]])[0], (m,)))
        if nlp.stage.path_term is not None:
            parts.append(nlp.stage.path_term.tape().run(
                [self._vm(X, w), self.psT])[0])
        if nlp.stage.boundary_ineq is not None:
            parts.append(nlp.stage.boundary_ineq.tape().run(
                [self._vb(X, w), self.ps0, self.psT])[0])
        xlo, xhi = nlp._state_bounds
        for k in range(self.N + 1):
            if len(self._xhi_rows):
                parts.append(X[self._xhi_rows, k] - xhi[self._xhi_rows])
            if len(self._xlo_rows):
                parts.append(xlo[self._xlo_rows] - X[self._xlo_rows, k])
        return np.concatenate(parts) if parts else np.zeros(0)

    def jac_h(self, w) -> np.ndarray:
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w)
        J = np.zeros((self.m_h, self.n_w))
        row0 = 0
        if nlp.stage.path is not None:
            m = nlp.m_path_stage
            jt = nlp.derived("path_jac").tape()
            for k in range(self.N):
                jp = np.broadcast_to(
                    jt.run([Vs[:, k], self.PS[:, k]])[0],
                    (m * nlp.n_v,)).reshape(m, nlp.n_v)
                J[row0:row0 + m] = jp @ self._vcol_chain(k, S)
                row0 += m
        if nlp.stage.path_term is not None:
            m = nlp.m_path_term
            jt = np.broadcast_to(
                nlp.derived("path_term_jac").tape().run(
                    [self._vm(X, w), self.psT])[0],
                (m * (nlp.n_x + 1),)).reshape(m, nlp.n_x + 1)
            J[row0:row0 + m] = jt @ self._vm_chain(S)
            row0 += m
        if nlp.stage.boundary_ineq is not None:
            m = nlp.m_boundary_ineq
            jb = np.broadcast_to(
                nlp.derived("boundary_ineq_jac").tape().run(
                    [self._vb(X, w), self.ps0, self.psT])[0],
                (m * (2 * nlp.n_x + 1),)).reshape(m, 2 * nlp.n_x + 1)
            J[row0:row0 + m] = jb @ self._vb_chain(S)
            row0 += m
        for k in range(self.N + 1):
            for i in self._xhi_rows:
                J[row0] = S[k][i]
                row0 += 1
            for i in self._xlo_rows:
                J[row0] = -S[k][i]
                row0 += 1
        return J

    def split_lam_h(self, lam_h):
        nlp = self.nlp
        m = nlp.m_path_stage
        o = self.N * m
        lam_path = lam_h[:o].reshape(self.N, m).T if m else None
        lam_pt = lam_h[o:o + nlp.m_path_term]
        o += nlp.m_path_term
        lam_bineq = lam_h[o:o + nlp.m_boundary_ineq]
        o += nlp.m_boundary_ineq
        lam_bounds = lam_h[o:]
        return lam_path, lam_pt, lam_bineq, lam_bounds

    def hess_lag(self, w, sigma, lam_g, lam_h) -> np.ndarray:
        """Exact reduced Hessian via a second-order adjoint sweep."""
        nlp = self.nlp
        N = self.N
        X, U, S, Vs = self._rollout(w)
        lam_beq = lam_g[: nlp.m_boundary_eq]
        lam_pe_all = lam_g[nlp.m_boundary_eq:]
        lam_path, lam_pt, lam_bineq, lam_bounds = self.split_lam_h(lam_h)

        jt = nlp.derived("phi_jac").tape()
        A = np.empty((N, nlp.n_x, nlp.n_x))
        for k in range(N):
            Jv = np.broadcast_to(jt.run([Vs[:, k], self.PS[:, k]])[0],
                                 (nlp.n_x * nlp.n_v,)).reshape(nlp.n_x, nlp.n_v)
            A[k] = Jv[:, : nlp.n_x]

        # Adjoint seeds lambda_bar[k] = d(total Lagrangian)/dx_k holding
        # controls fixed; bound-row multipliers enter as +/- on the state.
        lam_bar = np.zeros((N + 1, nlp.n_x))
        nb = len(self._xhi_rows) + len(self._xlo_rows)

        def bound_contrib(k):
            v = np.zeros(nlp.n_x)
            if nb == 0:
                return v
            seg = lam_bounds[k * nb:(k + 1) * nb]
            o = 0
            for i in self._xhi_rows:
                v[i] += seg[o]
                o += 1
            for i in self._xlo_rows:
                v[i] -= seg[o]
                o += 1
            return v

        gm = np.zeros(nlp.n_x)
        if nlp.stage.mayer is not None:
            gmv = np.broadcast_to(
                nlp.derived("mayer_grad").tape().run([self._vm(X, w), self.psT])[0],
                (nlp.n_x + 1,))
            gm += sigma * gmv[: nlp.n_x]
        if nlp.stage.path_term is not None and lam_pt.size:
            jt2 = np.broadcast_to(
                nlp.derived("path_term_jac").tape().run(
                    [self._vm(X, w), self.psT])[0],
                (nlp.m_path_term * (nlp.n_x + 1),)).reshape(
                nlp.m_path_term, nlp.n_x + 1)
            gm += jt2[:, : nlp.n_x].T @ lam_pt
        if nlp.stage.boundary_eq is not None and lam_beq.size:
            jb = np.broadcast_to(
                nlp.derived("boundary_eq_jac").tape().run(
                    [self._vb(X, w), self.ps0, self.psT])[0],
                (nlp.m_boundary_eq * (2 * nlp.n_x + 1),)).reshape(
                nlp.m_boundary_eq, 2 * nlp.n_x + 1)
            gm += jb[:, nlp.n_x: 2 * nlp.n_x].T @ lam_beq
        if nlp.stage.boundary_ineq is not None and lam_bineq.size:
            jb = np.broadcast_to(
                nlp.derived("boundary_ineq_jac").tape().run(
                    [self._vb(X, w), self.ps0, self.psT])[0],
                (nlp.m_boundary_ineq * (2 * nlp.n_x + 1),)).reshape(
                nlp.m_boundary_ineq, 2 * nlp.n_x + 1)
            gm += jb[:, nlp.n_x: 2 * nlp.n_x].T @ lam_bineq
        lam_bar[N] = gm + bound_contrib(N)

        cg = nlp.derived("cost_grad").tape() if nlp.stage.cost is not None else None
        pj = nlp.derived("path_jac").tape() if nlp.stage.path is not None else None
        pe = nlp.derived("path_eq_jac").tape() if nlp.stage.path_eq is not None else None
        for k in range(N - 1, -1, -1):
            v = A[k].T @ lam_bar[k + 1]
            if cg is not None:
                gv = np.broadcast_to(cg.run([Vs[:, k], self.PS[:, k]])[0], (nlp.n_v,))
                v += sigma * gv[: nlp.n_x]
            if pj is not None and lam_path is not None:
                jp = np.broadcast_to(pj.run([Vs[:, k], self.PS[:, k]])[0],
                                     (nlp.m_path_stage * nlp.n_v,)).reshape(
                    nlp.m_path_stage, nlp.n_v)
                v += jp[:, : nlp.n_x].T @ lam_path[:, k]
            if pe is not None:
                m = nlp.m_path_eq_stage
                jp = np.broadcast_to(pe.run([Vs[:, k], self.PS[:, k]])[0],
                                     (m * nlp.n_v,)).reshape(m, nlp.n_v)
                v += jp[:, : nlp.n_x].T @ lam_pe_all[k * m:(k + 1) * m]
            if k == 0 and nlp.stage.cost0 is not None:
                gv = np.broadcast_to(
                    nlp.derived("cost0_grad").tape().run([Vs[:, 0], self.ps0])[0],
                    (nlp.n_v,))
                v += sigma * gv[: nlp.n_x]
            lam_bar[k] = v + bound_contrib(k)

        H = np.zeros((self.n_w, self.n_w))
        hd = nlp.derived("hess_dyn").tape()
        ch = nlp.derived("cost_hess").tape() if nlp.stage.cost is not None else None
        hp = nlp.derived("hess_path").tape() if nlp.stage.path is not None else None
        hpe = nlp.derived("hess_path_eq").tape() if nlp.stage.path_eq is not None else None
        for k in range(N):
            Hv = np.zeros((nlp.n_v, nlp.n_v))
            out = hd.run([Vs[:, k], self.PS[:, k], lam_bar[k + 1]])[0]
            Hv += np.broadcast_to(out, (nlp.n_v * nlp.n_v,)).reshape(nlp.n_v, nlp.n_v)
            if ch is not None and sigma != 0.0:
                out = ch.run([Vs[:, k], self.PS[:, k]])[0]
                Hv += sigma * np.broadcast_to(out, (nlp.n_v * nlp.n_v,)).reshape(
                    nlp.n_v, nlp.n_v)
            if hp is not None and lam_path is not None:
                out = hp.run([Vs[:, k], self.PS[:, k], lam_path[:, k]])[0]
                Hv += np.broadcast_to(out, (nlp.n_v * nlp.n_v,)).reshape(
                    nlp.n_v, nlp.n_v)
            if hpe is not None:
                m = nlp.m_path_eq_stage
                out = hpe.run([Vs[:, k], self.PS[:, k],
                               lam_pe_all[k * m:(k + 1) * m]])[0]
                Hv += np.broadcast_to(out, (nlp.n_v * nlp.n_v,)).reshape(
                    nlp.n_v, nlp.n_v)
            if k == 0 and nlp.stage.cost0 is not None and sigma != 0.0:
                out = nlp.derived("cost0_hess").tape().run([Vs[:, 0], self.ps0])[0]
                Hv += sigma * np.broadcast_to(out, (nlp.n_v * nlp.n_v,)).reshape(
                    nlp.n_v, nlp.n_v)
            M = self._vcol_chain(k, S)
            H += M.T @ Hv @ M
        if nlp.stage.mayer is not None and sigma != 0.0:
            hm = np.broadcast_to(
                nlp.derived("mayer_hess").tape().run([self._vm(X, w), self.psT])[0],
                ((nlp.n_x + 1) ** 2,)).reshape(nlp.n_x + 1, nlp.n_x + 1)
            M = self._vm_chain(S)
            H += sigma * (M.T @ hm @ M)
        if nlp.stage.path_term is not None and lam_pt.size:
            hpt = np.broadcast_to(
                nlp.derived("hess_path_term").tape().run(
                    [self._vm(X, w), self.psT, lam_pt])[0],
                ((nlp.n_x + 1) ** 2,)).reshape(nlp.n_x + 1, nlp.n_x + 1)
            M = self._vm_chain(S)
            H += M.T @ hpt @ M
        hb_fn = nlp.derived("hess_boundary")
        if hb_fn is not None:
            args = [self._vb(X, w), self.ps0, self.psT]
            if nlp.stage.boundary_eq is not None:
                args.append(lam_beq)
            if nlp.stage.boundary_ineq is not None:
                args.append(lam_bineq)
            hb = np.broadcast_to(hb_fn.tape().run(args)[0],
                                 ((2 * nlp.n_x + 1) ** 2,)).reshape(
                2 * nlp.n_x + 1, 2 * nlp.n_x + 1)
            M = self._vb_chain(S)
            H += M.T @ hb @ M
        return H

    def gn_hess(self, w) -> np.ndarray | None:
        if not self.has_gn:
            return None
        nlp = self.nlp
        X, U, S, Vs = self._rollout(w)
        H = np.zeros((self.n_w, self.n_w))
        if nlp.stage.res is not None:
            m = nlp.stage.res.outputs[0].n
            jt = nlp.derived("res_jac").tape()
            for k in range(self.N):
                jr = np.broadcast_to(jt.run([Vs[:, k], self.PS[:, k]])[0],
                                     (m * nlp.n_v,)).reshape(m, nlp.n_v)
                Jw = jr @ self._vcol_chain(k, S)
                H += 2.0 * (Jw.T @ Jw)
        if nlp.stage.res0 is not None:
            m = nlp.stage.res0.outputs[0].n
            jr = np.broadcast_to(
                nlp.derived("res0_jac").tape().run([Vs[:, 0], self.ps0])[0],
                (m * nlp.n_v,)).reshape(m, nlp.n_v)
            Jw = jr @ self._vcol_chain(0, S)
            H += 2.0 * (Jw.T @ Jw)
        if nlp.stage.res_mayer is not None:
            m = nlp.stage.res_mayer.outputs[0].n
            jr = np.broadcast_to(
                nlp.derived("res_mayer_jac").tape().run(
                    [self._vm(X, w), self.psT])[0],
                (m * (nlp.n_x + 1),)).reshape(m, nlp.n_x + 1)
            Jw = jr @ self._vm_chain(S)
            H += 2.0 * (Jw.T @ Jw)
        return H
