"""High-level optimal control problem builder.

An `Ocp` collects models, parameters, objective terms and constraints in the
order a control engineer writes them, then `to_canonical()` normalizes
everything into the slots of the continuous-time canonical problem: running
cost, terminal cost, boundary rows, dynamics, algebraic residuals, path rows
and plain variable bounds.  Transcription consumes only the canonical record.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import expr as ex
from . import model_io as mio
from .model_io import BoundModel, ModelSpec

RESERVED_NAMES = {"t", "T", "x", "u", "z", "x_opt", "u_opt", "z_opt", "f_opt"}


class OcpError(ValueError):
    """Inconsistent problem construction."""


@dataclass(frozen=True)
class FreeTime:
    """Marks the horizon length as a decision variable with an initial guess."""

    t_guess: float

    def __post_init__(self):
        if not self.t_guess > 0:
            raise OcpError("free-time initial guess must be positive")


@dataclass
class Parameter:
    name: str
    length: int
    stage_varying: bool
    sym: ex.Expr


class Anchored:
    """Expression pinned to one end of the horizon (initial or terminal)."""

    __slots__ = ("expr", "anchor")

    def __init__(self, expr, anchor: str):
        if anchor not in ("t0", "tf"):
            raise OcpError(f"unknown anchor {anchor!r}")
        if isinstance(expr, Anchored):
            if expr.anchor != anchor:
                raise OcpError("cannot mix initial-time and terminal-time anchors")
            expr = expr.expr
        self.expr = ex.as_expr(expr)
        self.anchor = anchor

    @property
    def n(self):
        return self.expr.n

    def _combine(self, op, other, swapped=False):
        if isinstance(other, Anchored):
            if other.anchor != self.anchor:
                raise OcpError("cannot mix initial-time and terminal-time anchors")
            other = other.expr
        a, b = (other, self.expr) if swapped else (self.expr, other)
        return Anchored(ex.binary(op, a, b), self.anchor)

    def __add__(self, other):
        return self._combine("add", other)

    def __radd__(self, other):
        return self._combine("add", other, swapped=True)

    def __sub__(self, other):
        return self._combine("sub", other)

    def __rsub__(self, other):
        return self._combine("sub", other, swapped=True)

    def __mul__(self, other):
        return self._combine("mul", other)

    def __rmul__(self, other):
        return self._combine("mul", other, swapped=True)

    def __truediv__(self, other):
        return self._combine("div", other)

    def __rtruediv__(self, other):
        return self._combine("div", other, swapped=True)

    def __pow__(self, other):
        return self._combine("pow", other)

    def __neg__(self):
        return Anchored(-self.expr, self.anchor)

    def __getitem__(self, item):
        return Anchored(self.expr[item], self.anchor)

    def __le__(self, other):
        return ex.Rel(None, self, other)

    def __ge__(self, other):
        return ex.Rel(other, self, None)


def at_t0(expr) -> Anchored:
    """Anchor an expression at the start of the horizon."""
    return Anchored(expr, "t0")


def at_tf(expr) -> Anchored:
    """Anchor an expression at the end of the horizon."""
    return Anchored(expr, "tf")


@dataclass
class ObjectiveTerm:
    kind: str  # "integral" | "at_t0" | "at_tf"
    expr: ex.Expr
    insertion_id: int = -1


def integral(expr) -> ObjectiveTerm:
    """Running-cost term, integrated over the horizon."""
    if isinstance(expr, Anchored):
        raise OcpError("integral terms cannot be anchored")
    return ObjectiveTerm("integral", ex.as_expr(expr))


@dataclass
class EqCon:
    lhs: object
    rhs: object


def equal(lhs, rhs) -> EqCon:
    """Equality constraint record (kept apart from `==` on purpose)."""
    return EqCon(lhs, rhs)


class ModelHandle:
    """Per-model accessor: `handle.phi` is the state component, `handle.x`
    the whole state vector, `handle.nx` its length."""

    def __init__(self, name: str, model: BoundModel):
        self.__dict__["_name"] = name
        self.__dict__["_model"] = model

    @property
    def name(self):
        return self._name

    @property
    def model(self) -> BoundModel:
        return self._model

    @property
    def x(self) -> ex.Expr:
        return self._model.x

    @property
    def u(self):
        return self._model.u

    @property
    def z(self):
        return self._model.z

    @property
    def nx(self) -> int:
        return self._model.n_x

    @property
    def nu(self) -> int:
        return self._model.n_u

    @property
    def nz(self) -> int:
        return self._model.n_z

    def __getattr__(self, name):
        model: BoundModel = self.__dict__["_model"]
        comp = model.components.get(name)
        if comp is None:
            raise AttributeError(f"model {self._name!r} has no component {name!r}")
        kind, off = comp
        vec = {"x": model.x, "u": model.u, "z": model.z}[kind]
        return vec[off]

    def __setattr__(self, key, value):
        raise AttributeError("model handles are read-only")


@dataclass
class PathRow:
    expr: ex.Expr
    lower: float | None
    upper: float | None
    is_eq: bool
    insertion_id: int


@dataclass
class BoundaryRow:
    anchor: str  # "t0" | "tf"
    expr: ex.Expr
    lower: float | None
    upper: float | None
    is_eq: bool
    insertion_id: int


@dataclass
class VarBound:
    kind: str  # "x" | "u" | "z"
    offset: int  # into the stacked vector of that kind
    length: int
    lower: float
    upper: float
    insertion_id: int


@dataclass
class CanonicalOcp:
    """Everything the transcription needs, normalized and immutable."""

    horizon_kind: str  # "fixed" | "free"
    horizon_value: float  # T, or the initial guess under free time
    models: list[BoundModel]
    model_names: list[str]
    params: list[Parameter]
    t_sym: ex.Expr
    T_expr: ex.Expr  # symbol under free time, constant otherwise
    lagrange: ex.Expr
    mayer: ex.Expr
    cost_t0: ex.Expr
    lagrange_terms: list[ex.Expr]
    mayer_terms: list[ex.Expr]
    cost_t0_terms: list[ex.Expr]
    path_ineq: list[PathRow]
    path_eq: list[PathRow]
    boundary_eq: list[BoundaryRow]
    boundary_ineq: list[BoundaryRow]
    var_bounds: list[VarBound]
    n_x: int
    n_u: int
    n_z: int
    x_offsets: list[int]
    u_offsets: list[int]
    z_offsets: list[int]
    initial_state_params: dict[int, str]  # model index -> parameter name
    terminal_state_params: dict[int, str]
    solver_name: str
    solver_options: dict

    def slot_counts(self) -> dict[str, int]:
        return {
            "lagrange": len(self.lagrange_terms),
            "mayer": len(self.mayer_terms),
            "cost_t0": len(self.cost_t0_terms),
            "path_ineq": len(self.path_ineq),
            "path_eq": len(self.path_eq),
            "boundary_eq": len(self.boundary_eq),
            "boundary_ineq": len(self.boundary_ineq),
            "bounds": len(self.var_bounds),
        }


def _expr_key(e: ex.Expr) -> str:
    """Deterministic structural fingerprint used for canonical term ordering."""
    parts: list[str] = []
    ids: dict[int, int] = {}
    for node in ex.topo_order([e]):
        ids[id(node)] = len(ids)
        if node.kind == "const":
            parts.append(f"c{node.value!r}")
        elif node.kind == "sym":
            parts.append(f"s{node.name}:{node.n}")
        elif node.kind == "slice":
            parts.append(f"i{ids[id(node.children[0])]}:{node.lo}:{node.hi}")
        else:
            refs = ",".join(str(ids[id(c)]) for c in node.children)
            parts.append(f"{node.kind}({refs})")
    return ";".join(parts)


class Ocp:
    """Builder for one optimal control problem.

    Usage mirrors the runtime workflow: add a model, declare parameters,
    add objective terms and constraints, pick solver and transcription,
    then solve or export.
    """

    def __init__(self, T: Union[float, FreeTime] = 1.0):
        if isinstance(T, FreeTime):
            self._horizon_kind = "free"
            self._horizon_value = float(T.t_guess)
        else:
            if not float(T) > 0:
                raise OcpError("horizon length must be positive")
            self._horizon_kind = "fixed"
            self._horizon_value = float(T)
        self._models: list[BoundModel] = []
        self._model_names: list[str] = []
        self._handles: dict[str, ModelHandle] = {}
        self._params: list[Parameter] = []
        self._param_by_name: dict[str, Parameter] = {}
        self._objective: list[ObjectiveTerm] = []
        self._constraints: list = []  # (Rel | EqCon, insertion id)
        self._values: dict[str, np.ndarray] = {}
        self._names_in_use: set[str] = set(RESERVED_NAMES)
        self._t = ex.sym("t", 1)
        self._T_sym = ex.sym("T_horizon", 1)
        self._solver_name = "sqpmethod"
        self._solver_options: dict = {}
        self._method = None
        self._insertion = 0

    # -- construction ----------------------------------------------------
    @property
    def t(self) -> ex.Expr:
        """Time inside the horizon, usable in running costs and path rows."""
        return self._t

    @property
    def T(self) -> ex.Expr:
        """Horizon length: a decision symbol under free time, else constant."""
        if self._horizon_kind == "free":
            return self._T_sym
        return ex.const(self._horizon_value)

    def add_model(self, name: str, source: Union[str, Path, ModelSpec, BoundModel],
                  base_dir: str | Path | None = None) -> ModelHandle:
        if name in self._handles or name in self._names_in_use:
            raise OcpError(f"name collision: {name!r} already in use")
        if isinstance(source, BoundModel):
            model = source
        elif isinstance(source, ModelSpec):
            model = mio.bind(source, base_dir=base_dir)
        else:
            path = Path(source)
            spec = mio.load_model(path, name=name)
            model = mio.bind(spec, base_dir=path.parent)
        for comp in model.components:
            if comp in self._names_in_use:
                raise OcpError(f"name collision: component {comp!r} already in use")
        self._names_in_use.add(name)
        self._names_in_use.update(model.components)
        handle = ModelHandle(name, model)
        self._models.append(model)
        self._model_names.append(name)
        self._handles[name] = handle
        return handle

    def parameter(self, name: str, length: int = 1,
                  stage_varying: bool = False) -> ex.Expr:
        if int(length) < 1:
            raise OcpError("parameter length must be >= 1")
        if name in self._names_in_use:
            raise OcpError(f"name collision: {name!r} already in use")
        p = Parameter(name, int(length), bool(stage_varying), ex.sym(name, int(length)))
        self._params.append(p)
        self._param_by_name[name] = p
        self._names_in_use.add(name)
        return p.sym

    def integral(self, expr) -> ObjectiveTerm:
        return integral(expr)

    def at_t0(self, expr) -> Anchored:
        return at_t0(expr)

    def at_tf(self, expr) -> Anchored:
        return at_tf(expr)

    def add_objective(self, term: Union[ObjectiveTerm, Anchored]):
        if isinstance(term, Anchored):
            term = ObjectiveTerm("at_t0" if term.anchor == "t0" else "at_tf", term.expr)
        if not isinstance(term, ObjectiveTerm):
            raise OcpError("add_objective expects integral(...), at_t0(...) or at_tf(...)")
        if term.expr.n != 1:
            raise OcpError("objective terms must be scalar")
        self._check_symbols(term.expr, context=f"objective ({term.kind})")
        if term.kind == "at_tf" and self._references_controls(term.expr):
            raise OcpError("terminal objective terms may not reference controls")
        term.insertion_id = self._insertion
        self._insertion += 1
        self._objective.append(term)

    def subject_to(self, con: Union[ex.Rel, EqCon]):
        if isinstance(con, ObjectiveTerm):
            raise OcpError("objective terms cannot be used as constraints")
        if not isinstance(con, (ex.Rel, EqCon)):
            raise OcpError("subject_to expects a relation (use <=, >= or equal())")
        self._constraints.append((con, self._insertion))
        self._insertion += 1
        # Validate eagerly so errors point at the offending statement.
        self._classify(con, self._insertion - 1, check_only=True)

    def solver(self, name: str = "sqpmethod", options: dict | None = None):
        if name != "sqpmethod":
            raise OcpError(f"unknown solver {name!r} (built-in solver is 'sqpmethod')")
        self._solver_name = name
        self._solver_options = dict(options or {})

    def method(self, method):
        self._method = method

    def set_value(self, param: Union[str, ex.Expr], values):
        name = param if isinstance(param, str) else param.name
        if name not in self._param_by_name:
            raise OcpError(f"unknown parameter {name!r}")
        p = self._param_by_name[name]
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.size != p.length:
            raise OcpError(
                f"parameter {name!r} expects {p.length} values, got {arr.size}")
        self._values[name] = arr

    @property
    def parameter_values(self) -> dict[str, np.ndarray]:
        return dict(self._values)

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._params)

    # -- helpers ----------------------------------------------------------
    def _model_syms(self):
        xs = [m.x for m in self._models]
        us = [m.u for m in self._models if m.u is not None]
        zs = [m.z for m in self._models if m.z is not None]
        return xs, us, zs

    def _check_symbols(self, expr: ex.Expr, context: str):
        xs, us, zs = self._model_syms()
        allowed = {id(s) for s in xs + us + zs}
        allowed.update(id(p.sym) for p in self._params)
        allowed.add(id(self._t))
        allowed.add(id(self._T_sym))
        for s in ex.symbols_in([expr]):
            if id(s) not in allowed:
                raise OcpError(
                    f"{context} references a symbol {s.name!r} that is not a "
                    "model variable, declared parameter, or time")

    def _references_controls(self, expr: ex.Expr) -> bool:
        _, us, _ = self._model_syms()
        ids = {id(s) for s in us}
        return any(id(s) in ids for s in ex.symbols_in([expr]))

    def _references_algebraic(self, expr: ex.Expr) -> bool:
        _, _, zs = self._model_syms()
        ids = {id(s) for s in zs}
        return any(id(s) in ids for s in ex.symbols_in([expr]))

    def _as_var_slice(self, expr: ex.Expr):
        """Match `expr` as a contiguous slice of one model variable vector."""
        if expr.kind == "slice":
            target, lo, length = expr.children[0], expr.lo, expr.n
        elif expr.kind == "sym":
            target, lo, length = expr, 0, expr.n
        else:
            return None
        for mi, m in enumerate(self._models):
            if target is m.x:
                return ("x", self._offset("x", mi) + lo, length)
            if m.u is not None and target is m.u:
                return ("u", self._offset("u", mi) + lo, length)
            if m.z is not None and target is m.z:
                return ("z", self._offset("z", mi) + lo, length)
        return None

    def _offset(self, kind: str, model_index: int) -> int:
        total = 0
        for m in self._models[:model_index]:
            total += {"x": m.n_x, "u": m.n_u, "z": m.n_z}[kind]
        return total

    @staticmethod
    def _numeric_side(side) -> float | None:
        if isinstance(side, (int, float)):
            return float(side)
        if isinstance(side, ex.Expr) and side.kind == "const":
            return float(side.value)
        return None

    def _emit_row(self, expr, anchor, lo, hi, is_eq, insertion_id,
                  check_only, sinks, allow_bound=True):
        expr = ex.as_expr(expr)
        self._check_symbols(expr, "constraint")
        if anchor is not None:
            if self._references_controls(expr) or self._references_algebraic(expr):
                raise OcpError(
                    "boundary constraints may only reference states and parameters")
            row = BoundaryRow(anchor, expr, lo, hi, is_eq, insertion_id)
            if not check_only:
                sinks["boundary_eq" if is_eq else "boundary_ineq"].append(row)
            return
        if self._references_algebraic(expr):
            raise OcpError("path constraints may not reference algebraic states")
        if allow_bound and not is_eq:
            var = self._as_var_slice(expr)
            if var is not None:
                if not check_only:
                    kind, off, length = var
                    sinks["bounds"].append(VarBound(
                        kind, off, length,
                        -math.inf if lo is None else lo,
                        math.inf if hi is None else hi,
                        insertion_id))
                return
        if not check_only:
            sinks["path_eq" if is_eq else "path_ineq"].append(
                PathRow(expr, lo, hi, is_eq, insertion_id))

    def _classify(self, con, insertion_id: int, check_only=False,
                  sinks: dict | None = None):
        """Sort one user constraint into canonical slots (or just validate)."""

        def unwrap(side, anchor):
            if isinstance(side, Anchored):
                if anchor is not None and side.anchor != anchor:
                    raise OcpError("cannot mix initial-time and terminal-time anchors")
                return side.expr, side.anchor
            return side, anchor

        if isinstance(con, EqCon):
            anchor = None
            lhs, anchor = unwrap(con.lhs, anchor)
            rhs, anchor = unwrap(con.rhs, anchor)
            diff = ex.as_expr(lhs) - ex.as_expr(rhs)
            self._emit_row(diff, anchor, 0.0, 0.0, True, insertion_id,
                           check_only, sinks)
            return

        if not isinstance(con, ex.Rel):
            raise OcpError("subject_to expects a relation (use <=, >= or equal())")
        anchor = None
        expr, anchor = unwrap(con.expr, anchor)
        expr = ex.as_expr(expr)
        lo_num = self._numeric_side(con.lower) if con.lower is not None else None
        hi_num = self._numeric_side(con.upper) if con.upper is not None else None
        lower_is_expr = con.lower is not None and lo_num is None
        upper_is_expr = con.upper is not None and hi_num is None

        if not lower_is_expr and not upper_is_expr:
            if con.lower is None and con.upper is None:
                raise OcpError("constraint has no bounds")
            if lo_num is not None and hi_num is not None and lo_num > hi_num:
                raise OcpError(f"empty interval [{lo_num}, {hi_num}] in constraint")
            self._emit_row(expr, anchor, lo_num, hi_num, False, insertion_id,
                           check_only, sinks)
            return

        # Expression-valued sides fold into one-sided rows: lo - e <= 0,
        # e - hi <= 0.  A numeric side stays a plain bound on its row.
        if con.lower is not None:
            if lower_is_expr:
                side, anchor2 = unwrap(con.lower, anchor)
                self._emit_row(ex.as_expr(side) - expr, anchor2, None, 0.0, False,
                               insertion_id, check_only, sinks, allow_bound=False)
            else:
                self._emit_row(expr, anchor, lo_num, None, False, insertion_id,
                               check_only, sinks)
        if con.upper is not None:
            if upper_is_expr:
                side, anchor2 = unwrap(con.upper, anchor)
                self._emit_row(expr - ex.as_expr(side), anchor2, None, 0.0, False,
                               insertion_id, check_only, sinks, allow_bound=False)
            else:
                self._emit_row(expr, anchor, None, hi_num, False, insertion_id,
                               check_only, sinks)

    # -- canonicalization --------------------------------------------------
    def to_canonical(self) -> CanonicalOcp:
        if not self._models:
            raise OcpError("no model attached")
        sinks = {
            "path_ineq": [],
            "path_eq": [],
            "boundary_eq": [],
            "boundary_ineq": [],
            "bounds": [],
        }
        for con, iid in self._constraints:
            self._classify(con, iid, check_only=False, sinks=sinks)

        def ordered(terms: list[ObjectiveTerm], kind: str) -> list[ex.Expr]:
            sel = [t for t in terms if t.kind == kind]
            sel.sort(key=lambda t: (_expr_key(t.expr), t.insertion_id))
            return [t.expr for t in sel]

        lagrange_terms = ordered(self._objective, "integral")
        mayer_terms = ordered(self._objective, "at_tf")
        cost_t0_terms = ordered(self._objective, "at_t0")

        def total(terms: list[ex.Expr]) -> ex.Expr:
            if not terms:
                return ex.const(0.0)
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            return acc

        n_x = sum(m.n_x for m in self._models)
        n_u = sum(m.n_u for m in self._models)
        n_z = sum(m.n_z for m in self._models)

        initial_params: dict[int, str] = {}
        terminal_params: dict[int, str] = {}
        for row in sinks["boundary_eq"]:
            hit = self._match_state_pin(row.expr)
            if hit is not None:
                mi, pname = hit
                if row.anchor == "t0":
                    initial_params.setdefault(mi, pname)
                else:
                    terminal_params.setdefault(mi, pname)

        return CanonicalOcp(
            horizon_kind=self._horizon_kind,
            horizon_value=self._horizon_value,
            models=list(self._models),
            model_names=list(self._model_names),
            params=list(self._params),
            t_sym=self._t,
            T_expr=self.T,
            lagrange=total(lagrange_terms),
            mayer=total(mayer_terms),
            cost_t0=total(cost_t0_terms),
            lagrange_terms=lagrange_terms,
            mayer_terms=mayer_terms,
            cost_t0_terms=cost_t0_terms,
            path_ineq=sinks["path_ineq"],
            path_eq=sinks["path_eq"],
            boundary_eq=sinks["boundary_eq"],
            boundary_ineq=sinks["boundary_ineq"],
            var_bounds=sinks["bounds"],
            n_x=n_x,
            n_u=n_u,
            n_z=n_z,
            x_offsets=[self._offset("x", i) for i in range(len(self._models))],
            u_offsets=[self._offset("u", i) for i in range(len(self._models))],
            z_offsets=[self._offset("z", i) for i in range(len(self._models))],
            initial_state_params=initial_params,
            terminal_state_params=terminal_params,
            solver_name=self._solver_name,
            solver_options=dict(self._solver_options),
        )

    def _match_state_pin(self, expr: ex.Expr):
        """Recognize rows of the form `model.x - p` (full state pinned to a
        parameter); used for default initial guesses."""
        if expr.kind != "sub":
            return None
        a, b = expr.children
        if b.kind != "sym":
            return None
        pname = None
        for p in self._params:
            if b is p.sym:
                pname = p.name
        if pname is None:
            return None
        for mi, m in enumerate(self._models):
            if a is m.x and m.n_x == b.n:
                return (mi, pname)
        return None

    # -- late-stage conveniences (wired by transcription/solver) -----------
    def transcribe(self):
        from .transcription import transcribe
        if self._method is None:
            raise OcpError("no transcription method set (use ocp.method(...))")
        return transcribe(self.to_canonical(), self._method)

    def solve(self, init=None):
        from .solver import SqpOptions, sqp_solve
        nlp = self.transcribe()
        p = nlp.pack_parameters(self._values)
        opts = SqpOptions.from_dict(self._solver_options)
        return sqp_solve(nlp, p, init=init, opts=opts)
