"""Immutable vector expression graphs: evaluation, differentiation, serialization.

Every symbolic quantity in the toolchain (model right-hand sides, objectives,
constraints, derivative functions) is a DAG of `Expr` nodes.  Nodes are
immutable after construction and may be shared freely between graphs; a
`FunctionDef` packages named input symbols with output expressions and is the
unit of evaluation, differentiation and text serialization.

Evaluation follows IEEE-754 double semantics: division by zero, log of a
non-positive number etc. propagate Inf/NaN instead of raising, so callers can
detect bad trial points from the values themselves.
"""
from __future__ import annotations

import re
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

Number = Union[int, float]
ExprLike = Union["Expr", int, float]

UNARY_OPS = ("neg", "sin", "cos", "tan", "exp", "log", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class ExprError(ValueError):
    """Malformed expression construction or use."""


class SerializationError(ExprError):
    """Bad serialized-function text; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Expr:
    """One node of an immutable expression DAG.

    `kind` is one of: "const", "sym", a unary/binary opcode, "concat", or
    "slice".  `n` is the number of scalar entries the node evaluates to.
    Identity-based hashing is kept on purpose: node equality is semantic
    (by evaluation), never structural.
    """

    __slots__ = ("kind", "n", "value", "name", "children", "lo", "hi")

    def __init__(self, kind, n, value=None, name=None, children=(), lo=0, hi=0):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "children", children)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, key, value):
        raise AttributeError("Expr nodes are immutable")

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return binary("add", self, other)

    def __radd__(self, other):
        return binary("add", other, self)

    def __sub__(self, other):
        return binary("sub", self, other)

    def __rsub__(self, other):
        return binary("sub", other, self)

    def __mul__(self, other):
        return binary("mul", self, other)

    def __rmul__(self, other):
        return binary("mul", other, self)

    def __truediv__(self, other):
        return binary("div", self, other)

    def __rtruediv__(self, other):
        return binary("div", other, self)

    def __pow__(self, other):
        return binary("pow", self, other)

    def __rpow__(self, other):
        return binary("pow", other, self)

    def __neg__(self):
        return unary("neg", self)

    # Comparisons build constraint records for the OCP layer.  Equality is
    # NOT overloaded: nodes stay hashable by identity and dict-safe.
    def __le__(self, other):
        return Rel(None, self, other)

    def __ge__(self, other):
        return Rel(other, self, None)

    def __getitem__(self, item):
        if isinstance(item, slice):
            lo, hi, step = item.indices(self.n)
            if step != 1:
                raise ExprError("only unit-stride slices are supported")
            return index_range(self, lo, hi)
        i = int(item)
        if i < 0:
            i += self.n
        return index_range(self, i, i + 1)

    def __repr__(self):
        if self.kind == "const":
            return f"Expr(const {self.value!r})"
        if self.kind == "sym":
            return f"Expr(sym {self.name}:{self.n})"
        return f"Expr({self.kind}:{self.n})"


class Rel:
    """Two-sided bound record `lower <= expr <= upper` (either side optional).

    Produced by `<=` / `>=` on expressions so constraint statements read the
    way they are written, including the chained form `-2 <= (F <= 2)`.
    """

    __slots__ = ("lower", "expr", "upper")

    def __init__(self, lower, expr, upper):
        self.lower = lower
        self.expr = expr
        self.upper = upper

    def __le__(self, other):
        if self.upper is not None:
            raise ExprError("constraint already has an upper bound")
        return Rel(self.lower, self.expr, other)

    def __ge__(self, other):
        if self.lower is not None:
            raise ExprError("constraint already has a lower bound")
        return Rel(other, self.expr, self.upper)

    def __bool__(self):
        raise ExprError("a constraint record has no truth value")

    def __repr__(self):
        return f"Rel({self.lower!r} <= expr <= {self.upper!r})"


def as_expr(value: ExprLike) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return const(float(value))
    raise ExprError(f"cannot interpret {value!r} as an expression")


def const(value: Number) -> Expr:
    return Expr("const", 1, value=float(value))


def sym(name: str, n: int = 1) -> Expr:
    """Create a fresh symbol of length `n`; same-name calls give distinct nodes."""
    if not isinstance(name, str) or not name:
        raise ExprError("symbol name must be a nonempty string")
    if not _IDENT_RE.match(name):
        raise ExprError(f"invalid identifier {name!r}")
    n = int(n)
    if n < 1:
        raise ExprError("symbol length must be >= 1")
    return Expr("sym", n, name=name)


def unary(op: str, child: ExprLike) -> Expr:
    if op not in UNARY_OPS:
        raise ExprError(f"unknown unary opcode {op!r}")
    child = as_expr(child)
    if child.kind == "const":
        with np.errstate(all="ignore"):
            return const(float(_UNARY_FN[op](child.value)))
    if op == "neg" and child.kind == "neg":
        return child.children[0]
    return Expr(op, child.n, children=(child,))


def binary(op: str, a: ExprLike, b: ExprLike) -> Expr:
    if op not in BINARY_OPS:
        raise ExprError(f"unknown binary opcode {op!r}")
    a, b = as_expr(a), as_expr(b)
    if a.n != b.n and a.n != 1 and b.n != 1:
        raise ExprError(
            f"length mismatch in {op}: {a.n} vs {b.n} (need equal or scalar operand)"
        )
    if a.kind == "const" and b.kind == "const":
        with np.errstate(all="ignore"):
            return const(float(_BINARY_FN[op](a.value, b.value)))
    # Identity folds that cannot change IEEE semantics of the other operand.
    if op == "add":
        if _is_const(a, 0.0):
            return b
        if _is_const(b, 0.0):
            return a
    elif op == "sub" and _is_const(b, 0.0):
        return a
    elif op == "mul":
        if _is_const(a, 1.0):
            return b
        if _is_const(b, 1.0):
            return a
    elif op == "div" and _is_const(b, 1.0):
        return a
    elif op == "pow" and _is_const(b, 1.0):
        return a
    return Expr(op, max(a.n, b.n), children=(a, b))


def _is_const(e: Expr, v: float) -> bool:
    return e.kind == "const" and e.value == v


def concat(*parts: ExprLike) -> Expr:
    flat = [as_expr(p) for p in parts]
    if not flat:
        raise ExprError("concat needs at least one operand")
    if len(flat) == 1:
        return flat[0]
    return Expr("concat", sum(p.n for p in flat), children=tuple(flat))


def index_range(child: ExprLike, lo: int, hi: int) -> Expr:
    child = as_expr(child)
    if not (0 <= lo < hi <= child.n):
        raise ExprError(f"index range [{lo}, {hi}) out of bounds for length {child.n}")
    if lo == 0 and hi == child.n:
        return child
    # Slicing a concat of the exact part keeps graphs lean after assembly.
    if child.kind == "concat":
        off = 0
        for part in child.children:
            if off == lo and off + part.n == hi:
                return part
            off += part.n
    if child.kind == "slice":
        return index_range(child.children[0], child.lo + lo, child.lo + hi)
    return Expr("slice", hi - lo, children=(child,), lo=lo, hi=hi)


def sin(e: ExprLike) -> Expr:
    return unary("sin", e)


def cos(e: ExprLike) -> Expr:
    return unary("cos", e)


def tan(e: ExprLike) -> Expr:
    return unary("tan", e)


def exp(e: ExprLike) -> Expr:
    return unary("exp", e)


def log(e: ExprLike) -> Expr:
    return unary("log", e)


def sqrt(e: ExprLike) -> Expr:
    return unary("sqrt", e)


def zeros(n: int) -> Expr:
    z = const(0.0)
    return z if n == 1 else concat(*([z] * n))


def from_vector(values: Sequence[Number]) -> Expr:
    vals = list(values)
    if not vals:
        raise ExprError("empty vector")
    return concat(*[const(v) for v in vals])


def sum_entries(e: ExprLike) -> Expr:
    e = as_expr(e)
    if e.n == 1:
        return e
    acc = e[0]
    for i in range(1, e.n):
        acc = acc + e[i]
    return acc


def topo_order(roots: Iterable[Expr]) -> list[Expr]:
    """Children-before-parents order, deterministic for a fixed graph."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in reversed(node.children):
            if id(child) not in seen:
                stack.append((child, False))
    return order


def symbols_in(roots: Iterable[Expr]) -> list[Expr]:
    return [node for node in topo_order(roots) if node.kind == "sym"]


def referenced_entries(roots: Iterable[Expr], target: Expr) -> set[int]:
    """Which entries of symbol `target` the expressions can read.

    Exact at slice granularity: a `target[lo:hi]` access contributes that
    range, any other direct use of `target` contributes every entry.
    """
    out: set[int] = set()
    for node in topo_order(roots):
        if node is target:
            continue
        for child in node.children:
            if child is target:
                if node.kind == "slice":
                    out.update(range(node.lo, node.hi))
                else:
                    out.update(range(target.n))
    # A root that IS the target reads everything.
    for r in roots:
        if r is target:
            out.update(range(target.n))
    return out


# ---------------------------------------------------------------------------
# FunctionDef and evaluation
# ---------------------------------------------------------------------------

_UNARY_FN = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
}

_BINARY_FN = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
}


class FunctionDef:
    """A named, closed function: ordered input symbols -> output expressions."""

    __slots__ = ("name", "inputs", "outputs", "_tape")

    def __init__(self, name: str, inputs: Sequence[Expr], outputs: Sequence[Expr]):
        if not name or not re.match(r"[A-Za-z_][A-Za-z0-9_.]*\Z", name):
            raise ExprError(f"invalid function name {name!r}")
        inputs = tuple(inputs)
        outputs = tuple(as_expr(o) for o in outputs)
        names = set()
        for s in inputs:
            if s.kind != "sym":
                raise ExprError("function inputs must be symbol nodes")
            if s.name in names:
                raise ExprError(f"duplicate input name {s.name!r}")
            names.add(s.name)
        bound = {id(s) for s in inputs}
        for node in symbols_in(outputs):
            if id(node) not in bound:
                raise ExprError(
                    f"free symbol {node.name!r} does not appear in the input list"
                )
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "_tape", None)

    def __setattr__(self, key, value):
        raise AttributeError("FunctionDef is immutable")

    @property
    def n_in(self) -> int:
        return len(self.inputs)

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    def input_sizes(self) -> tuple[int, ...]:
        return tuple(s.n for s in self.inputs)

    def output_sizes(self) -> tuple[int, ...]:
        return tuple(o.n for o in self.outputs)

    def tape(self) -> "Tape":
        tape = self._tape
        if tape is None:
            tape = Tape(self.inputs, self.outputs)
            object.__setattr__(self, "_tape", tape)
        return tape

    def __call__(self, *args: np.ndarray) -> list[np.ndarray]:
        return self.tape().run(args)

    def apply(self, args: Sequence[ExprLike]) -> list[Expr]:
        """Symbolic call: splice argument expressions in place of the inputs."""
        if len(args) != len(self.inputs):
            raise ExprError(
                f"{self.name} expects {len(self.inputs)} inputs, got {len(args)}"
            )
        bindings = {s: as_expr(a) for s, a in zip(self.inputs, args)}
        return [substitute(o, bindings) for o in self.outputs]


class Tape:
    """Flat evaluation program for a set of output expressions.

    Inputs may be 1-D arrays of the declared length, or 2-D `(length, k)`
    batches; every op is elementwise over the trailing axis, so both shapes
    run through the same program.
    """

    __slots__ = ("ops", "n_slots", "input_slots", "output_slots", "init")

    def __init__(self, inputs: Sequence[Expr], outputs: Sequence[Expr]):
        order = topo_order(outputs)
        slot_of: dict[int, int] = {}
        init: list[tuple[int, np.ndarray]] = []
        ops: list[tuple] = []
        input_ids = {id(s): i for i, s in enumerate(inputs)}
        for node in order:
            idx = len(slot_of)
            slot_of[id(node)] = idx
            kind = node.kind
            if kind == "const":
                arr = np.array([node.value], dtype=float)
                arr.flags.writeable = False
                init.append((idx, arr))
            elif kind == "sym":
                if id(node) not in input_ids:
                    raise ExprError(f"free symbol {node.name!r} in tape")
                ops.append(("in", idx, input_ids[id(node)], None))
            elif kind in _UNARY_FN:
                ops.append(("u", idx, slot_of[id(node.children[0])], _UNARY_FN[kind]))
            elif kind in _BINARY_FN:
                a, b = node.children
                ops.append(
                    ("b", idx, (slot_of[id(a)], slot_of[id(b)]), _BINARY_FN[kind])
                )
            elif kind == "concat":
                ops.append(
                    ("c", idx, tuple(slot_of[id(c)] for c in node.children), None)
                )
            elif kind == "slice":
                ops.append(
                    ("s", idx, slot_of[id(node.children[0])], (node.lo, node.hi))
                )
            else:  # pragma: no cover - constructors reject unknown kinds
                raise ExprError(f"unknown node kind {kind!r}")
        self.ops = ops
        self.n_slots = len(slot_of)
        self.input_slots = [(slot_of.get(id(s)), s.n) for s in inputs]
        self.output_slots = [slot_of[id(o)] for o in outputs]
        self.init = init

    def run(self, args: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(args) != len(self.input_slots):
            raise ExprError(
                f"expected {len(self.input_slots)} inputs, got {len(args)}"
            )
        slots: list = [None] * self.n_slots
        for idx, arr in self.init:
            slots[idx] = arr
        prepared = []
        for (slot, n), arg in zip(self.input_slots, args):
            arr = np.asarray(arg, dtype=float)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            if arr.shape[0] != n:
                raise ExprError(f"input length mismatch: expected {n}, got {arr.shape[0]}")
            prepared.append(arr)
        with np.errstate(all="ignore"):
            for code, dst, src, aux in self.ops:
                if code == "b":
                    a, b = slots[src[0]], slots[src[1]]
                    if a.ndim != b.ndim:
                        # Align a plain vector against batched columns.
                        if a.ndim == 1:
                            a = a[:, None]
                        else:
                            b = b[:, None]
                    slots[dst] = aux(a, b)
                elif code == "u":
                    slots[dst] = aux(slots[src])
                elif code == "in":
                    slots[dst] = prepared[src]
                elif code == "c":
                    parts = [slots[s] for s in src]
                    width = max(p.ndim for p in parts)
                    if width == 2:
                        k = next(p.shape[1] for p in parts if p.ndim == 2)
                        parts = [
                            p if p.ndim == 2 else np.broadcast_to(p[:, None], (p.shape[0], k))
                            for p in parts
                        ]
                    slots[dst] = np.concatenate(parts, axis=0)
                else:  # "s"
                    slots[dst] = slots[src][aux[0] : aux[1]]
        return [np.array(slots[slot], dtype=float, copy=True) for slot in self.output_slots]


def feval(f: FunctionDef, inputs: Sequence[Sequence[Number]]) -> list[np.ndarray]:
    """Evaluate `f` at one point; deterministic, IEEE Inf/NaN propagate."""
    results = f(*[np.asarray(v, dtype=float).reshape(-1) for v in inputs])
    fixed = []
    for arr, o in zip(results, f.outputs):
        if arr.shape[0] != o.n:
            arr = np.broadcast_to(arr, (o.n,)).copy()
        fixed.append(arr)
    return fixed


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------


def substitute(e: ExprLike, bindings: Mapping) -> Expr:
    """Replace symbol nodes in `e`.

    Keys may be symbol `Expr` nodes (matched by identity) or symbol names
    (matching every symbol with that name).  Values are coerced to
    expressions; replacement length must equal the symbol length.
    """
    e = as_expr(e)
    by_id: dict[int, Expr] = {}
    by_name: dict[str, Expr] = {}
    for key, val in bindings.items():
        repl = val if isinstance(val, Expr) else _coerce_vector(val)
        if isinstance(key, Expr):
            if key.kind != "sym":
                raise ExprError("binding keys must be symbols")
            if repl.n != key.n:
                raise ExprError(
                    f"replacement for {key.name!r} has length {repl.n}, expected {key.n}"
                )
            by_id[id(key)] = repl
        else:
            by_name[str(key)] = repl
    memo: dict[int, Expr] = {}
    for node in topo_order([e]):
        if node.kind == "sym":
            repl = by_id.get(id(node))
            if repl is None and node.name in by_name:
                repl = by_name[node.name]
                if repl.n != node.n:
                    raise ExprError(
                        f"replacement for {node.name!r} has length {repl.n}, expected {node.n}"
                    )
            memo[id(node)] = repl if repl is not None else node
        elif node.kind in ("const",):
            memo[id(node)] = node
        else:
            kids = tuple(memo[id(c)] for c in node.children)
            if all(k is c for k, c in zip(kids, node.children)):
                memo[id(node)] = node
            elif node.kind == "concat":
                memo[id(node)] = concat(*kids)
            elif node.kind == "slice":
                memo[id(node)] = index_range(kids[0], node.lo, node.hi)
            elif node.kind in UNARY_OPS:
                memo[id(node)] = unary(node.kind, kids[0])
            else:
                memo[id(node)] = binary(node.kind, kids[0], kids[1])
    return memo[id(e)]


def _coerce_vector(value) -> Expr:
    if isinstance(value, (int, float, np.floating, np.integer)):
        return const(float(value))
    arr = np.asarray(value, dtype=float).reshape(-1)
    return from_vector(arr.tolist())


# ---------------------------------------------------------------------------
# Algorithmic differentiation
# ---------------------------------------------------------------------------


def _local_partials(node: Expr):
    """Factories building d(node)/d(child_i) * seed terms; one per child."""
    kind = node.kind
    a = node.children[0]
    if kind == "neg":
        return (lambda d: -d,)
    if kind == "sin":
        f = cos(a)
        return (lambda d: f * d,)
    if kind == "cos":
        f = sin(a)
        return (lambda d: -(f * d),)
    if kind == "tan":
        c2 = cos(a) * cos(a)
        return (lambda d: d / c2,)
    if kind == "exp":
        return (lambda d: node * d,)
    if kind == "log":
        return (lambda d: d / a,)
    if kind == "sqrt":
        two_sqrt = const(2.0) * node
        return (lambda d: d / two_sqrt,)
    b = node.children[1]
    if kind == "add":
        return (lambda d: d, lambda d: d)
    if kind == "sub":
        return (lambda d: d, lambda d: -d)
    if kind == "mul":
        return (lambda d: d * b, lambda d: a * d)
    if kind == "div":
        return (lambda d: d / b, lambda d: -((node * d) / b))
    if kind == "pow":
        fa = b * binary("pow", a, b - const(1.0))
        return (lambda d: fa * d, lambda d: (log(a) * node) * d)
    raise ExprError(f"node kind {kind!r} has no local partials")  # pragma: no cover


def _reduce_to(term: Expr, n: int) -> Expr:
    """Sum a broadcast derivative term back down to a scalar operand."""
    if term.n == n:
        return term
    if n != 1:
        raise ExprError("cannot reduce derivative term")  # pragma: no cover
    return sum_entries(term)


def _forward_column(outputs: Sequence[Expr], wrt: Expr, j: int, order, partials):
    """d(outputs)/d(wrt[j]) by forward sweep; None marks structural zero."""
    der: dict[int, Expr | None] = {}
    for node in order:
        kind = node.kind
        if kind == "const":
            der[id(node)] = None
        elif kind == "sym":
            if node is wrt:
                seed = [const(0.0)] * node.n
                seed[j] = const(1.0)
                der[id(node)] = concat(*seed) if node.n > 1 else seed[j]
            else:
                der[id(node)] = None
        elif kind == "concat":
            kids = [der[id(c)] for c in node.children]
            if all(k is None for k in kids):
                der[id(node)] = None
            else:
                parts = [
                    k if k is not None else zeros(c.n)
                    for k, c in zip(kids, node.children)
                ]
                der[id(node)] = concat(*parts)
        elif kind == "slice":
            d = der[id(node.children[0])]
            der[id(node)] = None if d is None else index_range(d, node.lo, node.hi)
        else:
            terms = []
            for child, rule in zip(node.children, partials[id(node)]):
                d = der[id(child)]
                if d is not None:
                    terms.append(rule(d))
            if not terms:
                der[id(node)] = None
            else:
                acc = terms[0]
                for t in terms[1:]:
                    acc = acc + t
                der[id(node)] = acc
    return [der[id(o)] for o in outputs]


def _reverse_gradient(output: Expr, i: int, wrt_syms: Sequence[Expr], order, partials):
    """d(output[i])/d(sym) for each requested symbol via one adjoint sweep."""
    bar: dict[int, Expr] = {}
    if output.n == 1:
        bar[id(output)] = const(1.0)
    else:
        seed = [const(0.0)] * output.n
        seed[i] = const(1.0)
        bar[id(output)] = concat(*seed)
    for node in reversed(order):
        b = bar.get(id(node))
        if b is None or node.kind in ("const", "sym"):
            continue
        if node.kind == "concat":
            off = 0
            for child in node.children:
                part = index_range(b, off, off + child.n) if node.n > 1 else b
                _accumulate(bar, child, part)
                off += child.n
        elif node.kind == "slice":
            child = node.children[0]
            parts = []
            if node.lo > 0:
                parts.append(zeros(node.lo))
            parts.append(b)
            if node.hi < child.n:
                parts.append(zeros(child.n - node.hi))
            _accumulate(bar, child, concat(*parts))
        else:
            for child, rule in zip(node.children, partials[id(node)]):
                _accumulate(bar, child, _reduce_to(rule(b), child.n))
    return [bar.get(id(s)) for s in wrt_syms]


def _accumulate(bar: dict, node: Expr, term: Expr):
    prev = bar.get(id(node))
    bar[id(node)] = term if prev is None else prev + term


def _build_partials(order) -> dict[int, tuple]:
    table = {}
    for node in order:
        if node.kind not in ("const", "sym", "concat", "slice"):
            table[id(node)] = _local_partials(node)
    return table


def jacobian_expr(output: Expr, wrt: Expr, mode: str | None = None) -> Expr:
    """Dense Jacobian of `output` w.r.t. symbol `wrt`, row-major, as one Expr.

    Mode "reverse" builds one adjoint sweep per output entry, "forward" one
    tangent sweep per input entry; `None` picks reverse when the output is
    no longer than the input (cheaper for gradients), forward otherwise.
    """
    output = as_expr(output)
    if wrt.kind != "sym":
        raise ExprError("jacobian is taken w.r.t. a symbol")
    n_out, n_in = output.n, wrt.n
    if mode is None:
        mode = "reverse" if n_out <= n_in else "forward"
    order = topo_order([output])
    partials = _build_partials(order)
    entries: list[Expr] = []
    if mode == "forward":
        cols = [
            _forward_column([output], wrt, j, order, partials)[0] for j in range(n_in)
        ]
        for i in range(n_out):
            for j in range(n_in):
                col = cols[j]
                entries.append(const(0.0) if col is None else col[i])
    elif mode == "reverse":
        for i in range(n_out):
            row = _reverse_gradient(output, i, [wrt], order, partials)[0]
            if row is None:
                entries.extend([const(0.0)] * n_in)
            elif n_in == 1:
                entries.append(row)
            else:
                entries.extend(row[j] for j in range(n_in))
    else:
        raise ExprError(f"unknown AD mode {mode!r}")
    return concat(*entries) if len(entries) > 1 else entries[0]


def gradient_exprs(scalar: Expr, wrt_syms: Sequence[Expr]) -> list[Expr]:
    """Reverse-mode gradient of a scalar w.r.t. several symbols at once."""
    scalar = as_expr(scalar)
    if scalar.n != 1:
        raise ExprError("gradient needs a scalar expression")
    order = topo_order([scalar])
    partials = _build_partials(order)
    grads = _reverse_gradient(scalar, 0, wrt_syms, order, partials)
    return [g if g is not None else zeros(s.n) for g, s in zip(grads, wrt_syms)]


def jacobian(f: FunctionDef, output_index: int = 0, input_index: int = 0,
             mode: str | None = None) -> FunctionDef:
    """Function computing the dense Jacobian d out[output_index] / d in[input_index].

    The result keeps the same inputs and returns one row-major vector of
    length n_out * n_in.
    """
    if not (0 <= output_index < f.n_out):
        raise ExprError(f"output index {output_index} out of range")
    if not (0 <= input_index < f.n_in):
        raise ExprError(f"input index {input_index} out of range")
    jac = jacobian_expr(f.outputs[output_index], f.inputs[input_index], mode=mode)
    return FunctionDef(f"{f.name}_jac", f.inputs, [jac])


def hessian(f: FunctionDef, input_index: int = 0, output_index: int = 0) -> FunctionDef:
    """Dense symmetric Hessian of a scalar output w.r.t. one input.

    Only the lower triangle is differentiated; mirrored entries share the
    same node, so symmetry is bitwise.
    """
    if not (0 <= output_index < f.n_out):
        raise ExprError(f"output index {output_index} out of range")
    out = f.outputs[output_index]
    if out.n != 1:
        raise ExprError("hessian needs a scalar output")
    if not (0 <= input_index < f.n_in):
        raise ExprError(f"input index {input_index} out of range")
    x = f.inputs[input_index]
    n = x.n
    grad = gradient_exprs(out, [x])[0]
    order = topo_order([grad])
    partials = _build_partials(order)
    cols = [_forward_column([grad], x, j, order, partials)[0] for j in range(n)]
    entry = {}
    for j in range(n):
        col = cols[j]
        for i in range(j, n):
            entry[(i, j)] = const(0.0) if col is None else col[i]
    flat = []
    for i in range(n):
        for j in range(n):
            flat.append(entry[(i, j)] if j <= i else entry[(j, i)])
    return FunctionDef(f"{f.name}_hess", f.inputs, [concat(*flat) if n > 1 else flat[0]])


# ---------------------------------------------------------------------------
# Serialization (.fns text format)
# ---------------------------------------------------------------------------


def _format_const(v: float) -> str:
    return repr(float(v))


def serialize(f: FunctionDef) -> str:
    """Render a function in the line-oriented `.fns` v1 text format."""
    lines = [f"fnser v1 {f.name}"]
    for s in f.inputs:
        lines.append(f"in {s.name} {s.n}")
    input_ids = {id(s): i for i, s in enumerate(f.inputs)}
    ids: dict[int, int] = {}
    for node in topo_order(f.outputs):
        k = len(ids)
        ids[id(node)] = k
        kind = node.kind
        if kind == "const":
            lines.append(f"n{k} const {_format_const(node.value)}")
        elif kind == "sym":
            lines.append(f"n{k} input {input_ids[id(node)]}")
        elif kind in UNARY_OPS:
            lines.append(f"n{k} {kind} n{ids[id(node.children[0])]}")
        elif kind in BINARY_OPS:
            a, b = node.children
            lines.append(f"n{k} {kind} n{ids[id(a)]} n{ids[id(b)]}")
        elif kind == "concat":
            refs = " ".join(f"n{ids[id(c)]}" for c in node.children)
            lines.append(f"n{k} concat {refs}")
        else:  # slice
            lines.append(f"n{k} slice n{ids[id(node.children[0])]} {node.lo} {node.hi}")
    for o in f.outputs:
        lines.append(f"out n{ids[id(o)]}")
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> FunctionDef:
    """Parse `.fns` text back into a FunctionDef; raises SerializationError."""
    lines = text.splitlines()
    if not lines:
        raise SerializationError("empty input", 1)
    header = lines[0].split()
    if len(header) != 3 or header[0] != "fnser" or header[1] != "v1":
        raise SerializationError("expected header 'fnser v1 <name>'", 1)
    name = header[2]
    inputs: list[Expr] = []
    nodes: dict[int, Expr] = {}
    outputs: list[Expr] = []
    stage = "in"
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "in":
            if stage != "in":
                raise SerializationError("'in' line after node lines", lineno)
            if len(parts) != 3:
                raise SerializationError("expected 'in <name> <len>'", lineno)
            try:
                inputs.append(sym(parts[1], int(parts[2])))
            except (ExprError, ValueError) as exc:
                raise SerializationError(str(exc), lineno) from exc
        elif tag == "out":
            stage = "out"
            if len(parts) != 2:
                raise SerializationError("expected 'out n<k>'", lineno)
            outputs.append(_node_ref(parts[1], nodes, lineno))
        elif tag.startswith("n"):
            if stage == "out":
                raise SerializationError("node line after outputs", lineno)
            stage = "node"
            try:
                k = int(tag[1:])
            except ValueError:
                raise SerializationError(f"bad node id {tag!r}", lineno) from None
            if k in nodes:
                raise SerializationError(f"duplicate node id n{k}", lineno)
            if len(parts) < 2:
                raise SerializationError("missing opcode", lineno)
            nodes[k] = _parse_node(parts[1], parts[2:], inputs, nodes, lineno)
        else:
            raise SerializationError(f"unrecognized line {raw!r}", lineno)
    if not outputs:
        raise SerializationError("no outputs declared", len(lines))
    try:
        return FunctionDef(name, inputs, outputs)
    except ExprError as exc:
        raise SerializationError(str(exc), len(lines)) from exc


def _node_ref(token: str, nodes: dict[int, Expr], lineno: int) -> Expr:
    if not token.startswith("n"):
        raise SerializationError(f"expected node reference, got {token!r}", lineno)
    try:
        k = int(token[1:])
    except ValueError:
        raise SerializationError(f"bad node reference {token!r}", lineno) from None
    if k not in nodes:
        raise SerializationError(f"reference to undefined node n{k}", lineno)
    return nodes[k]


def _parse_node(op, args, inputs, nodes, lineno) -> Expr:
    try:
        if op == "const":
            if len(args) != 1:
                raise SerializationError("const takes one value", lineno)
            return const(float(args[0]))
        if op == "input":
            idx = int(args[0])
            if not (0 <= idx < len(inputs)):
                raise SerializationError(f"input index {idx} out of range", lineno)
            return inputs[idx]
        if op in UNARY_OPS:
            if len(args) != 1:
                raise SerializationError(f"{op} takes one operand", lineno)
            child = _node_ref(args[0], nodes, lineno)
            return Expr(op, child.n, children=(child,))
        if op in BINARY_OPS:
            if len(args) != 2:
                raise SerializationError(f"{op} takes two operands", lineno)
            a = _node_ref(args[0], nodes, lineno)
            b = _node_ref(args[1], nodes, lineno)
            if a.n != b.n and a.n != 1 and b.n != 1:
                raise SerializationError(
                    f"length mismatch in {op}: {a.n} vs {b.n}", lineno)
            return Expr(op, max(a.n, b.n), children=(a, b))
        if op == "concat":
            kids = tuple(_node_ref(t, nodes, lineno) for t in args)
            if not kids:
                raise SerializationError("concat needs operands", lineno)
            return Expr("concat", sum(c.n for c in kids), children=kids)
        if op == "slice":
            child = _node_ref(args[0], nodes, lineno)
            lo, hi = int(args[1]), int(args[2])
            if not (0 <= lo < hi <= child.n):
                raise SerializationError(
                    f"slice [{lo}, {hi}) out of bounds for length {child.n}", lineno)
            return Expr("slice", hi - lo, children=(child,), lo=lo, hi=hi)
    except SerializationError:
        raise
    except (ValueError, IndexError) as exc:
        raise SerializationError(str(exc), lineno) from exc
    raise SerializationError(f"unknown opcode {op!r}", lineno)
