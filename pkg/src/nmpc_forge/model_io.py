"""YAML system-model files and the shared infix expression grammar.

A model file declares differential states, controls, optional algebraic
states, inline constants, and equations.  Equations are either inline
expression text per state, or a reference to an external serialized function
(`.fns`).  `parse_model` validates the document into a `ModelSpec`;
`bind` turns the spec into symbolic right-hand sides over freshly created
state/control/algebraic vectors.

The expression grammar here is also used by problem and scenario files:
infix `+ - * / ^`, calls of `sin cos tan exp log sqrt`, parentheses,
identifiers (optionally dotted), and `name[k]` component indexing.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import yaml

from . import expr as ex

MATH_FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")

EXTERNAL_TYPE_TAG = "serialized_function"


class ModelError(ValueError):
    """Invalid model document or unbindable equations."""


class ExpressionSyntaxError(ModelError):
    """Bad expression text; message carries the source column."""

    def __init__(self, message: str, pos: int | None = None, text: str | None = None):
        self.pos = pos
        if pos is not None:
            message = f"col {pos + 1}: {message}"
        if text is not None:
            message = f"{message} (in {text!r})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Expression text parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)"
    r"|(?P<op><=|>=|==|[-+*/^()\[\],]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            tail = text[pos:].lstrip()
            if not tail:
                break
            raise ExpressionSyntaxError(f"unexpected character {tail[0]!r}", pos, text)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


Resolver = Callable[[str], Optional[object]]


class _Parser:
    def __init__(self, text: str, resolver: Resolver, functions: Mapping | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.k = 0
        self.resolver = resolver
        self.functions = dict(functions or {})

    def peek(self):
        return self.tokens[self.k]

    def next(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ExpressionSyntaxError(f"expected {op!r}", pos, self.text)

    def fail(self, message: str):
        raise ExpressionSyntaxError(message, self.peek()[2], self.text)

    # expr := add ; add := mul (('+'|'-') mul)*
    def parse_add(self):
        node = self.parse_mul()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.parse_mul()
                node = node + rhs if val == "+" else node - rhs
            else:
                return node

    def parse_mul(self):
        node = self.parse_unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.parse_unary()
                node = node * rhs if val == "*" else node / rhs
            else:
                return node

    def parse_unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return -self.parse_unary()
        if kind == "op" and val == "+":
            self.next()
            return self.parse_unary()
        return self.parse_power()

    def parse_power(self):
        base = self.parse_primary()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.next()
            return base ** self.parse_unary()
        return base

    def parse_primary(self):
        kind, val, pos = self.next()
        if kind == "num":
            return ex.const(float(val))
        if kind == "op" and val == "(":
            inner = self.parse_add()
            self.expect_op(")")
            return inner
        if kind == "name":
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "(":
                self.next()
                arg = self.parse_add()
                self.expect_op(")")
                return self.call(val, arg, pos)
            node = self.lookup(val, pos)
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "[":
                self.next()
                ik, iv, ipos = self.next()
                if ik != "num" or not iv.isdigit():
                    raise ExpressionSyntaxError("expected integer index", ipos, self.text)
                self.expect_op("]")
                idx = int(iv)
                if not isinstance(node, ex.Expr):
                    raise ExpressionSyntaxError(
                        f"{val!r} cannot be indexed", pos, self.text)
                if idx >= node.n:
                    raise ExpressionSyntaxError(
                        f"index {idx} out of range for {val!r} (length {node.n})",
                        pos, self.text)
                return node[idx]
            return node
        raise ExpressionSyntaxError("expected a value", pos, self.text)

    def call(self, name: str, arg, pos: int):
        if name in MATH_FUNCTIONS:
            if not isinstance(arg, ex.Expr):
                raise ExpressionSyntaxError(
                    f"{name}() needs a plain expression argument", pos, self.text)
            return ex.unary(name, arg)
        if name in self.functions:
            return self.functions[name](arg)
        raise ExpressionSyntaxError(f"unknown function {name!r}", pos, self.text)

    def lookup(self, name: str, pos: int):
        value = self.resolver(name)
        if value is None:
            raise ExpressionSyntaxError(f"undeclared name {name!r}", pos, self.text)
        return value


def parse_expression(text: str, resolver: Resolver,
                     functions: Mapping | None = None):
    """Parse infix expression text; names are resolved through `resolver`."""
    p = _Parser(text, resolver, functions)
    node = p.parse_add()
    if p.peek()[0] != "end":
        p.fail("trailing input")
    return node


@dataclass
class EqRelation:
    lhs: object
    rhs: object


@dataclass
class IneqRelation:
    lower: object | None
    expr: object
    upper: object | None


def parse_relation(text: str, resolver: Resolver,
                   functions: Mapping | None = None):
    """Parse `a == b`, `a <= b`, `a >= b` or the two-sided `a <= b <= c`."""
    p = _Parser(text, resolver, functions)
    first = p.parse_add()
    kind, op, pos = p.next()
    if kind != "op" or op not in ("<=", ">=", "=="):
        raise ExpressionSyntaxError("expected a comparison operator", pos, text)
    second = p.parse_add()
    kind, op2, pos2 = p.peek()
    if op == "==":
        if kind != "end":
            p.fail("trailing input after equality")
        return EqRelation(first, second)
    if kind == "op" and op2 in ("<=", ">="):
        p.next()
        if op2 != op:
            raise ExpressionSyntaxError(
                "two-sided constraints must chain the same direction", pos2, text)
        third = p.parse_add()
        if p.peek()[0] != "end":
            p.fail("trailing input")
        if op == "<=":
            return IneqRelation(first, second, third)
        return IneqRelation(third, second, first)
    if kind != "end":
        p.fail("trailing input")
    if op == "<=":
        return IneqRelation(None, first, second)
    return IneqRelation(second, first, None)


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------

_KNOWN_TOP_KEYS = {
    "name",
    "equations",
    "differential_states",
    "algebraic_states",
    "controls",
    "constants",
}


@dataclass
class InlineEquations:
    ode: dict[str, str]
    alg: list[str] = field(default_factory=list)


@dataclass
class ExternalEquations:
    type: str
    file_name: str


@dataclass
class ModelSpec:
    name: str
    differential_states: list[str]
    controls: list[str]
    algebraic_states: list[str]
    constants: dict[str, float]
    equations: Union[InlineEquations, ExternalEquations]

    @property
    def n_x(self) -> int:
        return len(self.differential_states)

    @property
    def n_u(self) -> int:
        return len(self.controls)

    @property
    def n_z(self) -> int:
        return len(self.algebraic_states)


@dataclass
class BoundModel:
    """Equations bound to concrete state/control/algebraic symbol vectors."""

    name: str
    x: ex.Expr
    u: ex.Expr | None
    z: ex.Expr | None
    rhs: ex.Expr
    alg: ex.Expr | None
    components: dict[str, tuple[str, int]]  # name -> (vector kind, offset)
    state_names: list[str]
    control_names: list[str]
    algebraic_names: list[str]

    @property
    def n_x(self) -> int:
        return self.x.n

    @property
    def n_u(self) -> int:
        return 0 if self.u is None else self.u.n

    @property
    def n_z(self) -> int:
        return 0 if self.z is None else self.z.n


def _name_list(raw, key: str) -> list[str]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        raise ModelError(f"'{key}' must be a list of {{name: ...}} entries")
    names = []
    for item in raw:
        if not isinstance(item, dict) or "name" not in item:
            raise ModelError(f"every '{key}' entry needs a 'name' field")
        names.append(str(item["name"]))
    return names


def parse_model(text: str, name: str = "") -> ModelSpec:
    """Validate a YAML model document into a ModelSpec."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelError(f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("model document must be a YAML mapping")
    for key in doc:
        if key not in _KNOWN_TOP_KEYS:
            warnings.warn(f"ignoring unknown model key {key!r}", stacklevel=2)

    states = _name_list(doc.get("differential_states"), "differential_states")
    controls = _name_list(doc.get("controls"), "controls")
    algebraics = _name_list(doc.get("algebraic_states"), "algebraic_states")
    if not states:
        raise ModelError("model declares no differential_states")

    constants: dict[str, float] = {}
    raw_const = doc.get("constants")
    if raw_const is not None:
        if not isinstance(raw_const, dict) or set(raw_const) - {"inline"}:
            raise ModelError("'constants' must hold an 'inline' mapping")
        inline = raw_const.get("inline") or {}
        if not isinstance(inline, dict):
            raise ModelError("'constants: inline' must be a mapping")
        for cname, cval in inline.items():
            try:
                constants[str(cname)] = float(cval)
            except (TypeError, ValueError):
                raise ModelError(f"constant {cname!r} is not a number") from None

    seen: set[str] = set()
    for group in (states, controls, algebraics, constants):
        for n in group:
            if n in seen:
                raise ModelError(f"duplicate name {n!r}")
            seen.add(n)

    raw_eq = doc.get("equations")
    if raw_eq is None:
        raise ModelError("missing equations")
    if not isinstance(raw_eq, dict) or not (set(raw_eq) <= {"inline", "external"}):
        raise ModelError("'equations' must hold 'inline' or 'external'")
    if "inline" in raw_eq and "external" in raw_eq:
        raise ModelError("'equations' cannot be both inline and external")

    if "inline" in raw_eq:
        inline = raw_eq["inline"] or {}
        ode = inline.get("ode")
        if not isinstance(ode, dict):
            raise ModelError("inline equations need an 'ode' mapping")
        ode = {str(k): str(v) for k, v in ode.items()}
        for s in states:
            if s not in ode:
                raise ModelError(f"differential state {s!r} has no ODE entry")
        for k in ode:
            if k not in states:
                raise ModelError(f"ODE entry for undeclared state {k!r}")
        alg = inline.get("alg") or []
        if not isinstance(alg, list):
            raise ModelError("'alg' must be a list of expressions")
        alg = [str(a) for a in alg]
        if len(alg) != len(algebraics):
            raise ModelError(
                f"{len(algebraics)} algebraic states but {len(alg)} 'alg' residuals")
        equations: Union[InlineEquations, ExternalEquations] = InlineEquations(ode, alg)
    else:
        external = raw_eq["external"] or {}
        if "file_name" not in external:
            raise ModelError("external equations need a 'file_name'")
        etype = str(external.get("type", ""))
        if etype != EXTERNAL_TYPE_TAG:
            raise ModelError(
                f"unsupported external equation type {etype!r} "
                f"(expected {EXTERNAL_TYPE_TAG!r})")
        equations = ExternalEquations(etype, str(external["file_name"]))

    return ModelSpec(
        name=str(doc.get("name", name or "")),
        differential_states=states,
        controls=controls,
        algebraic_states=algebraics,
        constants=constants,
        equations=equations,
    )


def load_model(path: str | Path, name: str = "") -> ModelSpec:
    path = Path(path)
    spec = parse_model(path.read_text(), name=name or path.stem)
    return spec


def bind(spec: ModelSpec, base_dir: str | Path | None = None,
         file_resolver: Callable[[str], str] | None = None) -> BoundModel:
    """Bind a ModelSpec to fresh x/u/z symbols, folding constants in.

    `file_resolver` maps an external file name to its text; by default files
    resolve relative to `base_dir`.
    """
    n_x, n_u, n_z = spec.n_x, spec.n_u, spec.n_z
    x = ex.sym("x", n_x)
    u = ex.sym("u", n_u) if n_u else None
    z = ex.sym("z", n_z) if n_z else None

    components: dict[str, tuple[str, int]] = {}
    scope: dict[str, ex.Expr] = {}
    for i, s in enumerate(spec.differential_states):
        scope[s] = x[i]
        components[s] = ("x", i)
    for j, c in enumerate(spec.controls):
        scope[c] = u[j]
        components[c] = ("u", j)
    for k, a in enumerate(spec.algebraic_states):
        scope[a] = z[k]
        components[a] = ("z", k)
    for cname, cval in spec.constants.items():
        scope[cname] = ex.const(cval)

    if isinstance(spec.equations, InlineEquations):
        rows = []
        for s in spec.differential_states:
            text = spec.equations.ode[s]
            try:
                rows.append(parse_expression(text, scope.get))
            except ExpressionSyntaxError as exc:
                raise ModelError(f"ODE for {s!r}: {exc}") from exc
        rhs = ex.concat(*rows)
        alg_rows = []
        for i, text in enumerate(spec.equations.alg):
            try:
                alg_rows.append(parse_expression(text, scope.get))
            except ExpressionSyntaxError as exc:
                raise ModelError(f"algebraic residual {i}: {exc}") from exc
        alg = ex.concat(*alg_rows) if alg_rows else None
    else:
        file_name = spec.equations.file_name
        if file_resolver is not None:
            text = file_resolver(file_name)
        else:
            base = Path(base_dir) if base_dir is not None else Path(".")
            full = base / file_name
            if not full.exists():
                raise ModelError(f"external equation file not found: {full}")
            text = full.read_text()
        try:
            fn = ex.deserialize(text)
        except ex.SerializationError as exc:
            raise ModelError(f"cannot parse {file_name}: {exc}") from exc
        expected_in = [n_x] + ([n_u] if n_u else []) + ([n_z] if n_z else [])
        got_in = list(fn.input_sizes())
        expected_out = [n_x] + ([n_z] if n_z else [])
        got_out = list(fn.output_sizes())
        if got_in != expected_in or got_out != expected_out:
            raise ModelError(
                f"external function signature mismatch: inputs {got_in} outputs "
                f"{got_out}, expected inputs {expected_in} outputs {expected_out}")
        args = [x] + ([u] if n_u else []) + ([z] if n_z else [])
        outs = fn.apply(args)
        rhs = outs[0]
        alg = outs[1] if n_z else None

    if rhs.n != n_x:
        raise ModelError(f"right-hand side has length {rhs.n}, expected {n_x}")

    return BoundModel(
        name=spec.name or "model",
        x=x,
        u=u,
        z=z,
        rhs=rhs,
        alg=alg,
        components=components,
        state_names=list(spec.differential_states),
        control_names=list(spec.controls),
        algebraic_names=list(spec.algebraic_states),
    )


def emit(spec: ModelSpec) -> str:
    """Canonical YAML writer; emit -> parse_model is the identity."""
    lines: list[str] = []
    if spec.name:
        lines.append(f"name: {spec.name}")
    lines.append("equations:")
    if isinstance(spec.equations, InlineEquations):
        lines.append("  inline:")
        lines.append("    ode:")
        for s in spec.differential_states:
            lines.append(f"      {s}: {_quote(spec.equations.ode[s])}")
        if spec.equations.alg:
            lines.append("    alg:")
            for a in spec.equations.alg:
                lines.append(f"      - {_quote(a)}")
    else:
        lines.append("  external:")
        lines.append(f"    type: {spec.equations.type}")
        lines.append(f"    file_name: {spec.equations.file_name}")
    lines.append("differential_states:")
    for s in spec.differential_states:
        lines.append(f"  - name: {s}")
    if spec.algebraic_states:
        lines.append("algebraic_states:")
        for s in spec.algebraic_states:
            lines.append(f"  - name: {s}")
    lines.append("controls:")
    for c in spec.controls:
        lines.append(f"  - name: {c}")
    if spec.constants:
        lines.append("constants:")
        lines.append("  inline:")
        for cname, cval in spec.constants.items():
            lines.append(f"    {cname}: {cval!r}")
    return "\n".join(lines) + "\n"


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'
