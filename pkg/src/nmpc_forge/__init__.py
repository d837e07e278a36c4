"""nmpc_forge: a self-contained nonlinear MPC toolchain."""

from .expr import (
    Expr,
    ExprError,
    FunctionDef,
    SerializationError,
    concat,
    const,
    cos,
    deserialize,
    exp,
    feval,
    hessian,
    jacobian,
    log,
    serialize,
    sin,
    sqrt,
    substitute,
    sym,
    tan,
)

__version__ = "0.1.0"
