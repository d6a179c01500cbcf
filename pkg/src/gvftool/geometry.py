"""Surface functions: expression trees, exact gradients, and the wedge product.

The path is the joint zero set of n-1 scalar surface functions on R^n. This
module parses the functions from a tiny arithmetic language, evaluates them
and their gradients exactly (forward-mode dual numbers on the tree), and
builds the n-dimensional wedge of the stacked gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np


class ParseError(ValueError):
    """Malformed expression text; carries the 0-based offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(ArithmeticError):
    """Evaluation fault (division by zero, 0 raised to a negative power)."""


# --- expression tree ----------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based; rendered as x{index+1}


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


Expr = Union[Const, Var, Neg, Add, Sub, Mul, Div, Pow]

_SUM_LEVEL, _PROD_LEVEL, _NEG_LEVEL, _POW_LEVEL, _ATOM_LEVEL = 1, 2, 3, 4, 5


def _level(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return _SUM_LEVEL
    if isinstance(e, (Mul, Div)):
        return _PROD_LEVEL
    if isinstance(e, Neg):
        return _NEG_LEVEL
    if isinstance(e, Pow):
        return _POW_LEVEL
    return _ATOM_LEVEL


def to_string(e: Expr) -> str:
    """Render with minimal parentheses; parse(to_string(e), n) == e."""

    def paren(child: Expr, min_level: int) -> str:
        s = to_string(child)
        return f"({s})" if _level(child) < min_level else s

    if isinstance(e, Const):
        v = e.value
        if v < 0:
            # negative literals only arise from folding; keep them reparseable
            return f"-{to_string(Const(-v))}"
        return str(int(v)) if float(v).is_integer() and abs(v) < 1e16 else repr(v)
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Neg):
        return f"-{paren(e.arg, _NEG_LEVEL)}"
    if isinstance(e, Add):
        return f"{paren(e.left, _SUM_LEVEL)} + {paren(e.right, _SUM_LEVEL + 1)}"
    if isinstance(e, Sub):
        return f"{paren(e.left, _SUM_LEVEL)} - {paren(e.right, _SUM_LEVEL + 1)}"
    if isinstance(e, Mul):
        return f"{paren(e.left, _PROD_LEVEL)} * {paren(e.right, _PROD_LEVEL + 1)}"
    if isinstance(e, Div):
        return f"{paren(e.left, _PROD_LEVEL)} / {paren(e.right, _PROD_LEVEL + 1)}"
    if isinstance(e, Pow):
        return f"{paren(e.base, _ATOM_LEVEL)}^{e.exponent}"
    raise TypeError(f"not an expression node: {e!r}")


# --- tokenizer / recursive-descent parser -------------------------------

_OPS = set("+-*/^()")


def _tokenize(text: str):
    tokens = []  # (kind, value, position)
    i, m = 0, len(text)
    while i < m:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _OPS:
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < m and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < m and text[j] in "eE":
                k = j + 1
                if k < m and text[k] in "+-":
                    k += 1
                if k < m and text[k].isdigit():
                    j = k
                    while j < m and text[j].isdigit():
                        j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ParseError(f"bad number {text[i:j]!r}", i) from None
            tokens.append(("num", value, i))
            i = j
            continue
        if c == "x":
            j = i + 1
            while j < m and text[j].isdigit():
                j += 1
            if j == i + 1:
                raise ParseError("variable must be x followed by an index", i)
            tokens.append(("var", int(text[i + 1 : j]), i))
            i = j
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, m))
    return tokens


class _Parser:
    def __init__(self, tokens, n: int):
        self.tokens = tokens
        self.pos = 0
        self.n = n

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, kind: str):
        t = self.next()
        if t[0] != kind:
            raise ParseError(f"expected {kind!r}, found {t[0]!r}", t[2])
        return t

    def sum(self) -> Expr:
        e = self.prod()
        while self.peek()[0] in "+-":
            op = self.next()[0]
            rhs = self.prod()
            e = Add(e, rhs) if op == "+" else Sub(e, rhs)
        return e

    def prod(self) -> Expr:
        e = self.unary()
        while self.peek()[0] in "*/":
            op = self.next()[0]
            rhs = self.unary()
            e = Mul(e, rhs) if op == "*" else Div(e, rhs)
        return e

    def unary(self) -> Expr:
        if self.peek()[0] == "-":
            self.next()
            inner = self.unary()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Neg(inner)
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while self.peek()[0] == "^":
            self.next()
            e = Pow(e, self.exponent())
        return e

    def exponent(self) -> int:
        sign = 1
        if self.peek()[0] == "-":
            self.next()
            sign = -1
        kind, value, pos = self.next()
        if kind != "num" or not float(value).is_integer():
            raise ParseError("exponent must be an integer literal", pos)
        return sign * int(value)

    def atom(self) -> Expr:
        kind, value, pos = self.next()
        if kind == "num":
            return Const(float(value))
        if kind == "var":
            if not 1 <= value <= self.n:
                raise ParseError(f"unknown variable x{value} (n={self.n})", pos)
            return Var(value - 1)
        if kind == "(":
            e = self.sum()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {kind!r}", pos)


def parse_expr(text: str, n: int) -> Expr:
    """Parse an arithmetic expression over x1..xn.

    Precedence: ^ (integer literal exponent) > unary minus > * / > + -,
    with left associativity for the binary operators.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    parser = _Parser(_tokenize(text), n)
    e = parser.sum()
    kind, _, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input {kind!r}", pos)
    return e


# --- dual numbers --------------------------------------------------------

@dataclass
class DualVector:
    """Value plus all n partial derivatives, propagated exactly."""

    value: float
    partials: np.ndarray

    def __add__(self, other: "DualVector") -> "DualVector":
        return DualVector(self.value + other.value, self.partials + other.partials)

    def __sub__(self, other: "DualVector") -> "DualVector":
        return DualVector(self.value - other.value, self.partials - other.partials)

    def __neg__(self) -> "DualVector":
        return DualVector(-self.value, -self.partials)

    def __mul__(self, other: "DualVector") -> "DualVector":
        return DualVector(
            self.value * other.value,
            self.partials * other.value + self.value * other.partials,
        )

    def __truediv__(self, other: "DualVector") -> "DualVector":
        if other.value == 0.0:
            raise EvalError("division by zero")
        q = self.value / other.value
        return DualVector(q, (self.partials - q * other.partials) / other.value)

    def pow_int(self, k: int) -> "DualVector":
        if self.value == 0.0 and k < 0:
            raise EvalError("zero raised to a negative power")
        if k == 0:
            return DualVector(1.0, np.zeros_like(self.partials))
        v = self.value ** k
        dv = k * self.value ** (k - 1) if (self.value != 0.0 or k >= 1) else 0.0
        return DualVector(v, dv * self.partials)


def eval_dual(e: Expr, xi: np.ndarray) -> DualVector:
    """Evaluate value and full gradient at xi via dual-number arithmetic."""
    n = len(xi)
    if isinstance(e, Const):
        return DualVector(float(e.value), np.zeros(n))
    if isinstance(e, Var):
        p = np.zeros(n)
        p[e.index] = 1.0
        return DualVector(float(xi[e.index]), p)
    if isinstance(e, Neg):
        return -eval_dual(e.arg, xi)
    if isinstance(e, Add):
        return eval_dual(e.left, xi) + eval_dual(e.right, xi)
    if isinstance(e, Sub):
        return eval_dual(e.left, xi) - eval_dual(e.right, xi)
    if isinstance(e, Mul):
        return eval_dual(e.left, xi) * eval_dual(e.right, xi)
    if isinstance(e, Div):
        return eval_dual(e.left, xi) / eval_dual(e.right, xi)
    if isinstance(e, Pow):
        return eval_dual(e.base, xi).pow_int(e.exponent)
    raise TypeError(f"not an expression node: {e!r}")


def eval_value(e: Expr, xi: np.ndarray) -> float:
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Var):
        return float(xi[e.index])
    if isinstance(e, Neg):
        return -eval_value(e.arg, xi)
    if isinstance(e, Add):
        return eval_value(e.left, xi) + eval_value(e.right, xi)
    if isinstance(e, Sub):
        return eval_value(e.left, xi) - eval_value(e.right, xi)
    if isinstance(e, Mul):
        return eval_value(e.left, xi) * eval_value(e.right, xi)
    if isinstance(e, Div):
        num = eval_value(e.left, xi)
        den = eval_value(e.right, xi)
        if den == 0.0:
            raise EvalError("division by zero")
        return num / den
    if isinstance(e, Pow):
        base = eval_value(e.base, xi)
        if base == 0.0 and e.exponent < 0:
            raise EvalError("zero raised to a negative power")
        return base ** e.exponent
    raise TypeError(f"not an expression node: {e!r}")


# --- surface systems -----------------------------------------------------

@dataclass(frozen=True)
class SurfaceSystem:
    """n-dimensional ambient space with m <= n-1 surface functions.

    m = n-1 describes a one-dimensional path (the usual case); smaller m is
    accepted for the higher-dimensional target variant's gradient terms.
    """

    n: int
    surfaces: tuple[Expr, ...]

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("ambient dimension must be >= 2")
        if not 1 <= len(self.surfaces) <= self.n - 1:
            raise ValueError(
                f"need between 1 and n-1={self.n - 1} surface functions, "
                f"got {len(self.surfaces)}"
            )

    @property
    def m(self) -> int:
        return len(self.surfaces)

    @classmethod
    def from_strings(cls, n: int, texts: Sequence[str]) -> "SurfaceSystem":
        return cls(n, tuple(parse_expr(t, n) for t in texts))

    def surface_strings(self) -> tuple[str, ...]:
        return tuple(to_string(e) for e in self.surfaces)


def error_map(sys: SurfaceSystem, xi: np.ndarray) -> np.ndarray:
    """Stacked surface-function values e(xi); zero exactly on the path."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty(sys.m)
    for i, e in enumerate(sys.surfaces):
        try:
            out[i] = eval_value(e, xi)
        except EvalError as exc:
            raise EvalError(f"surface {i + 1}: {exc}") from exc
    return out


def gradient(sys: SurfaceSystem, i: int, xi: np.ndarray) -> np.ndarray:
    """Exact gradient of surface i (1-based) at xi."""
    if not 1 <= i <= sys.m:
        raise IndexError(f"surface index {i} out of range 1..{sys.m}")
    xi = np.asarray(xi, dtype=float)
    try:
        return eval_dual(sys.surfaces[i - 1], xi).partials
    except EvalError as exc:
        raise EvalError(f"surface {i}: {exc}") from exc


def grad_matrix(sys: SurfaceSystem, xi: np.ndarray) -> np.ndarray:
    """All gradients stacked as rows, shape (m, n)."""
    xi = np.asarray(xi, dtype=float)
    G = np.empty((sys.m, sys.n))
    for i in range(sys.m):
        try:
            G[i] = eval_dual(sys.surfaces[i], xi).partials
        except EvalError as exc:
            raise EvalError(f"surface {i + 1}: {exc}") from exc
    return G


def wedge(gradients: Union[np.ndarray, Iterable[np.ndarray]]) -> np.ndarray:
    """Generalized cross product of n-1 vectors in R^n.

    Component j (0-based) is (-1)^(n+j+1) times the minor with column j
    removed, i.e. the formal determinant with the stacked gradients on top
    and the basis row last. For n=2 this is the 90-degree counterclockwise
    rotation of the single input; for n=3 the ordinary cross product. The
    result is orthogonal to every input; linearly dependent inputs give 0.
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    m, n = G.shape
    if m != n - 1:
        raise ValueError(f"wedge needs n-1={n - 1} vectors of dimension {n}, got {m}")
    w = np.empty(n)
    if n == 2:
        w[0] = -G[0, 1]
        w[1] = G[0, 0]
        return w
    if n == 3:
        a, b = G[0], G[1]
        w[0] = a[1] * b[2] - a[2] * b[1]
        w[1] = a[2] * b[0] - a[0] * b[2]
        w[2] = a[0] * b[1] - a[1] * b[0]
        return w
    for j in range(n):
        minor = np.delete(G, j, axis=1)
        w[j] = (-1.0) ** (n + j + 1) * np.linalg.det(minor)
    return w


def newton_project(
    sys: SurfaceSystem,
    xi: np.ndarray,
    target: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> np.ndarray:
    """Project xi onto the level set e = target along the gradient frame at xi.

    Solves e(xi - G(xi)^T c) = target for c in R^m by Newton iteration with
    the frame frozen at xi. target=None means the zero level (the path).
    Raises EvalError carrying the last residual on non-convergence.
    """
    xi = np.asarray(xi, dtype=float)
    tgt = np.zeros(sys.m) if target is None else np.asarray(target, dtype=float)
    frame = grad_matrix(sys, xi).T  # (n, m)
    c = np.zeros(sys.m)
    x = xi.copy()
    resid = np.inf
    for _ in range(max_iter):
        r = error_map(sys, x) - tgt
        resid = float(np.linalg.norm(r))
        if resid <= tol:
            return x
        J = -grad_matrix(sys, x) @ frame  # (m, m)
        try:
            dc = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise EvalError(
                f"projection frame is singular (residual {resid:.3e})"
            ) from None
        c = c + dc
        x = xi - frame @ c
    raise EvalError(f"projection did not converge (residual {resid:.3e})")
