"""Arithmetic expressions for constraint potentials and their exact derivatives.

Grammar (standard precedence, left-associative except ``^``):

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' ['-'] INTEGER)*        # right-associative, integer powers only
    atom   := NUMBER | VARIABLE | FUNC '(' expr ')' | '(' expr ')'

Variables are ``x1 .. xn``; ``x``, ``y``, ``z`` alias ``x1``, ``x2``, ``x3``.
Functions: ``exp``, ``ln``, ``sin``, ``cos``.  Fractional powers must be
written through exp/ln.  The only rewriting performed on trees is constant
folding (plus dropping 0/1 neutral elements, so derivatives stay compact).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr",
    "ParseError",
    "DomainError",
    "parse",
    "evaluate",
    "evaluate_arrays",
    "differentiate",
    "to_source",
    "const",
    "var",
    "add",
    "sub",
    "mul",
    "div",
    "pow_",
    "neg",
    "func",
]


class ParseError(ValueError):
    """Syntax or arity error, carrying the byte offset into the source."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class DomainError(ArithmeticError):
    """Evaluation hit ln of a non-positive value or a division by zero."""

    def __init__(self, reason: str, subexpr: str, bad_mask=None):
        super().__init__(f"{reason} in subexpression {subexpr!r}")
        self.reason = reason
        self.subexpr = subexpr
        # boolean array flagging offending evaluation points, when vectorized
        self.bad_mask = bad_mask


# ---------------------------------------------------------------------------
# AST nodes


@dataclass(frozen=True)
class _Node:
    def eval(self, coords):
        raise NotImplementedError

    def diff(self, axis: int) -> "_Node":
        raise NotImplementedError

    def source(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(_Node):
    value: float

    def eval(self, coords):
        return self.value

    def diff(self, axis):
        return Const(0.0)

    def source(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(_Node):
    axis: int  # 0-based

    def eval(self, coords):
        return coords[self.axis]

    def diff(self, axis):
        return Const(1.0 if axis == self.axis else 0.0)

    def source(self):
        return f"x{self.axis + 1}"


@dataclass(frozen=True)
class Add(_Node):
    a: _Node
    b: _Node

    def eval(self, coords):
        return self.a.eval(coords) + self.b.eval(coords)

    def diff(self, axis):
        return add(self.a.diff(axis), self.b.diff(axis))

    def source(self):
        return f"({self.a.source()} + {self.b.source()})"


@dataclass(frozen=True)
class Sub(_Node):
    a: _Node
    b: _Node

    def eval(self, coords):
        return self.a.eval(coords) - self.b.eval(coords)

    def diff(self, axis):
        return sub(self.a.diff(axis), self.b.diff(axis))

    def source(self):
        return f"({self.a.source()} - {self.b.source()})"


@dataclass(frozen=True)
class Mul(_Node):
    a: _Node
    b: _Node

    def eval(self, coords):
        return self.a.eval(coords) * self.b.eval(coords)

    def diff(self, axis):
        return add(mul(self.a.diff(axis), self.b), mul(self.a, self.b.diff(axis)))

    def source(self):
        return f"({self.a.source()} * {self.b.source()})"


@dataclass(frozen=True)
class Div(_Node):
    a: _Node
    b: _Node

    def eval(self, coords):
        den = self.b.eval(coords)
        bad = den == 0
        if np.any(bad):
            raise DomainError("division by zero", self.source(), np.asarray(bad))
        return self.a.eval(coords) / den

    def diff(self, axis):
        da, db = self.a.diff(axis), self.b.diff(axis)
        return div(sub(mul(da, self.b), mul(self.a, db)), pow_(self.b, 2))

    def source(self):
        return f"({self.a.source()} / {self.b.source()})"


@dataclass(frozen=True)
class Pow(_Node):
    base: _Node
    exponent: int

    def eval(self, coords):
        base = self.base.eval(coords)
        if self.exponent < 0:
            bad = base == 0
            if np.any(bad):
                raise DomainError("zero raised to a negative power", self.source(),
                                  np.asarray(bad))
        return np.power(base, self.exponent)  # IEEE: overflows to inf, no raise

    def diff(self, axis):
        n = self.exponent
        return mul(mul(Const(float(n)), pow_(self.base, n - 1)),
                   self.base.diff(axis))

    def source(self):
        return f"({self.base.source()} ^ {self.exponent})"


@dataclass(frozen=True)
class Neg(_Node):
    a: _Node

    def eval(self, coords):
        return -self.a.eval(coords)

    def diff(self, axis):
        return neg(self.a.diff(axis))

    def source(self):
        return f"(-{self.a.source()})"


_FUNC_EVAL = {"exp": np.exp, "ln": np.log, "sin": np.sin, "cos": np.cos}
_FUNC_MATH = {"exp": math.exp, "ln": math.log, "sin": math.sin, "cos": math.cos}


@dataclass(frozen=True)
class Func(_Node):
    name: str
    arg: _Node

    def eval(self, coords):
        val = self.arg.eval(coords)
        if self.name == "ln":
            bad = val <= 0
            if np.any(bad):
                raise DomainError("ln of non-positive value", self.source(),
                                  np.asarray(bad))
        return _FUNC_EVAL[self.name](val)

    def diff(self, axis):
        da = self.arg.diff(axis)
        if self.name == "exp":
            return mul(Func("exp", self.arg), da)
        if self.name == "ln":
            return div(da, self.arg)
        if self.name == "sin":
            return mul(Func("cos", self.arg), da)
        return neg(mul(Func("sin", self.arg), da))  # cos

    def source(self):
        return f"{self.name}({self.arg.source()})"


# ---------------------------------------------------------------------------
# Smart constructors: constant folding plus 0/1 neutral-element pruning.


def const(v: float) -> _Node:
    return Const(float(v))


def var(axis: int) -> _Node:
    return Var(axis)


def _is_const(n: _Node, v=None) -> bool:
    return isinstance(n, Const) and (v is None or n.value == v)


def add(a: _Node, b: _Node) -> _Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: _Node, b: _Node) -> _Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: _Node, b: _Node) -> _Node:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def div(a: _Node, b: _Node) -> _Node:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    return Div(a, b)


def pow_(base: _Node, exponent: int) -> _Node:
    if exponent == 0:
        return Const(1.0)
    if exponent == 1:
        return base
    if isinstance(base, Const) and (base.value != 0 or exponent > 0):
        try:
            return Const(base.value ** exponent)
        except OverflowError:
            pass
    return Pow(base, int(exponent))


def neg(a: _Node) -> _Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.a
    return Neg(a)


def func(name: str, arg: _Node) -> _Node:
    if isinstance(arg, Const):
        if name != "ln" or arg.value > 0:
            try:
                return Const(_FUNC_MATH[name](arg.value))
            except (OverflowError, ValueError):
                pass
    return Func(name, arg)


# ---------------------------------------------------------------------------
# Public wrapper carrying the declared dimension.


@dataclass(frozen=True)
class Expr:
    """A parsed expression over x1..xn with a declared dimension n."""

    root: _Node
    dimension: int

    def __str__(self) -> str:
        return self.root.source()

    def __call__(self, point) -> float:
        return evaluate(self, point)


# ---------------------------------------------------------------------------
# Tokenizer / parser.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)

_ALIASES = {"x": 1, "y": 2, "z": 3}
_VAR_RE = re.compile(r"^x(\d+)$")


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            at = len(source) - len(stripped)
            raise ParseError(f"unexpected character {stripped[0]!r}", at)
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.lastgroup == "ident":
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, tokens, dimension: int):
        self.tokens = tokens
        self.i = 0
        self.dim = dimension

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, text, pos = self.peek()
        if kind != "op" or text != op:
            raise ParseError(f"expected {op!r}, found {text or 'end of input'!r}", pos)
        return self.advance()

    def parse_expr(self) -> _Node:
        node = self.parse_term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                rhs = self.parse_term()
                node = add(node, rhs) if text == "+" else sub(node, rhs)
            else:
                return node

    def parse_term(self) -> _Node:
        node = self.parse_unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                rhs = self.parse_unary()
                node = mul(node, rhs) if text == "*" else div(node, rhs)
            else:
                return node

    def parse_unary(self) -> _Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self) -> _Node:
        base = self.parse_atom()
        exponents = []
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text == "^":
                self.advance()
                exponents.append(self.parse_int_exponent())
            else:
                break
        if not exponents:
            return base
        # right-associative: fold the exponent tower to a single integer
        _, _, pos = self.peek()
        n = exponents[-1]
        for e in reversed(exponents[:-1]):
            if n < 0 and e not in (0, 1, -1):
                raise ParseError("exponent tower is not an integer", pos)
            if abs(e) > 1 and n * math.log2(abs(e)) > 62:
                raise ParseError("exponent tower is too large", pos)
            n = e ** n
        if abs(n) > 2 ** 62:
            raise ParseError("exponent is too large", pos)
        return pow_(base, n)

    def parse_int_exponent(self) -> int:
        sign = 1
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            sign = -1
            kind, text, pos = self.peek()
        if kind != "num":
            raise ParseError(f"expected integer exponent, found {text or 'end of input'!r}", pos)
        self.advance()
        try:
            value = int(text)
        except ValueError:
            raise ParseError(f"exponent must be an integer, found {text!r}; "
                             "write fractional powers via exp/ln", pos) from None
        return sign * value

    def parse_atom(self) -> _Node:
        kind, text, pos = self.advance()
        if kind == "num":
            return const(float(text))
        if kind == "op" and text == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        if kind == "ident":
            if text in _FUNC_EVAL:
                self.expect_op("(")
                arg = self.parse_expr()
                self.expect_op(")")
                return func(text, arg)
            index = _ALIASES.get(text)
            if index is None:
                m = _VAR_RE.match(text)
                if m:
                    index = int(m.group(1))
            if index is None:
                raise ParseError(f"unknown identifier {text!r}", pos)
            if index < 1:
                raise ParseError(f"variable index must be >= 1, got {text!r}", pos)
            if index > self.dim:
                raise ParseError(
                    f"variable index {index} exceeds dimension {self.dim}", pos)
            return var(index - 1)
        raise ParseError(f"expected a value, found {text or 'end of input'!r}", pos)


def parse(source: str, dimension: int) -> Expr:
    """Parse ``source`` into an expression over x1..x<dimension>."""
    if not isinstance(dimension, int) or dimension < 1:
        raise ValueError(f"dimension must be a positive integer, got {dimension}")
    if not source or not source.strip():
        raise ParseError("empty expression", 0)
    parser = _Parser(_tokenize(source), dimension)
    node = parser.parse_expr()
    kind, text, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"unexpected trailing input {text!r}", pos)
    return Expr(node, dimension)


# ---------------------------------------------------------------------------
# Operations.


def evaluate(e: Expr, point) -> float:
    """Evaluate at a single point (sequence of length ``e.dimension``).

    IEEE semantics throughout: out-of-range intermediates become inf rather
    than raising, matching the vectorized path.
    """
    point = tuple(np.float64(c) for c in point)
    if len(point) != e.dimension:
        raise ValueError(
            f"point has length {len(point)}, expression dimension is {e.dimension}")
    with np.errstate(over="ignore", under="ignore", invalid="ignore",
                     divide="ignore"):
        return float(e.root.eval(point))


def evaluate_arrays(e: Expr, coords) -> np.ndarray:
    """Vectorized evaluation: ``coords`` is a sequence of n broadcastable arrays."""
    if len(coords) != e.dimension:
        raise ValueError(
            f"got {len(coords)} coordinate arrays, expression dimension is {e.dimension}")
    coords = tuple(np.asarray(c, dtype=float) for c in coords)
    with np.errstate(over="ignore", under="ignore", invalid="ignore",
                     divide="ignore"):
        out = e.root.eval(coords)
    shape = np.broadcast(*coords).shape if coords else ()
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if np.ndim(out) == 0 \
        else np.asarray(out, dtype=float)


def differentiate(e: Expr, axis: int) -> Expr:
    """Exact symbolic partial derivative along 1-based ``axis``."""
    if not 1 <= axis <= e.dimension:
        raise ValueError(f"axis must be in 1..{e.dimension}, got {axis}")
    return Expr(e.root.diff(axis - 1), e.dimension)


def to_source(e: Expr) -> str:
    """Fully parenthesized text form; re-parsing yields an identical tree."""
    return e.root.source()
