"""Symbolic scalar expressions over named real variables.

Everything else in the package is built on these trees: model dynamics,
output maps, functionals and observer transformation maps are expressions,
and every design condition is assembled from them by exact symbolic
differentiation and Lie derivatives.

Grammar accepted by :func:`parse` (and emitted, fully parenthesized, by
:func:`to_text`)::

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := '-' factor | power
    power   := atom ('^' factor)?            # '^' is right-associative
    atom    := NUMBER | IDENT | FNAME '(' expr ')' | '(' expr ')'

Identifiers match ``[A-Za-z_][A-Za-z0-9_']*``; trailing primes are legal so
deviation-coordinate names like ``thJ'`` stay readable.  The recognized
function names are ``exp``, ``log``, ``sin``, ``cos`` and ``sqrt``; they are
reserved and cannot be used as variable names.

Expression values are immutable (frozen dataclasses) and safe to share;
all operations here are pure functions of their inputs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Expr", "Constant", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow",
    "Call", "VectorField", "ExprError", "ParseError", "EvalError",
    "FUNCTIONS", "parse", "to_text", "evaluate", "eval_many", "bind",
    "diff", "simplify", "subst", "lie", "free_symbols", "sampled_equal",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")

Env = Mapping[str, float]


class ExprError(Exception):
    """Base class for expression engine errors."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalError(ExprError):
    """Unbound symbol or domain violation during numeric evaluation."""


# --------------------------------------------------------------------------
# node types

@dataclass(frozen=True, slots=True)
class Expr:
    def __str__(self) -> str:
        return to_text(self)

    def __add__(self, other):
        return Add(self, _as_expr(other))

    def __radd__(self, other):
        return Add(_as_expr(other), self)

    def __sub__(self, other):
        return Sub(self, _as_expr(other))

    def __rsub__(self, other):
        return Sub(_as_expr(other), self)

    def __mul__(self, other):
        return Mul(self, _as_expr(other))

    def __rmul__(self, other):
        return Mul(_as_expr(other), self)

    def __truediv__(self, other):
        return Div(self, _as_expr(other))

    def __rtruediv__(self, other):
        return Div(_as_expr(other), self)

    def __pow__(self, other):
        return Pow(self, _as_expr(other))

    def __neg__(self):
        return Neg(self)


@dataclass(frozen=True, slots=True)
class Constant(Expr):
    value: float


@dataclass(frozen=True, slots=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, slots=True)
class Neg(Expr):
    child: Expr


@dataclass(frozen=True, slots=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Pow(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True, slots=True)
class Call(Expr):
    fn: str
    child: Expr

    def __post_init__(self):
        if self.fn not in FUNCTIONS:
            raise ValueError(f"unknown function '{self.fn}'")


_ZERO = Constant(0.0)
_ONE = Constant(1.0)

_BINARY = (Add, Sub, Mul, Div, Pow)
_OP_TEXT = {Add: "+", Sub: "-", Mul: "*", Div: "/", Pow: "^"}

ExprLike = Union[Expr, int, float]


def _as_expr(x: ExprLike) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float)):
        return Constant(float(x))
    raise TypeError(f"cannot coerce {type(x).__name__} to Expr")


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_']*)"
    r"|(?P<op>[-+*/^()])"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, symbols):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.symbols = frozenset(symbols)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, "", len(self.text))

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, text, pos = self.next()
        if kind != "op" or text != op:
            raise ParseError(f"expected '{op}', found {text!r}" if kind else f"expected '{op}'", pos)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind is not None:
            raise ParseError(f"unexpected token {text!r}", pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.next()
                rhs = self.term()
                e = Add(e, rhs) if text == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.next()
                rhs = self.factor()
                e = Mul(e, rhs) if text == "*" else Div(e, rhs)
            else:
                return e

    def factor(self) -> Expr:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.next()
            inner = self.factor()
            # fold a negated literal into its constant so that printed
            # negative constants reparse to the same node
            if isinstance(inner, Constant):
                return Constant(-inner.value)
            return Neg(inner)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.next()
            return Pow(base, self.factor())
        return base

    def atom(self) -> Expr:
        kind, text, pos = self.next()
        if kind == "num":
            return Constant(float(text))
        if kind == "ident":
            nxt_kind, nxt_text, _ = self.peek()
            if nxt_kind == "op" and nxt_text == "(":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function '{text}'", pos)
                self.next()
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg)
            if text in FUNCTIONS:
                raise ParseError(f"'{text}' is a reserved function name", pos)
            if text not in self.symbols:
                raise ParseError(f"undeclared identifier '{text}'", pos)
            return Var(text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise ParseError(f"unexpected token {text!r}" if kind else "unexpected end of input", pos)


def parse(text: str, symbols) -> Expr:
    """Parse ``text`` against a table of declared symbol names."""
    return _Parser(text, symbols).parse()


def to_text(e: Expr) -> str:
    """Canonical, fully parenthesized text; reparses to an identical tree."""
    if isinstance(e, Constant):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_text(e.child)})"
    if isinstance(e, Call):
        return f"{e.fn}({to_text(e.child)})"
    if isinstance(e, _BINARY):
        return f"({to_text(e.left)} {_OP_TEXT[type(e)]} {to_text(e.right)})"
    raise TypeError(f"not an expression: {e!r}")


# --------------------------------------------------------------------------
# numeric evaluation

def _pow_value(base: float, ex: float, node: Expr) -> float:
    if base == 0.0 and ex < 0.0:
        raise EvalError(f"zero raised to negative power in {to_text(node)}")
    if base < 0.0 and ex != round(ex):
        raise EvalError(f"negative base with non-integer exponent in {to_text(node)}")
    try:
        return base ** ex
    except OverflowError:
        raise EvalError(f"overflow in {to_text(node)}") from None


def _call_value(fn: str, x: float, node: Expr) -> float:
    if fn == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            raise EvalError(f"overflow in {to_text(node)}") from None
    if fn == "log":
        if x <= 0.0:
            raise EvalError(f"log of non-positive value in {to_text(node)}")
        return math.log(x)
    if fn == "sqrt":
        if x < 0.0:
            raise EvalError(f"sqrt of negative value in {to_text(node)}")
        return math.sqrt(x)
    if fn == "sin":
        return math.sin(x)
    return math.cos(x)


def evaluate(e: Expr, env: Env) -> float:
    """Evaluate to a double-precision value; every Var must be bound in env."""
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise EvalError(f"unbound symbol '{e.name}'") from None
    if isinstance(e, Add):
        return evaluate(e.left, env) + evaluate(e.right, env)
    if isinstance(e, Sub):
        return evaluate(e.left, env) - evaluate(e.right, env)
    if isinstance(e, Mul):
        return evaluate(e.left, env) * evaluate(e.right, env)
    if isinstance(e, Div):
        denom = evaluate(e.right, env)
        if denom == 0.0:
            raise EvalError(f"division by zero in {to_text(e)}")
        return evaluate(e.left, env) / denom
    if isinstance(e, Pow):
        return _pow_value(evaluate(e.left, env), evaluate(e.right, env), e)
    if isinstance(e, Neg):
        return -evaluate(e.child, env)
    if isinstance(e, Call):
        return _call_value(e.fn, evaluate(e.child, env), e)
    raise TypeError(f"not an expression: {e!r}")


def _eval_np(e: Expr, env: Env):
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvalError(f"unbound symbol '{e.name}'") from None
    if isinstance(e, Add):
        return np.add(_eval_np(e.left, env), _eval_np(e.right, env))
    if isinstance(e, Sub):
        return np.subtract(_eval_np(e.left, env), _eval_np(e.right, env))
    if isinstance(e, Mul):
        return np.multiply(_eval_np(e.left, env), _eval_np(e.right, env))
    if isinstance(e, Div):
        return np.divide(_eval_np(e.left, env), _eval_np(e.right, env))
    if isinstance(e, Pow):
        return np.power(_eval_np(e.left, env), _eval_np(e.right, env))
    if isinstance(e, Neg):
        return np.negative(_eval_np(e.child, env))
    if isinstance(e, Call):
        return getattr(np, e.fn)(_eval_np(e.child, env))
    raise TypeError(f"not an expression: {e!r}")


def eval_many(e: Expr, env: Env):
    """Vectorized evaluation: env values may be numpy arrays (broadcast).

    Domain violations yield nan/inf entries instead of raising; callers that
    need strictness should check finiteness of the result.
    """
    with np.errstate(all="ignore"):
        return _eval_np(e, env)


_MATH_FN = {"exp": math.exp, "log": math.log, "sin": math.sin,
            "cos": math.cos, "sqrt": math.sqrt}


def bind(e: Expr, slots: Mapping[str, int]) -> Callable[[Sequence[float]], float]:
    """Bind an expression to positional value slots for fast repeated
    evaluation inside integrator loops.  ``slots`` maps symbol name to an
    index into the value sequence passed to the returned callable."""
    if isinstance(e, Constant):
        v = e.value
        return lambda s: v
    if isinstance(e, Var):
        try:
            i = slots[e.name]
        except KeyError:
            raise EvalError(f"unbound symbol '{e.name}'") from None
        return lambda s: s[i]
    if isinstance(e, Add):
        f, g = bind(e.left, slots), bind(e.right, slots)
        return lambda s: f(s) + g(s)
    if isinstance(e, Sub):
        f, g = bind(e.left, slots), bind(e.right, slots)
        return lambda s: f(s) - g(s)
    if isinstance(e, Mul):
        f, g = bind(e.left, slots), bind(e.right, slots)
        return lambda s: f(s) * g(s)
    if isinstance(e, Div):
        f, g = bind(e.left, slots), bind(e.right, slots)
        return lambda s: f(s) / g(s)
    if isinstance(e, Pow):
        f, g = bind(e.left, slots), bind(e.right, slots)
        txt = to_text(e)

        def pw(s):
            r = f(s) ** g(s)
            if isinstance(r, complex):
                raise EvalError(f"negative base with non-integer exponent in {txt}")
            return r

        return pw
    if isinstance(e, Neg):
        f = bind(e.child, slots)
        return lambda s: -f(s)
    if isinstance(e, Call):
        fn = _MATH_FN[e.fn]
        f = bind(e.child, slots)
        return lambda s: fn(f(s))
    raise TypeError(f"not an expression: {e!r}")


# --------------------------------------------------------------------------
# symbolic operations

def free_symbols(e: Expr) -> frozenset[str]:
    if isinstance(e, Constant):
        return frozenset()
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, (Neg, Call)):
        return free_symbols(e.child)
    return free_symbols(e.left) | free_symbols(e.right)


def subst(e: Expr, mapping: Mapping[str, ExprLike]) -> Expr:
    """Replace variables by expressions or numbers."""
    table = {k: _as_expr(v) for k, v in mapping.items()}

    def rec(node: Expr) -> Expr:
        if isinstance(node, Constant):
            return node
        if isinstance(node, Var):
            return table.get(node.name, node)
        if isinstance(node, Neg):
            return Neg(rec(node.child))
        if isinstance(node, Call):
            return Call(node.fn, rec(node.child))
        return type(node)(rec(node.left), rec(node.right))

    return rec(e)


def diff(e: Expr, name: str) -> Expr:
    """Exact symbolic partial derivative with respect to ``name``."""
    if isinstance(e, Constant):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == name else _ZERO
    if isinstance(e, Neg):
        return Neg(diff(e.child, name))
    if isinstance(e, Add):
        return Add(diff(e.left, name), diff(e.right, name))
    if isinstance(e, Sub):
        return Sub(diff(e.left, name), diff(e.right, name))
    if isinstance(e, Mul):
        return Add(Mul(diff(e.left, name), e.right), Mul(e.left, diff(e.right, name)))
    if isinstance(e, Div):
        return Div(Sub(Mul(diff(e.left, name), e.right), Mul(e.left, diff(e.right, name))),
                   Mul(e.right, e.right))
    if isinstance(e, Pow):
        if isinstance(e.right, Constant):
            c = e.right.value
            if c == 0.0:
                return _ZERO
            if c == 1.0:
                return diff(e.left, name)
            base = e.left if c == 2.0 else Pow(e.left, Constant(c - 1.0))
            return Mul(Mul(Constant(c), base), diff(e.left, name))
        # general power: d(u^v) = u^v * (v' log u + v u'/u)
        return Mul(e, Add(Mul(diff(e.right, name), Call("log", e.left)),
                          Div(Mul(e.right, diff(e.left, name)), e.left)))
    if isinstance(e, Call):
        dc = diff(e.child, name)
        if e.fn == "exp":
            return Mul(e, dc)
        if e.fn == "log":
            return Div(dc, e.child)
        if e.fn == "sin":
            return Mul(Call("cos", e.child), dc)
        if e.fn == "cos":
            return Neg(Mul(Call("sin", e.child), dc))
        return Div(dc, Mul(Constant(2.0), e))  # sqrt
    raise TypeError(f"not an expression: {e!r}")


def _fold_binary(e: Expr, a: float, b: float) -> Expr:
    node = type(e)(Constant(a), Constant(b))
    try:
        return Constant(evaluate(node, {}))
    except EvalError:
        return node


def simplify(e: Expr) -> Expr:
    """Conservative value-preserving rewrite: constant folding, additive and
    multiplicative identities, ``x - x -> 0`` and double negation only.
    Idempotent; never reorders or expands terms."""
    if isinstance(e, (Constant, Var)):
        return e
    if isinstance(e, Neg):
        c = simplify(e.child)
        if isinstance(c, Constant):
            return Constant(-c.value)
        if isinstance(c, Neg):
            return c.child
        return Neg(c)
    if isinstance(e, Call):
        c = simplify(e.child)
        if isinstance(c, Constant):
            try:
                return Constant(_call_value(e.fn, c.value, e))
            except EvalError:
                pass
        return Call(e.fn, c)
    left, right = simplify(e.left), simplify(e.right)
    if isinstance(left, Constant) and isinstance(right, Constant):
        return _fold_binary(e, left.value, right.value)
    if isinstance(e, Add):
        if isinstance(left, Constant) and left.value == 0.0:
            return right
        if isinstance(right, Constant) and right.value == 0.0:
            return left
    elif isinstance(e, Sub):
        if isinstance(right, Constant) and right.value == 0.0:
            return left
        if left == right:
            return _ZERO
    elif isinstance(e, Mul):
        for a, b in ((left, right), (right, left)):
            if isinstance(a, Constant):
                if a.value == 0.0:
                    return _ZERO
                if a.value == 1.0:
                    return b
    return type(e)(left, right)


@dataclass(frozen=True)
class VectorField:
    """Ordered vector field: one expression per state symbol."""
    states: tuple[str, ...]
    exprs: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.states) != len(self.exprs) or not self.states:
            raise ValueError("vector field needs one expression per state")
        if len(set(self.states)) != len(self.states):
            raise ValueError("state symbols must be distinct")

    @property
    def n(self) -> int:
        return len(self.states)


def lie(h: Expr, field: VectorField, order: int = 1) -> Expr:
    """Iterated Lie derivative of ``h`` along ``field``.

    One application is the directional derivative: the sum over states of
    the field component times the partial of ``h``; ``order`` folds it.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    g = h
    for _ in range(order):
        terms = []
        for s, fe in zip(field.states, field.exprs):
            d = simplify(diff(g, s))
            if d == _ZERO:
                continue
            terms.append(simplify(Mul(fe, d)))
        if not terms:
            g = _ZERO
            continue
        acc = terms[0]
        for t in terms[1:]:
            acc = Add(acc, t)
        g = simplify(acc)
    return g


def sampled_equal(e1: Expr, e2: Expr, box=None, bindings=None,
                  n: int = 50, rtol: float = 1e-9, seed: int = 0) -> bool:
    """Numeric expression equality over random samples.

    There is no canonical form here, so equality is tested by evaluating at
    ``n`` points drawn uniformly from ``box`` (default [-1, 1] per symbol);
    ``bindings`` supplies fixed values (e.g. parameters).
    """
    box = dict(box or {})
    env: dict = dict(bindings or {})
    syms = sorted((free_symbols(e1) | free_symbols(e2)) - set(env))
    rng = np.random.default_rng(seed)
    for s in syms:
        lo, hi = box.get(s, (-1.0, 1.0))
        env[s] = rng.uniform(lo, hi, n)
    a = np.broadcast_to(np.asarray(eval_many(e1, env), dtype=float), (n,))
    b = np.broadcast_to(np.asarray(eval_many(e2, env), dtype=float), (n,))
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        return False
    scale = 1.0 + np.maximum(np.abs(a), np.abs(b))
    return bool(np.all(np.abs(a - b) <= rtol * scale))
