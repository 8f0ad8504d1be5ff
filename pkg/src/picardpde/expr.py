"""Closed-form expressions over ``t``, spatial coordinates and derivatives of ``u``.

Expressions are small immutable trees built by :func:`parse`. They are
evaluated with :func:`evaluate` on scalars or numpy arrays (broadcasting
like any ufunc expression) and differentiated with :func:`diff`.

Derivatives of the unknown appear as placeholder variables: ``u`` is the
function itself, ``u_txx`` is one time and two ``x`` derivatives. The
letters after the underscore are reordered at parse time so that ``t``
comes first and spatial axes follow in axis order (``u_yx`` becomes
``u_xy``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Const", "Var", "Unary", "Binary", "Expr",
    "ExprError", "ExprSyntaxError", "UnknownIdentifierError", "OrderLimitError",
    "UnboundVariableError", "ExprDomainError",
    "parse", "evaluate", "diff", "free_vars", "to_string",
    "spatial_names", "is_placeholder", "placeholder_orders", "placeholder_name",
    "placeholders",
]

UNARY_FUNCS = ("sin", "cos", "sinh", "cosh", "exp", "log", "sqrt", "abs")
NAMED_CONSTANTS = {"pi": math.pi}


class ExprError(ValueError):
    """Base class for every expression failure."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownIdentifierError(ExprError):
    pass


class OrderLimitError(ExprError):
    pass


class UnboundVariableError(ExprError):
    pass


class ExprDomainError(ExprError):
    """Raised when an operation leaves its real domain.

    ``index`` holds the first offending array index when the evaluation
    was vectorized, otherwise ``None``.
    """

    def __init__(self, message: str, index: tuple | None = None):
        super().__init__(message)
        self.index = index


# --------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of UNARY_FUNCS
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]


# --------------------------------------------------------------------------
# variable naming


def spatial_names(k: int) -> tuple[str, ...]:
    """Canonical spatial variable names for dimension ``k``."""
    if k < 1:
        raise ValueError("spatial dimension must be >= 1")
    if k <= 3:
        return ("x", "y", "z")[:k]
    return tuple(f"x{i + 1}" for i in range(k))


def _spatial_aliases(k: int) -> dict[str, int]:
    table = {f"x{i + 1}": i for i in range(k)}
    if k <= 3:
        table.update({name: i for i, name in enumerate(("x", "y", "z")[:k])})
    return table


def is_placeholder(name: str) -> bool:
    return name == "u" or name.startswith("u_")


_LETTER = re.compile(r"t|x\d+|x|y|z")


def placeholder_orders(name: str, k: int) -> tuple[int, tuple[int, ...]]:
    """Split a placeholder name into (time order, spatial multi-index)."""
    if name == "u":
        return 0, (0,) * k
    if not name.startswith("u_") or len(name) == 2:
        raise UnknownIdentifierError(f"not a derivative placeholder: {name!r}")
    aliases = _spatial_aliases(k)
    suffix = name[2:]
    a0 = 0
    alpha = [0] * k
    pos = 0
    while pos < len(suffix):
        match = _LETTER.match(suffix, pos)
        if match is None:
            raise UnknownIdentifierError(f"bad derivative letter in {name!r}")
        letter = match.group()
        if letter == "t":
            a0 += 1
        elif letter in aliases:
            alpha[aliases[letter]] += 1
        else:
            raise UnknownIdentifierError(
                f"{name!r} differentiates along {letter!r}, not a variable for k={k}")
        pos = match.end()
    return a0, tuple(alpha)


def placeholder_name(a0: int, alpha: tuple[int, ...]) -> str:
    """Canonical placeholder for the given derivative orders."""
    k = len(alpha)
    names = spatial_names(k)
    letters = "t" * a0 + "".join(names[i] * alpha[i] for i in range(k))
    return "u_" + letters if letters else "u"


# --------------------------------------------------------------------------
# construction helpers (literal folding)


def _fold_unary(op: str, value: float) -> float:
    result = _apply_unary(op, np.float64(value))
    return float(result)


def _fold_binary(op: str, a: float, b: float) -> float:
    return float(_apply_binary(op, np.float64(a), np.float64(b)))


def _make_unary(op: str, arg: Expr) -> Expr:
    if isinstance(arg, Const):
        return Const(_fold_unary(op, arg.value))
    return Unary(op, arg)


def _make_binary(op: str, left: Expr, right: Expr) -> Expr:
    if isinstance(left, Const) and isinstance(right, Const):
        return Const(_fold_binary(op, left.value, right.value))
    return Binary(op, left, right)


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[a-z][a-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while True:
        while pos < len(source) and source[pos].isspace():
            pos += 1
        if pos >= len(source):
            break
        match = _TOKEN.match(source, pos)
        if match is None or match.end() == pos:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), start))
        pos = match.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, k: int, n: int | None, m: int | None):
        self.tokens = _tokenize(source)
        self.i = 0
        self.k = k
        self.n = n
        self.m = m
        self.aliases = _spatial_aliases(k)
        self.names = spatial_names(k)

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", pos)

    def parse(self) -> Expr:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = _make_binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = _make_binary(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return _make_unary("neg", self.unary())
        if self.peek()[:2] == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        node = self.base()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            node = _make_binary("^", node, self.unary())
        return node

    def base(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            value = float(text)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"literal {text} overflows", pos)
            return Const(value)
        if kind == "ident":
            if self.peek()[:2] == ("op", "("):
                if text not in UNARY_FUNCS:
                    raise UnknownIdentifierError(f"unknown function {text!r} at position {pos}")
                self.take()
                arg = self.expr()
                self.expect(")")
                return _make_unary(text, arg)
            if text in UNARY_FUNCS:
                raise ExprSyntaxError(f"expected '(' after {text}", self.peek()[2])
            return self.identifier(text, pos)
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", pos)

    def identifier(self, text: str, pos: int) -> Expr:
        if text == "t":
            return Var("t")
        if text in self.aliases:
            return Var(self.names[self.aliases[text]])
        if text in NAMED_CONSTANTS:
            return Const(NAMED_CONSTANTS[text])
        if is_placeholder(text):
            a0, alpha = placeholder_orders(text, self.k)
            self.check_orders(text, a0, alpha)
            return Var(placeholder_name(a0, alpha))
        raise UnknownIdentifierError(f"unknown identifier {text!r} at position {pos}")

    def check_orders(self, text: str, a0: int, alpha: tuple[int, ...]):
        if self.m is not None and a0 + sum(alpha) > self.m:
            raise OrderLimitError(
                f"{text!r} has total order {a0 + sum(alpha)} > m={self.m}")
        if self.n is not None and a0 >= self.n:
            raise OrderLimitError(f"{text!r} has time order {a0} >= n={self.n}")


def parse(source: str, k: int, n: int | None = None, m: int | None = None) -> Expr:
    """Parse ``source`` into an expression tree.

    Parameters
    ----------
    source : str
        Expression text, e.g. ``"u_xx - u_yy - u + (1+t)*sinh(x+y)"``.
    k : int
        Spatial dimension; decides which coordinate names exist.
    n, m : int, optional
        Time order of the equation and highest derivative order of the
        right-hand side. When given, placeholders are checked against
        them (time order < n, total order <= m).
    """
    if k < 1:
        raise ValueError("spatial dimension must be >= 1")
    return _Parser(source, k, n, m).parse()


# --------------------------------------------------------------------------
# evaluation


def _first_index(mask) -> tuple | None:
    if np.ndim(mask) == 0:
        return None
    return tuple(int(i) for i in np.argwhere(mask)[0])


def _apply_unary(op: str, a):
    with np.errstate(all="ignore"):
        if op == "neg":
            return -a
        if op == "log":
            bad = a <= 0
            if np.any(bad):
                raise ExprDomainError("log of a non-positive number", _first_index(bad))
            return np.log(a)
        if op == "sqrt":
            bad = a < 0
            if np.any(bad):
                raise ExprDomainError("sqrt of a negative number", _first_index(bad))
            return np.sqrt(a)
        if op == "abs":
            return np.abs(a)
        return getattr(np, op)(a)


def _apply_binary(op: str, a, b):
    with np.errstate(all="ignore"):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            bad = b == 0
            if np.any(bad):
                raise ExprDomainError("division by zero", _first_index(np.broadcast_to(bad, np.broadcast(a, b).shape)))
            return a / b
        # ^
        zero_neg = (a == 0) & (b < 0)
        if np.any(zero_neg):
            raise ExprDomainError("zero raised to a negative power",
                                  _first_index(np.broadcast_to(zero_neg, np.broadcast(a, b).shape)))
        neg_frac = (a < 0) & (b != np.round(b))
        if np.any(neg_frac):
            raise ExprDomainError("negative base with non-integer exponent",
                                  _first_index(np.broadcast_to(neg_frac, np.broadcast(a, b).shape)))
        return np.power(a, b)


def _eval(e: Expr, env: Mapping[str, object]):
    if isinstance(e, Const):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            value = env[e.name]
        except KeyError:
            raise UnboundVariableError(f"variable {e.name!r} is not bound") from None
        return np.asarray(value, dtype=np.float64) if np.ndim(value) else np.float64(value)
    if isinstance(e, Unary):
        return _apply_unary(e.op, _eval(e.arg, env))
    return _apply_binary(e.op, _eval(e.left, env), _eval(e.right, env))


def evaluate(e: Expr, env: Mapping[str, object]):
    """Evaluate ``e`` with variables bound by ``env``.

    Values in ``env`` may be floats or numpy arrays; arrays broadcast
    against each other. A scalar environment gives a Python float.
    """
    result = _eval(e, env)
    if np.ndim(result) == 0:
        return float(result)
    return result


# --------------------------------------------------------------------------
# inspection


def free_vars(e: Expr) -> frozenset[str]:
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Unary):
        return free_vars(e.arg)
    return free_vars(e.left) | free_vars(e.right)


def placeholders(e: Expr) -> frozenset[str]:
    return frozenset(v for v in free_vars(e) if is_placeholder(v))


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _const_text(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        text = str(int(value))
        if value == 0 and math.copysign(1.0, value) < 0:
            text = "-0"
    else:
        text = repr(value)
    return text


def _fmt(e: Expr) -> tuple[str, int]:
    """Return text and binding strength of ``e``."""
    if isinstance(e, Const):
        text = _const_text(e.value)
        if text.startswith("-"):
            return f"({text})", 5
        return text, 5
    if isinstance(e, Var):
        return e.name, 5
    if isinstance(e, Unary):
        if e.op == "neg":
            inner, prec = _fmt(e.arg)
            # -a^b already means -(a^b), so only looser operands need parens
            if prec < _PREC["neg"]:
                inner = f"({inner})"
            return "-" + inner, _PREC["neg"]
        inner, _ = _fmt(e.arg)
        return f"{e.op}({inner})", 5
    prec = _PREC[e.op]
    left, lp = _fmt(e.left)
    right, rp = _fmt(e.right)
    if e.op == "^":
        if lp <= prec:
            left = f"({left})"
        if rp < prec and rp != _PREC["neg"]:
            right = f"({right})"
        return f"{left}^{right}", prec
    if lp < prec:
        left = f"({left})"
    if rp <= prec:
        right = f"({right})"
    if prec == 1:
        return f"{left} {e.op} {right}", prec
    return f"{left}{e.op}{right}", prec


def to_string(e: Expr) -> str:
    """Render ``e`` as text that :func:`parse` maps back to the same tree."""
    return _fmt(e)[0]


# --------------------------------------------------------------------------
# symbolic differentiation

_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is(e: Expr, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def _add(a: Expr, b: Expr) -> Expr:
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    return _make_binary("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is(b, 0):
        return a
    if _is(a, 0):
        return _neg(b)
    return _make_binary("-", a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is(a, 0) or _is(b, 0):
        return _ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    return _make_binary("*", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is(a, 0):
        return _ZERO
    if _is(b, 1):
        return a
    return _make_binary("/", a, b)


def _neg(a: Expr) -> Expr:
    return _make_unary("neg", a)


def diff(e: Expr, var: str) -> Expr:
    """Exact derivative of a closed-form expression with respect to ``var``.

    Literal subexpressions are folded and multiplications by 0 or 1 are
    dropped; nothing else is simplified.
    """
    found = placeholders(e)
    if found:
        raise ExprError(f"cannot differentiate placeholders {sorted(found)}")
    return _diff(e, var)


def _diff(e: Expr, v: str) -> Expr:
    if isinstance(e, Const):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == v else _ZERO
    if isinstance(e, Unary):
        a = e.arg
        da = _diff(a, v)
        if _is(da, 0):
            return _ZERO
        op = e.op
        if op == "neg":
            return _neg(da)
        if op == "sin":
            outer = Unary("cos", a)
        elif op == "cos":
            outer = _neg(Unary("sin", a))
        elif op == "sinh":
            outer = Unary("cosh", a)
        elif op == "cosh":
            outer = Unary("sinh", a)
        elif op == "exp":
            outer = e
        elif op == "log":
            return _div(da, a)
        elif op == "sqrt":
            return _div(da, _mul(Const(2.0), e))
        elif op == "abs":
            outer = _div(a, e)
        else:  # pragma: no cover
            raise ExprError(f"no derivative rule for {op}")
        return _mul(outer, da)
    a, b = e.left, e.right
    da, db = _diff(a, v), _diff(b, v)
    if e.op == "+":
        return _add(da, db)
    if e.op == "-":
        return _sub(da, db)
    if e.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if e.op == "/":
        if _is(db, 0):
            return _div(da, b)
        return _div(_sub(_mul(da, b), _mul(a, db)), _make_binary("^", b, Const(2.0)))
    # power
    if _is(db, 0):
        if _is(da, 0):
            return _ZERO
        reduced = _make_binary("^", a, _sub(b, _ONE))
        return _mul(_mul(b, reduced), da)
    if _is(da, 0):
        return _mul(_mul(e, Unary("log", a)), db)
    return _mul(e, _add(_mul(db, Unary("log", a)), _div(_mul(b, da), a)))
