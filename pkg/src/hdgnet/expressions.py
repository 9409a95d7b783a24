"""Mini-language for function-valued configuration entries.

Grammar (lowest to highest binding)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom (('^' | '**') unary)?        # right associative
    atom   := NUMBER | 's' | 't' | 'pi' | FUNC '(' expr ')' | '(' expr ')'

Evaluation is vectorised: ``s`` and ``t`` may be floats or numpy arrays.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Const",
    "Neg",
    "BinOp",
    "Call",
    "ExpressionSyntaxError",
    "UnknownIdentifier",
    "DomainError",
    "UnresolvableFunction",
    "ResolvedFunction",
    "parse_expression",
    "evaluate",
    "to_source",
    "resolve",
    "register_builtin",
    "builtin_names",
]


class ExpressionSyntaxError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"at column {position}: {message}")
        self.position = position
        self.message = message


class UnknownIdentifier(ValueError):
    def __init__(self, name: str, position: int = -1):
        super().__init__(f"unknown identifier {name!r}")
        self.name = name
        self.position = position


class DomainError(ArithmeticError):
    pass


class UnresolvableFunction(ValueError):
    def __init__(self, text: str, cause: Exception | None = None):
        detail = f" ({cause})" if cause is not None else ""
        super().__init__(f"cannot resolve {text!r} as literal, expression or builtin{detail}")
        self.text = text
        self.cause = cause


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # 's' or 't'


@dataclass(frozen=True)
class Const:
    name: str  # only 'pi'


@dataclass(frozen=True)
class Neg:
    operand: "Expression"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expression"


Expression = Union[Num, Var, Const, Neg, BinOp, Call]

VARIABLES = ("s", "t")
CONSTANTS = {"pi": float(np.pi)}


def _sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise DomainError("sqrt of a negative number")
    return np.sqrt(x)


FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": _sqrt,
    "abs": np.abs,
}


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)

_NUMBER_ONLY = re.compile(r"^\s*[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\s*$")


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExpressionSyntaxError(pos, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            tok = m.group(kind)
            if kind == "op" and tok == "**":
                tok = "^"
            tokens.append(_Token(kind, tok, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind == "end":
            found = "end of input" if self.tok.kind == "end" else repr(self.tok.text)
            raise ExpressionSyntaxError(self.tok.pos, f"expected {text!r}, found {found}")
        self.advance()

    def parse(self) -> Expression:
        node = self.expr()
        if self.tok.kind != "end":
            raise ExpressionSyntaxError(self.tok.pos, f"unexpected token {self.tok.text!r}")
        return node

    def expr(self) -> Expression:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expression:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expression:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.advance()
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expression:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            name = tok.text
            if name in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(name, arg)
            if name in VARIABLES:
                return Var(name)
            if name in CONSTANTS:
                return Const(name)
            raise UnknownIdentifier(name, tok.pos)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExpressionSyntaxError(tok.pos, f"expected a value, found {found}")


def parse_expression(text: str) -> Expression:
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError(0, "empty expression")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(expr: Expression, s=0.0, t=0.0):
    """Evaluate ``expr``; returns a float for scalar input, an array otherwise."""
    out = _eval(expr, s, t)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _eval(node: Expression, s, t):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return s if node.name == "s" else t
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, s, t)
    if isinstance(node, Call):
        return FUNCTIONS[node.func](_eval(node.arg, s, t))
    a = _eval(node.left, s, t)
    b = _eval(node.right, s, t)
    op = node.op
    if op == "+":
        return np.add(a, b)
    if op == "-":
        return np.subtract(a, b)
    if op == "*":
        return np.multiply(a, b)
    if op == "/":
        if np.any(np.asarray(b) == 0):
            raise DomainError("division by zero")
        return np.divide(a, b)
    with np.errstate(all="ignore"):
        if np.any((np.asarray(a) == 0) & (np.asarray(b) < 0)):
            raise DomainError("zero raised to a negative power")
        out = np.power(np.asarray(a, dtype=float), b)
    if not np.all(np.isfinite(out)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b)):
        raise DomainError("power undefined for these operands")
    return out


# ---------------------------------------------------------------------------
# Printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _prec(node: Expression) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def to_source(node: Expression) -> str:
    """Render with the minimum parentheses needed to re-parse to the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        return f"-({inner})" if _prec(node.operand) < _PREC["neg"] else f"-{inner}"
    p = _PREC[node.op]
    left, right = to_source(node.left), to_source(node.right)
    if node.op == "^":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _PREC["neg"]:
            right = f"({right})"
    else:
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
    return f"{left} {node.op} {right}"


def free_variables(node: Expression) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, Call):
        return free_variables(node.arg)
    if isinstance(node, BinOp):
        return free_variables(node.left) | free_variables(node.right)
    return set()


# ---------------------------------------------------------------------------
# Resolution cascade

_BUILTINS: dict[str, Callable] = {}
_BUILTINS_LOCK = threading.Lock()


def register_builtin(name: str, fn: Callable) -> None:
    """Register ``fn(s, t)`` under ``name`` for the third resolution stage."""
    with _BUILTINS_LOCK:
        _BUILTINS[name] = fn


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)


register_builtin("zero", lambda s, t=0.0: np.zeros_like(np.asarray(s, dtype=float)) + 0.0)
register_builtin("one", lambda s, t=0.0: np.ones_like(np.asarray(s, dtype=float)))


@dataclass(frozen=True)
class ResolvedFunction:
    """A function of ``(s, t)`` produced by :func:`resolve`.

    ``source`` keeps the original config value so the function can be
    written back out.
    """

    kind: str  # 'literal' | 'symbolic' | 'builtin'
    source: Union[float, str]
    value: float = 0.0
    expr: Expression | None = None
    arity: int = 1

    def __call__(self, s, t=0.0):
        if self.kind == "literal":
            if np.ndim(s) == 0:
                return self.value
            return np.full(np.shape(s), self.value)
        if self.kind == "symbolic":
            out = evaluate(self.expr, s, t)
            if np.ndim(s) > 0 and np.ndim(out) == 0:
                return np.full(np.shape(s), out)
            return out
        out = _BUILTINS[self.source](s, t)
        return float(out) if np.ndim(out) == 0 else np.asarray(out, dtype=float)

    @property
    def is_zero(self) -> bool:
        return self.kind == "literal" and self.value == 0.0


def literal(value: float) -> ResolvedFunction:
    return ResolvedFunction("literal", float(value), value=float(value))


def resolve(config_value) -> ResolvedFunction:
    """literal -> symbolic expression -> registered builtin."""
    if isinstance(config_value, ResolvedFunction):
        return config_value
    if isinstance(config_value, bool):
        raise UnresolvableFunction(repr(config_value))
    if isinstance(config_value, (int, float)):
        return literal(float(config_value))
    if not isinstance(config_value, str):
        raise UnresolvableFunction(repr(config_value))
    text = config_value
    if _NUMBER_ONLY.match(text):
        return literal(float(text))
    try:
        expr = parse_expression(text)
    except (ExpressionSyntaxError, UnknownIdentifier) as err:
        key = text.strip()
        with _BUILTINS_LOCK:
            known = key in _BUILTINS
        if known:
            return ResolvedFunction("builtin", key, arity=2)
        raise UnresolvableFunction(text, err) from err
    arity = 2 if "t" in free_variables(expr) else 1
    return ResolvedFunction("symbolic", text, expr=expr, arity=arity)
