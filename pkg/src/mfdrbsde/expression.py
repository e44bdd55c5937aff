"""Tiny arithmetic expression language for coefficient functions.

Grammar (lowest to highest precedence)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | "+" unary | power
    power   := primary ("^" unary)?          # right associative
    primary := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Variables are ``t, b, y, ybar, z``; the constants ``inf`` and ``pi`` are
predefined.  Evaluation broadcasts over numpy arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

VARIABLES = frozenset({"t", "b", "y", "ybar", "z"})
CONSTANTS = {"inf": math.inf, "pi": math.pi}
FUNCTIONS = {
    "min": 2,
    "max": 2,
    "abs": 1,
    "exp": 1,
    "sin": 1,
    "cos": 1,
    "sqrt": 1,
    "pos": 1,
    "neg": 1,
}


class ExpressionError(ValueError):
    pass


class ParseError(ExpressionError):
    def __init__(self, message: str, offset: int, source: str):
        super().__init__(f"{message} at offset {offset}: {source!r}")
        self.offset = offset
        self.source = source


class EvaluationError(ExpressionError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    pos = 0
    tokens = []
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            offset = pos + len(src[pos:]) - len(src[pos:].lstrip())
            raise ParseError(f"unexpected character {src[offset]!r}", offset, src)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message, tok=None):
        tok = tok or self.peek()
        raise ParseError(message, tok[2], self.src)

    def expect(self, value):
        tok = self.peek()
        if tok[1] != value or tok[0] != "op":
            self.fail(f"expected {value!r}")
        return self.advance()

    def parse(self):
        if self.peek()[0] == "end":
            self.fail("empty expression")
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.advance()
            return Neg(self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def primary(self):
        tok = self.peek()
        kind, text, _ = tok
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "name":
            self.advance()
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    self.fail(f"unknown function {text!r}", tok)
                self.advance()
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.advance()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    self.fail(f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", tok)
                return Call(text, tuple(args))
            if text in VARIABLES:
                return Var(text)
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            self.fail(f"unknown identifier {text!r}", tok)
        if kind == "op" and text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            self.fail("unexpected end of input")
        self.fail(f"unexpected {text!r}")


class Expression:
    """Parsed expression with numpy evaluation and forward derivatives."""

    def __init__(self, tree, source: str | None = None):
        self.tree = tree
        self.source = source if source is not None else to_source(tree)
        self.variables = frozenset(_variables(tree))

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and self.tree == other.tree

    def __hash__(self):
        return hash(self.tree)

    def __call__(self, **env):
        return self.evaluate(env)

    def evaluate(self, env: dict):
        with np.errstate(all="ignore"):
            return _eval(self.tree, env)

    def derivative(self, var: str, env: dict):
        """Value and partial derivative with respect to ``var``."""
        with np.errstate(all="ignore"):
            return _deriv(self.tree, var, env)

    @property
    def constant_value(self) -> float | None:
        """The value if the tree is a (possibly negated) literal."""
        node, sign = self.tree, 1.0
        while isinstance(node, Neg):
            node, sign = node.operand, -sign
        return sign * node.value if isinstance(node, Num) else None

    def check_variables(self, allowed, slot: str = "expression"):
        extra = self.variables - set(allowed)
        if extra:
            raise ExpressionError(
                f"{slot} may only use {sorted(allowed)}, found {sorted(extra)} in {self.source!r}"
            )


def parse_expression(src: str, allowed=None, slot: str = "expression") -> Expression:
    if not isinstance(src, str):
        raise ExpressionError(f"{slot} must be a string, got {type(src).__name__}")
    expr = Expression(_Parser(src).parse(), src)
    if allowed is not None:
        expr.check_variables(allowed, slot)
    return expr


def _variables(node):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _variables(node.operand)
    elif isinstance(node, BinOp):
        yield from _variables(node.left)
        yield from _variables(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _variables(a)


def to_source(node) -> str:
    """Fully parenthesised source text; reparses to an identical tree."""
    if isinstance(node, Num):
        if math.isinf(node.value):
            return "inf" if node.value > 0 else "(-inf)"
        text = repr(float(node.value))
        return text if node.value >= 0 else f"({text})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_source(a) for a in node.args)})"
    raise TypeError(node)


def _lookup(name, env):
    try:
        return env[name]
    except KeyError:
        raise EvaluationError(f"variable {name!r} not bound") from None


def _check_div(den):
    if np.any(np.asarray(den) == 0):
        raise EvaluationError("division by zero")


def _check_sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise EvaluationError("square root of a negative number")


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return _lookup(node.name, env)
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            _check_div(b)
            return a / b
        return np.power(a, b)
    name, args = node.name, [_eval(a, env) for a in node.args]
    if name == "min":
        return np.minimum(*args)
    if name == "max":
        return np.maximum(*args)
    if name == "abs":
        return np.abs(args[0])
    if name == "exp":
        return np.exp(args[0])
    if name == "sin":
        return np.sin(args[0])
    if name == "cos":
        return np.cos(args[0])
    if name == "sqrt":
        _check_sqrt(args[0])
        return np.sqrt(args[0])
    if name == "pos":
        return np.maximum(args[0], 0.0)
    return np.maximum(-np.asarray(args[0]), 0.0)


def _deriv(node, var, env):
    # forward mode: returns (value, d value / d var); kinks take the one-sided
    # derivative selected by the comparison below
    if isinstance(node, Num):
        return node.value, 0.0
    if isinstance(node, Var):
        return _lookup(node.name, env), (1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        v, d = _deriv(node.operand, var, env)
        return -v, -d
    if isinstance(node, BinOp):
        a, da = _deriv(node.left, var, env)
        b, db = _deriv(node.right, var, env)
        if node.op == "+":
            return a + b, da + db
        if node.op == "-":
            return a - b, da - db
        if node.op == "*":
            return a * b, da * b + a * db
        if node.op == "/":
            _check_div(b)
            return a / b, (da * b - a * db) / (b * b)
        val = np.power(a, b)
        d = b * np.power(a, b - 1.0) * da
        if np.any(np.asarray(db) != 0):
            d = d + val * np.log(a) * db
        return val, d
    pairs = [_deriv(a, var, env) for a in node.args]
    name = node.name
    if name in ("min", "max"):
        (a, da), (b, db) = pairs
        pick_a = (a <= b) if name == "min" else (a >= b)
        return np.where(pick_a, a, b), np.where(pick_a, da, db)
    (x, dx), = pairs
    if name == "abs":
        return np.abs(x), np.sign(x) * dx
    if name == "exp":
        e = np.exp(x)
        return e, e * dx
    if name == "sin":
        return np.sin(x), np.cos(x) * dx
    if name == "cos":
        return np.cos(x), -np.sin(x) * dx
    if name == "sqrt":
        _check_sqrt(x)
        r = np.sqrt(x)
        return r, np.where(r > 0, 0.5 * dx / np.where(r > 0, r, 1.0), 0.0)
    if name == "pos":
        return np.maximum(x, 0.0), np.where(np.asarray(x) > 0, dx, 0.0)
    return np.maximum(-np.asarray(x), 0.0), np.where(np.asarray(x) < 0, -np.asarray(dx), 0.0)
