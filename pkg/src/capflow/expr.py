"""Arithmetic expressions for the prescribed data f(xi) and phi(xi, s).

Grammar (recursive descent)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := primary ('^' unary)?          # right-associative
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-2^2 == -4`` and ``2^-1 == 0.5``.
Evaluation is vectorised: bindings may be numpy arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ParseError",
    "EvalError",
    "parse",
    "evaluate",
    "to_source",
    "free_names",
    "FUNCTIONS",
]


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EvalError(ArithmeticError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (expression offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = 0


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = 0


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    pos: int = 0


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = 0


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    pos: int = 0


Expr = Union[Num, Var, Neg, BinOp, Call]

# name -> (arity, implementation); arity None means variadic (>= 1)
FUNCTIONS = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "pow": (2, np.power),
    "min": (None, None),
    "max": (None, None),
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(src: str):
    tokens = []
    pos = 0
    while True:
        while pos < len(src) and src[pos].isspace():
            pos += 1
        if pos >= len(src):
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {src[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, val, pos = self.peek()
        if val != text or kind != "op":
            shown = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {text!r}, found {shown}", pos)
        return self.take()

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}; expected operator or end of input", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.unary(), pos)
        return node

    def unary(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "op" and val in ("-", "+"):
            self.take()
            operand = self.unary()
            return Neg(operand, pos) if val == "-" else operand
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return BinOp("^", base, self.unary(), pos)
        return base

    def primary(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val), pos)
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", pos)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[val][0]
                if arity is not None and len(args) != arity:
                    raise ParseError(f"{val} takes {arity} argument(s), got {len(args)}", pos)
                return Call(val, tuple(args), pos)
            return Var(val, pos)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        shown = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"expected number, name or '(', found {shown}", pos)


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    Unknown variable names are accepted here and only rejected when evaluated
    without a binding.
    """
    return _Parser(source).parse()


def evaluate(expr: Expr, bindings: Mapping[str, object], strict: bool = True):
    """Evaluate ``expr`` in IEEE double precision; arrays broadcast.

    With ``strict=False`` domain errors and overflow propagate as inf/nan
    instead of raising (used for sampling sweeps).
    """
    with np.errstate(all="ignore"):
        return _eval(expr, bindings, strict)


def _eval(node: Expr, env, strict: bool):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}", node.pos) from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env, strict)

    def check(value):
        if strict and not np.all(np.isfinite(value)):
            raise EvalError("non-finite result", node.pos)
        return value

    if isinstance(node, BinOp):
        a = _eval(node.left, env, strict)
        b = _eval(node.right, env, strict)
        if node.op == "+":
            return check(np.add(a, b))
        if node.op == "-":
            return check(np.subtract(a, b))
        if node.op == "*":
            return check(np.multiply(a, b))
        if node.op == "/":
            if strict and np.any(np.asarray(b) == 0):
                raise EvalError("division by zero", node.pos)
            return check(np.divide(a, b))
        return check(np.power(np.asarray(a, dtype=float), b))
    if isinstance(node, Call):
        args = [_eval(a, env, strict) for a in node.args]
        if strict and node.func == "log" and np.any(np.asarray(args[0]) <= 0):
            raise EvalError("log of non-positive value", node.pos)
        if strict and node.func == "sqrt" and np.any(np.asarray(args[0]) < 0):
            raise EvalError("sqrt of negative value", node.pos)
        if node.func in ("min", "max"):
            reduce = np.minimum if node.func == "min" else np.maximum
            out = args[0]
            for a in args[1:]:
                out = reduce(out, a)
            return out
        return check(FUNCTIONS[node.func][1](*args))
    raise TypeError(f"not an expression node: {node!r}")


def to_source(node: Expr) -> str:
    """Fully parenthesised source text that parses back to an equivalent tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    return f"{node.func}({', '.join(to_source(a) for a in node.args)})"


def free_names(node: Expr) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return free_names(node.operand)
    if isinstance(node, BinOp):
        return free_names(node.left) | free_names(node.right)
    return set().union(*(free_names(a) for a in node.args))
