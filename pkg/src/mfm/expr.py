"""Recursive-descent parser and numpy evaluator for dynamics expressions.

Grammar::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := number | var | func "(" expr ")" | "(" expr ")" | "-" factor
              | "mean" "(" int ")" | "sigma_p"
    var    := t | x<i> | y<i> | u<i> | v<i>
    func   := sin | cos | exp | tanh | abs

Unary minus is accepted on top of the base grammar. Conditionals are not part
of the language so every parsed expression is continuous.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh, "abs": np.abs}
VAR_KINDS = ("x", "y", "u", "v")


class ExprSyntaxError(SyntaxError):
    def __init__(self, msg: str, source: str, pos: int):
        line = source.count("\n", 0, pos) + 1
        col = pos - (source.rfind("\n", 0, pos) + 1) + 1
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line, self.column = line, col


class ExprEvalError(ArithmeticError):
    pass


# -- tree -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # "t", "x", "y", "u", "v"
    index: int = 0


@dataclass(frozen=True)
class Mean:
    index: int


@dataclass(frozen=True)
class SigmaP:
    pass


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


Node = Num | Var | Mean | SigmaP | Call | Neg | BinOp


# -- tokenizer --------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/()]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src: str) -> Iterator[_Tok]:
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if not m:
            j = pos
            while j < len(src) and src[j].isspace():
                j += 1
            raise ExprSyntaxError(f"unexpected character {src[j]!r}", src, j)
        kind = m.lastgroup
        yield _Tok(kind, m.group(kind), m.start(kind))
        pos = m.end()
    yield _Tok("end", "", len(src))


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = list(_tokenize(src))
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str):
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ExprSyntaxError(f"expected {text!r}, found {found!r}", self.src, self.tok.pos)
        return self.advance()

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.src, self.tok.pos)
        return node

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.text == "-":
            self.advance()
            return Neg(self.factor())
        if tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "name":
            self.advance()
            name = tok.text
            if name in FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(name, arg)
            if name == "mean":
                self.expect("(")
                idx = self.tok
                if idx.kind != "num" or not idx.text.isdigit():
                    raise ExprSyntaxError("mean() takes a coordinate index", self.src, idx.pos)
                self.advance()
                self.expect(")")
                return Mean(int(idx.text))
            if name == "sigma_p":
                return SigmaP()
            if name == "t":
                return Var("t")
            m = re.fullmatch(r"([xyuv])(\d+)", name)
            if m:
                return Var(m.group(1), int(m.group(2)))
            raise ExprSyntaxError(f"unknown identifier {name!r}", self.src, tok.pos)
        found = tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", self.src, tok.pos)


def parse_expr(source: str):
    return _Parser(source).parse()


def to_source(node) -> str:
    """Fully parenthesized source that re-parses to the identical tree."""
    match node:
        case Num(value):
            return repr(float(value)) if value >= 0 else f"(-{repr(float(-value))})"
        case Var("t"):
            return "t"
        case Var(kind, index):
            return f"{kind}{index}"
        case Mean(index):
            return f"mean({index})"
        case SigmaP():
            return "sigma_p"
        case Call(func, arg):
            return f"{func}({to_source(arg)})"
        case Neg(arg):
            return f"(-{to_source(arg)})"
        case BinOp(op, left, right):
            return f"({to_source(left)} {op} {to_source(right)})"
    raise TypeError(f"not an expression node: {node!r}")


def walk(node) -> Iterator:
    yield node
    match node:
        case Call(_, arg) | Neg(arg):
            yield from walk(arg)
        case BinOp(_, left, right):
            yield from walk(left)
            yield from walk(right)


def leaves(node) -> list:
    return [n for n in walk(node) if isinstance(n, (Num, Var, Mean, SigmaP))]


def variables(node) -> set[tuple[str, int]]:
    out = set()
    for n in walk(node):
        if isinstance(n, Var):
            out.add((n.kind, n.index))
        elif isinstance(n, Mean):
            out.add(("mean", n.index))
        elif isinstance(n, SigmaP):
            out.add(("sigma_p", 0))
    return out


def evaluate(node, env: dict):
    """Evaluate over numpy arrays.

    ``env`` maps "t" to a scalar or array, "x"/"y"/"u"/"v"/"mean" to arrays whose
    last axis is the coordinate, and "sigma_p" to a scalar or array. Leading
    axes broadcast.
    """
    with np.errstate(divide="raise", over="raise", invalid="raise", under="ignore"):
        try:
            out = _eval(node, env)
        except (FloatingPointError, ZeroDivisionError) as e:
            raise ExprEvalError(f"non-finite intermediate in {to_source(node)}: {e}") from None
    if not np.all(np.isfinite(out)):
        raise ExprEvalError(f"non-finite value in {to_source(node)}")
    return out


def _eval(node, env):
    match node:
        case Num(value):
            return value
        case Var("t"):
            return env["t"]
        case Var(kind, index):
            return env[kind][..., index]
        case Mean(index):
            return env["mean"][..., index]
        case SigmaP():
            return env["sigma_p"]
        case Call(func, arg):
            return FUNCS[func](_eval(arg, env))
        case Neg(arg):
            return -_eval(arg, env)
        case BinOp(op, left, right):
            a, b = _eval(left, env), _eval(right, env)
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if np.any(np.asarray(b) == 0):
                raise ZeroDivisionError("division by zero")
            return a / b
    raise TypeError(f"not an expression node: {node!r}")
