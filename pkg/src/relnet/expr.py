"""Limit-state expression language.

Small arithmetic language used to write limit-state functions in model files:

    g3 = "R1 + 2*R3 + 2*R4 + R5 - 5*H - 5*V"

Grammar (EBNF, also shipped in docs/grammar.ebnf):

    expression = term , { ( "+" | "-" ) , term } ;
    term       = unary , { ( "*" | "/" ) , unary } ;
    unary      = "-" , unary | primary ;
    primary    = number | identifier , [ call_args ] | "(" , expression , ")" ;
    call_args  = "(" , expression , { "," , expression } , ")" ;
    number     = digit , { digit } , [ "." , { digit } ] , [ exponent ] ;
    exponent   = ( "e" | "E" ) , [ "+" | "-" ] , digit , { digit } ;
    identifier = ( letter | "_" ) , { letter | digit | "_" } ;

Callable names: ``min``/``max`` (two or more arguments; ties resolve to the
first minimal/maximal argument so gradients stay deterministic), ``ln`` and
``exp`` (one argument).  Everything evaluates elementwise over numpy arrays,
so one parsed expression serves both scalar solves and vectorized batches.

Gradients come from forward-mode differentiation over the AST (dual numbers
with a dictionary of partials); no finite differences anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Expression",
    "ParseError",
    "EvalError",
    "parse",
]

_FUNCTIONS = {"min": (2, None), "max": (2, None), "ln": (1, 1), "exp": (1, 1)}


class ParseError(ValueError):
    """Syntax error with source position."""

    def __init__(self, message: str, source: str, pos: int):
        line = source.count("\n", 0, pos) + 1
        bol = source.rfind("\n", 0, pos) + 1
        col = pos - bol + 1
        snippet = source.splitlines()[line - 1] if source.splitlines() else ""
        super().__init__(f"{message} at line {line}, column {col}\n  {snippet}\n  {' ' * (col - 1)}^")
        self.line, self.column = line, col


class EvalError(ValueError):
    pass


# ---------- AST ----------

@dataclass(frozen=True)
class Node:
    def precedence(self) -> int:
        return 9


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Neg(Node):
    operand: Node

    def precedence(self):
        return 3


@dataclass(frozen=True)
class BinOp(Node):
    op: str  # one of + - * /
    left: Node
    right: Node

    def precedence(self):
        return 1 if self.op in "+-" else 2


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple[Node, ...]


# ---------- lexer ----------

@dataclass(frozen=True)
class _Token:
    kind: str  # num ident op end
    text: str
    pos: int


def _lex(source: str) -> list[_Token]:
    tokens, i, n = [], 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"malformed number {text!r}", source, i) from None
            tokens.append(_Token("num", text, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("ident", source[i:j], i))
            i = j
            continue
        if c in "+-*/(),":
            tokens.append(_Token("op", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", source, i)
    tokens.append(_Token("end", "", n))
    return tokens


# ---------- parser ----------

class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _lex(source)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.kind != "op" or tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}",
                             self.source, tok.pos)
        return self.advance()

    def parse(self) -> Node:
        node = self.expression()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"trailing input {tok.text!r}", self.source, tok.pos)
        return node

    def expression(self) -> Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Node:
        tok = self.advance()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "ident":
            if self.peek().kind == "op" and self.peek().text == "(":
                return self.call(tok)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            node = self.expression()
            self.expect(")")
            return node
        raise ParseError(f"expected a value, found {tok.text or 'end of input'!r}",
                         self.source, tok.pos)

    def call(self, name_tok: _Token) -> Node:
        name = name_tok.text
        if name not in _FUNCTIONS:
            raise ParseError(f"unknown function {name!r} (know {sorted(_FUNCTIONS)})",
                             self.source, name_tok.pos)
        self.expect("(")
        args = [self.expression()]
        while self.peek().kind == "op" and self.peek().text == ",":
            self.advance()
            args.append(self.expression())
        self.expect(")")
        lo, hi = _FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = f"exactly {lo}" if hi == lo else f"at least {lo}"
            raise ParseError(f"{name}() takes {want} argument(s), got {len(args)}",
                             self.source, name_tok.pos)
        return Call(name, tuple(args))


# ---------- evaluation ----------

def _format(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = _format(node.operand)
        if node.operand.precedence() < node.precedence():
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_format(a) for a in node.args)})"
    if isinstance(node, BinOp):
        lhs, rhs = _format(node.left), _format(node.right)
        p = node.precedence()
        if node.left.precedence() < p:
            lhs = f"({lhs})"
        # - and / do not right-associate
        rp = node.right.precedence()
        if rp < p or (rp == p and node.op in "-/"):
            rhs = f"({rhs})"
        return f"{lhs} {node.op} {rhs}"
    raise TypeError(f"unknown node {node!r}")


def _check_denominator(value):
    if np.ndim(value) == 0:
        if value == 0:
            raise EvalError("division by zero")
    elif np.any(value == 0.0):
        raise EvalError("division by zero in vectorized evaluation")


def _eval(node: Node, bindings) -> float | np.ndarray:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return bindings[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, bindings)
    if isinstance(node, BinOp):
        a, b = _eval(node.left, bindings), _eval(node.right, bindings)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        _check_denominator(b)
        return a / b
    if isinstance(node, Call):
        args = [_eval(a, bindings) for a in node.args]
        if node.func == "min":
            out = args[0]
            for a in args[1:]:
                out = np.minimum(out, a)
            return out
        if node.func == "max":
            out = args[0]
            for a in args[1:]:
                out = np.maximum(out, a)
            return out
        if node.func == "ln":
            return np.log(args[0])
        return np.exp(args[0])
    raise TypeError(f"unknown node {node!r}")


def _eval_dual(node: Node, bindings, wrt: frozenset):
    """Forward-mode evaluation: returns (value, {name: partial}).

    Partials are tracked only for names in ``wrt``; absent key means zero.
    """
    if isinstance(node, Num):
        return node.value, {}
    if isinstance(node, Var):
        try:
            v = bindings[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
        return v, ({node.name: 1.0} if node.name in wrt else {})
    if isinstance(node, Neg):
        v, d = _eval_dual(node.operand, bindings, wrt)
        return -v, {k: -g for k, g in d.items()}
    if isinstance(node, BinOp):
        av, ad = _eval_dual(node.left, bindings, wrt)
        bv, bd = _eval_dual(node.right, bindings, wrt)
        if node.op == "+":
            out = dict(ad)
            for k, g in bd.items():
                out[k] = out[k] + g if k in out else g
            return av + bv, out
        if node.op == "-":
            out = dict(ad)
            for k, g in bd.items():
                out[k] = out[k] - g if k in out else -g
            return av - bv, out
        if node.op == "*":
            out = {k: g * bv for k, g in ad.items()}
            for k, g in bd.items():
                out[k] = out[k] + g * av if k in out else g * av
            return av * bv, out
        _check_denominator(bv)
        val = av / bv
        out = {k: g / bv for k, g in ad.items()}
        for k, g in bd.items():
            out[k] = out[k] - val * g / bv if k in out else -val * g / bv
        return val, out
    if isinstance(node, Call):
        pairs = [_eval_dual(a, bindings, wrt) for a in node.args]
        if node.func in ("min", "max"):
            pick = np.minimum if node.func == "min" else np.maximum
            strict = np.less if node.func == "min" else np.greater
            val, deriv = pairs[0]
            for av, ad in pairs[1:]:
                # first argument wins ties, elementwise
                take_new = strict(av, val)
                keys = set(deriv) | set(ad)
                deriv = {k: np.where(take_new, ad.get(k, 0.0), deriv.get(k, 0.0))
                         for k in keys}
                val = pick(val, av)
            return val, deriv
        av, ad = pairs[0]
        if node.func == "ln":
            return np.log(av), {k: g / av for k, g in ad.items()}
        ev = np.exp(av)
        return ev, {k: g * ev for k, g in ad.items()}
    raise TypeError(f"unknown node {node!r}")


def _free_vars(node: Node, out: set):
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, Neg):
        _free_vars(node.operand, out)
    elif isinstance(node, BinOp):
        _free_vars(node.left, out)
        _free_vars(node.right, out)
    elif isinstance(node, Call):
        for a in node.args:
            _free_vars(a, out)


# ---------- public wrapper ----------

@dataclass(frozen=True)
class Expression:
    """A parsed expression; hashable, picklable, cheap to share."""

    root: Node
    source: str

    @property
    def free_vars(self) -> frozenset[str]:
        out: set[str] = set()
        _free_vars(self.root, out)
        return frozenset(out)

    def __call__(self, bindings: Mapping[str, float | np.ndarray]):
        return _eval(self.root, bindings)

    def gradient(self, bindings: Mapping[str, float | np.ndarray],
                 wrt: Iterable[str] | None = None):
        """Value and partials in one forward pass.

        Returns ``(value, {name: dvalue/dname})``; names absent from the
        result have zero partials.  ``wrt`` restricts which partials are
        carried (cheaper in hot loops).
        """
        names = frozenset(wrt) if wrt is not None else self.free_vars
        return _eval_dual(self.root, bindings, names)

    def to_string(self) -> str:
        return _format(self.root)

    def __str__(self):
        return self.to_string()


def parse(source: str) -> Expression:
    """Parse a limit-state expression; raises ParseError with position info."""
    if not isinstance(source, str):
        raise TypeError(f"expected str, got {type(source).__name__}")
    return Expression(_Parser(source).parse(), source)
