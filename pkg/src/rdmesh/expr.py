"""Propensity expression language: parsing, sign analysis and compilation.

Grammar (usual precedence, ``^`` binds tightest and is right-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

Functions: ``heaviside(e)``, ``min(a, b, ...)``, ``max(a, b, ...)`` and
``massaction(c, S1, S2, ...)``.  Every propensity is checked at parse
time: each divisor must be provably positive and the whole expression
provably non-negative, for any non-negative species counts.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

GEOMETRY_NAMES = ("vol", "cx", "cy", "rho")
FUNCTIONS = ("heaviside", "min", "max", "massaction")


class ExprError(ValueError):
    """Malformed expression or a sign condition that cannot be proven."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def tokenize(text: str) -> list:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExprError(f"unexpected character {text[pos]!r} at column {pos + 1}")
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    out.append(("end", "", len(text) + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None):
        tok = self.toks[self.i]
        if value is not None and tok[1] != value:
            raise ExprError(f"expected {value!r} at column {tok[2]}, found {tok[1] or 'end'!r}")
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            tok = self.peek()
            raise ExprError(f"unexpected {tok[1]!r} at column {tok[2]}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        if self.peek()[1] == "+" and self.peek()[0] == "op":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, value, col = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise ExprError(f"unknown function {value!r} at column {col}")
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.take(")")
                return Call(value, tuple(args))
            return Name(value)
        if value == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ExprError(f"unexpected {value or 'end'!r} at column {col}")


def parse_expr(text: str):
    return _Parser(text).parse()


# -- sign analysis ----------------------------------------------------------

POS, NONNEG, ANY = "pos", "nonneg", "any"


@dataclass(frozen=True)
class Scope:
    """Name resolution for one model: species order, constants, named subexpressions."""

    species: Mapping[str, int]
    constants: Mapping[str, float]
    lets: Mapping[str, object]

    def kind(self, name: str) -> str:
        if name in self.species:
            return "species"
        if name in self.constants:
            return "const"
        if name in self.lets:
            return "let"
        if name in GEOMETRY_NAMES:
            return "geometry"
        raise ExprError(f"unknown identifier {name!r}")


def _sign_of_value(v: float) -> str:
    if not math.isfinite(v):
        raise ExprError("non-finite constant")
    if v > 0:
        return POS
    if v == 0:
        return NONNEG
    return ANY


def const_value(node, scope: Scope):
    """Value of a constant subexpression, or ``None`` if it depends on the state."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        kind = scope.kind(node.name)
        if kind == "const":
            return float(scope.constants[node.name])
        if kind == "let":
            return const_value(scope.lets[node.name], scope)
        return None
    if isinstance(node, Neg):
        v = const_value(node.arg, scope)
        return None if v is None else -v
    if isinstance(node, BinOp):
        a, b = const_value(node.left, scope), const_value(node.right, scope)
        if a is None or b is None:
            return None
        try:
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            if node.op == "/":
                return a / b
            return a**b
        except (ZeroDivisionError, OverflowError, ValueError):
            raise ExprError("constant subexpression is not finite") from None
    if isinstance(node, Call):
        if node.func == "massaction":
            return None
        vals = [const_value(a, scope) for a in node.args]
        if any(v is None for v in vals):
            return None
        if node.func == "heaviside":
            return 1.0 if vals[0] >= 0 else 0.0
        return min(vals) if node.func == "min" else max(vals)
    raise TypeError(node)


def sign(node, scope: Scope) -> str:
    """Conservative sign of ``node`` over non-negative species counts."""
    v = const_value(node, scope)
    if v is not None:
        return _sign_of_value(v)
    if isinstance(node, Name):
        kind = scope.kind(node.name)
        if kind == "species":
            return NONNEG
        if kind == "let":
            return sign(scope.lets[node.name], scope)
        return {"vol": POS, "rho": NONNEG}.get(node.name, ANY)
    if isinstance(node, Neg):
        return ANY
    if isinstance(node, BinOp):
        a = sign(node.left, scope)
        if node.op == "-":
            bv = const_value(node.right, scope)
            if bv is not None and bv <= 0:
                return POS if (a == POS or bv < 0) and a != ANY else a
            return ANY
        b = sign(node.right, scope)
        if node.op == "+":
            if ANY in (a, b):
                return ANY
            return POS if POS in (a, b) else NONNEG
        if node.op == "*":
            if ANY in (a, b):
                return ANY
            return POS if a == b == POS else NONNEG
        if node.op == "/":
            if b != POS:
                raise ExprError(f"denominator not provably positive: {to_text(node.right)}")
            return a
        # power
        if a == POS:
            return POS
        ev = const_value(node.right, scope)
        if ev is None or ev < 0:
            raise ExprError(f"power of a possibly non-positive base needs a constant exponent >= 0: {to_text(node)}")
        if a == NONNEG:
            return POS if ev == 0 else NONNEG
        if ev == int(ev) and int(ev) % 2 == 0:
            return NONNEG
        if ev != int(ev):
            raise ExprError(f"fractional power of a possibly negative base: {to_text(node)}")
        return ANY
    if isinstance(node, Call):
        if node.func == "heaviside":
            if len(node.args) != 1:
                raise ExprError("heaviside takes one argument")
            sign(node.args[0], scope)
            return NONNEG
        if node.func == "massaction":
            _massaction_parts(node, scope)
            return NONNEG
        signs = [sign(a, scope) for a in node.args]
        if node.func == "min":
            if ANY in signs:
                return ANY
            return POS if all(s == POS for s in signs) else NONNEG
        if POS in signs:
            return POS
        return NONNEG if NONNEG in signs else ANY
    raise TypeError(node)


def _massaction_parts(node: Call, scope: Scope):
    if not node.args:
        raise ExprError("massaction needs a rate constant")
    c = const_value(node.args[0], scope)
    if c is None:
        raise ExprError("massaction rate must be a constant expression")
    if c < 0:
        raise ExprError("massaction rate must be non-negative")
    counts: dict = {}
    for a in node.args[1:]:
        if not isinstance(a, Name) or a.name not in scope.species:
            raise ExprError(f"massaction reactants must be species names, got {to_text(a)}")
        counts[a.name] = counts.get(a.name, 0) + 1
    return c, counts


def check_propensity(node, scope: Scope) -> None:
    if sign(node, scope) == ANY:
        raise ExprError(f"propensity not provably non-negative: {to_text(node)}")


def species_used(node, scope: Scope) -> set:
    """Species names the expression reads."""
    if isinstance(node, Num):
        return set()
    if isinstance(node, Name):
        kind = scope.kind(node.name)
        if kind == "species":
            return {node.name}
        if kind == "let":
            return species_used(scope.lets[node.name], scope)
        return set()
    if isinstance(node, Neg):
        return species_used(node.arg, scope)
    if isinstance(node, BinOp):
        return species_used(node.left, scope) | species_used(node.right, scope)
    out = set()
    for a in node.args:
        out |= species_used(a, scope)
    return out


# -- printing and compilation -----------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_text(node, parent: int = 0) -> str:
    """Re-parseable infix text."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Name):
        return node.name
    if isinstance(node, Neg):
        s = "-" + to_text(node.arg, 3)
        return f"({s})" if parent >= 3 else s
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        if node.op == "^":
            s = f"{to_text(node.left, 5)}^{to_text(node.right, 4)}"
        else:
            s = f"{to_text(node.left, p)} {node.op} {to_text(node.right, p + 1)}"
        return f"({s})" if p < parent else s
    return f"{node.func}({', '.join(to_text(a) for a in node.args)})"


def _py(node, scope: Scope) -> str:
    v = const_value(node, scope)
    if v is not None:
        return f"({v!r})"
    if isinstance(node, Name):
        kind = scope.kind(node.name)
        if kind == "species":
            return f"x[{scope.species[node.name]}][k]"
        if kind == "let":
            return f"({_py(scope.lets[node.name], scope)})"
        return f"_{node.name}[k]"
    if isinstance(node, Neg):
        return f"(-{_py(node.arg, scope)})"
    if isinstance(node, BinOp):
        op = "**" if node.op == "^" else node.op
        return f"({_py(node.left, scope)} {op} {_py(node.right, scope)})"
    if node.func == "heaviside":
        return f"(1.0 if {_py(node.args[0], scope)} >= 0 else 0.0)"
    if node.func in ("min", "max"):
        return f"{node.func}({', '.join(_py(a, scope) for a in node.args)})"
    c, counts = _massaction_parts(node, scope)
    order = sum(counts.values())
    factors = [repr(c)]
    for name, m in counts.items():
        xi = f"x[{scope.species[name]}][k]"
        if m == 1:
            factors.append(xi)
        else:
            ff = "*".join(f"({xi} - {float(j)!r})" if j else xi for j in range(m))
            factors.append(f"max({ff}, 0.0) / {float(math.factorial(m))!r}")
    if order == 0:
        factors.append("_vol[k]")
    elif order > 1:
        factors.append(f"1.0 / _vol[k] ** {order - 1}")
    return "(" + " * ".join(factors) + ")"


def compile_propensity(node, scope: Scope, vol, cx, cy, rho) -> Callable:
    """Build ``f(x, k)`` evaluating the propensity in cell ``k``.

    ``x`` is indexed species-major, ``x[i][k]``; the geometry sequences
    are captured by the closure.
    """
    src = (
        "def _make(_vol, _cx, _cy, _rho):\n"
        f"    def propensity(x, k):\n        return {_py(node, scope)}\n"
        "    return propensity\n"
    )
    ns: dict = {}
    exec(compile(src, "<propensity>", "exec"), ns)
    fn = ns["_make"](vol, cx, cy, rho)
    fn.source = src
    return fn
