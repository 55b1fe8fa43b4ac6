"""Integer polynomials over named dimension symbols.

A :class:`SymExpr` is the canonical form of expressions such as
``"batch * 16"`` or ``"sumN - N"``: a map from monomials to nonzero integer
coefficients. Structural equality coincides with polynomial equality, so shape
and size relations can be decided exactly wherever they are decidable at all.

Every symbol is assumed to range over the positive integers. ``compare`` relies
on that domain: a polynomial whose coefficients are all nonnegative is
nonnegative for every admissible binding.
"""

from __future__ import annotations

import enum
import numbers
import re
from typing import Iterable, Mapping, Union

from dynlite.errors import ExprSyntaxError, NotDivisible, UnboundSymbol, ZeroDivisor

__all__ = [
    "SymExpr",
    "CompareResult",
    "parse",
    "as_expr",
    "compare",
    "div_exact",
    "evaluate",
    "upper_bound",
    "is_symbol_name",
]

# A monomial is a sorted tuple of (symbol, power) pairs; () is the constant 1.
Monomial = tuple
ExprLike = Union["SymExpr", int, str]

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def is_symbol_name(name) -> bool:
    return isinstance(name, str) and _IDENT.match(name) is not None


def _mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    powers = dict(a)
    for sym, p in b:
        powers[sym] = powers.get(sym, 0) + p
    return tuple(sorted(powers.items()))


def _mono_div(a: Monomial, b: Monomial):
    """Return a / b if b divides a, else None."""
    powers = dict(a)
    for sym, p in b:
        have = powers.get(sym, 0)
        if have < p:
            return None
        if have == p:
            del powers[sym]
        else:
            powers[sym] = have - p
    return tuple(sorted(powers.items()))


def _degree(m: Monomial) -> int:
    return sum(p for _, p in m)


class SymExpr:
    """Immutable canonical integer polynomial."""

    __slots__ = ("_terms", "_hash")

    def __init__(self, terms: Mapping[Monomial, int] | Iterable = ()):
        if isinstance(terms, Mapping):
            items = terms.items()
        else:
            items = terms
        acc: dict = {}
        for mono, coeff in items:
            mono = tuple(sorted(mono))
            acc[mono] = acc.get(mono, 0) + int(coeff)
        self._terms = tuple(sorted((m, c) for m, c in acc.items() if c != 0))
        self._hash = None

    # -- constructors ----------------------------------------------------------

    @classmethod
    def const(cls, value: int) -> "SymExpr":
        return cls({(): value})

    @classmethod
    def symbol(cls, name: str) -> "SymExpr":
        if not is_symbol_name(name):
            raise ValueError(f"invalid symbol name {name!r}")
        return cls({((name, 1),): 1})

    # -- inspection --------------------------------------------------------------

    @property
    def terms(self) -> dict:
        return dict(self._terms)

    @property
    def symbols(self) -> frozenset:
        return frozenset(sym for mono, _ in self._terms for sym, _ in mono)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(not mono for mono, _ in self._terms)

    @property
    def constant_term(self) -> int:
        for mono, c in self._terms:
            if not mono:
                return c
        return 0

    def __int__(self) -> int:
        if not self.is_constant():
            raise TypeError(f"{self} is not a constant")
        return self.constant_term

    def __index__(self) -> int:
        return int(self)

    def coefficients(self) -> list:
        return [c for _, c in self._terms]

    def all_nonnegative(self) -> bool:
        return all(c >= 0 for _, c in self._terms)

    def all_nonpositive(self) -> bool:
        return all(c <= 0 for _, c in self._terms)

    # -- ring operations -----------------------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return other
        return SymExpr(list(self._terms) + list(other._terms))

    __radd__ = __add__

    def __neg__(self):
        return SymExpr([(m, -c) for m, c in self._terms])

    def __sub__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return other
        return other - self

    def __mul__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return other
        out = [
            (_mono_mul(ma, mb), ca * cb)
            for ma, ca in self._terms
            for mb, cb in other._terms
        ]
        return SymExpr(out)

    __rmul__ = __mul__

    def div_exact(self, other: ExprLike) -> "SymExpr":
        return div_exact(self, other)

    # -- evaluation ------------------------------------------------------------------

    def evaluate(self, bindings: Mapping[str, int]) -> int:
        total = 0
        for mono, coeff in self._terms:
            value = coeff
            for sym, p in mono:
                try:
                    value *= bindings[sym] ** p
                except KeyError:
                    raise UnboundSymbol(sym) from None
            total += value
        return total

    # -- equality / hashing -------------------------------------------------------------

    def __eq__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.constant_term) if self.is_constant() else hash(self._terms)
        return self._hash

    def __bool__(self):
        return not self.is_zero()

    # -- printing -------------------------------------------------------------------------

    def _ordered_terms(self):
        # highest degree first, positive before negative, constant last
        return sorted(self._terms, key=lambda t: (-_degree(t[0]), t[1] < 0, t[0]))

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        parts = []
        for i, (mono, coeff) in enumerate(self._ordered_terms()):
            factors = [sym for sym, p in mono for _ in range(p)]
            mag = abs(coeff)
            if not factors:
                body = str(mag)
            elif mag == 1:
                body = "*".join(factors)
            else:
                body = "*".join([str(mag)] + factors)
            if i == 0:
                parts.append(("-" if coeff < 0 else "") + body)
            else:
                parts.append((" - " if coeff < 0 else " + ") + body)
        return "".join(parts)

    def __repr__(self) -> str:
        return f"SymExpr({str(self)!r})"

    def to_json(self):
        """Plain int for constants, expression string otherwise."""
        return self.constant_term if self.is_constant() else str(self)


def _coerce(x):
    if isinstance(x, SymExpr):
        return x
    if isinstance(x, numbers.Integral) and not isinstance(x, bool):
        return SymExpr.const(int(x))
    return NotImplemented


def as_expr(x: ExprLike) -> SymExpr:
    """Coerce an int, expression string or SymExpr to SymExpr."""
    if isinstance(x, str):
        return parse(x)
    out = _coerce(x)
    if out is NotImplemented:
        raise TypeError(f"cannot convert {type(x).__name__} to SymExpr")
    return out


# -- parsing ------------------------------------------------------------------------------

_TOKEN = re.compile(r"(\d+)|([A-Za-z_][A-Za-z0-9_]*)|(\S)")


def _tokenize(text: str):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m.group(1) is not None:
            tokens.append(("int", int(m.group(1)), pos))
        elif m.group(2) is not None:
            tokens.append(("sym", m.group(2), pos))
        else:
            ch = m.group(3)
            if ch == "/":
                raise ExprSyntaxError("division is not allowed in expressions", pos)
            if ch not in "+-*()":
                raise ExprSyntaxError(f"unexpected character {ch!r}", pos)
            tokens.append(("op", ch, pos))
        pos = m.end()
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expr(self) -> SymExpr:
        out = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            _, op, _ = self.take()
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self) -> SymExpr:
        out = self.factor()
        while self.peek()[:2] == ("op", "*"):
            self.take()
            out = out * self.factor()
        return out

    def factor(self) -> SymExpr:
        kind, val, off = self.take()
        if kind == "int":
            return SymExpr.const(val)
        if kind == "sym":
            return SymExpr.symbol(val)
        if (kind, val) == ("op", "-"):
            return -self.factor()
        if (kind, val) == ("op", "("):
            inner = self.expr()
            k2, v2, off2 = self.take()
            if (k2, v2) != ("op", ")"):
                raise ExprSyntaxError("expected ')'", off2)
            return inner
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", off)


def parse(text: str) -> SymExpr:
    """Parse ``expr := term (('+'|'-') term)*`` over integers and symbols."""
    if not isinstance(text, str):
        raise TypeError("expression text must be a str")
    p = _Parser(text)
    out = p.expr()
    kind, val, off = p.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected {val!r}", off)
    return out


# -- division / comparison ----------------------------------------------------------------------


def _leading(e: SymExpr, variables):
    # graded lexicographic order over the given variable order
    def key(term):
        mono = dict(term[0])
        return (_degree(term[0]), tuple(mono.get(v, 0) for v in variables))

    return max(e._terms, key=key)


def div_exact(a: ExprLike, b: ExprLike) -> SymExpr:
    """Return q with ``a == q * b`` over integer polynomials.

    Raises NotDivisible when no such q exists, ZeroDivisor when b is zero.
    """
    a, b = as_expr(a), as_expr(b)
    if b.is_zero():
        raise ZeroDivisor("division by the zero polynomial")
    variables = sorted(a.symbols | b.symbols)
    lead_mono, lead_coeff = _leading(b, variables)
    quotient = []
    rem = a
    while not rem.is_zero():
        mono, coeff = _leading(rem, variables)
        qm = _mono_div(mono, lead_mono)
        if qm is None or coeff % lead_coeff:
            raise NotDivisible(f"{a} is not divisible by {b}")
        qc = coeff // lead_coeff
        quotient.append((qm, qc))
        rem = rem - SymExpr({qm: qc}) * b
    return SymExpr(quotient)


def evaluate(e: ExprLike, bindings: Mapping[str, int]) -> int:
    return as_expr(e).evaluate(bindings)


def upper_bound(e: ExprLike, maxima: Mapping[str, int]) -> int:
    """Largest value of e over bindings with 1 <= sym <= maxima[sym].

    Every monomial is nondecreasing in each symbol, so positive terms peak at
    the maxima and negative terms at 1.
    """
    e = as_expr(e)
    total = 0
    for mono, coeff in e._terms:
        value = coeff
        for sym, p in mono:
            if coeff > 0:
                try:
                    value *= maxima[sym] ** p
                except KeyError:
                    raise UnboundSymbol(sym) from None
        total += value
    return total


class CompareResult(enum.Enum):
    EQUAL = "Equal"
    PROVABLY_LE = "ProvablyLE"
    PROVABLY_GE = "ProvablyGE"
    UNKNOWN = "Unknown"


def _quotient_at_least_one(a: SymExpr, b: SymExpr):
    try:
        q = div_exact(a, b)
    except NotDivisible:
        return None
    # with every symbol >= 1 each monomial is >= 1, so a nonzero q with
    # nonnegative coefficients is >= 1
    if not q.is_zero() and q.all_nonnegative():
        return q
    return None


def _shift(e: SymExpr) -> SymExpr:
    """e with every symbol s replaced by s + 1, i.e. re-based so symbols range over >= 0."""
    out = SymExpr.const(0)
    for mono, coeff in e._terms:
        m = SymExpr.const(coeff)
        for sym, p in mono:
            for _ in range(p):
                m = m * (SymExpr.symbol(sym) + 1)
        out = out + m
    return out


def compare(a: ExprLike, b: ExprLike) -> CompareResult:
    """Sound but incomplete ordering of two polynomials over positive symbols."""
    a, b = as_expr(a), as_expr(b)
    diff = a - b
    if diff.is_zero():
        return CompareResult.EQUAL
    if diff.all_nonnegative():
        return CompareResult.PROVABLY_GE
    if diff.all_nonpositive():
        return CompareResult.PROVABLY_LE
    shifted = _shift(diff)
    if shifted.all_nonnegative():
        return CompareResult.PROVABLY_GE
    if shifted.all_nonpositive():
        return CompareResult.PROVABLY_LE
    # a = q*b with q >= 1 orders a and b by the sign of b
    if not b.is_zero():
        q = _quotient_at_least_one(a, b)
        if q is not None:
            if b.all_nonnegative():
                return CompareResult.PROVABLY_GE
            if b.all_nonpositive():
                return CompareResult.PROVABLY_LE
    if not a.is_zero():
        q = _quotient_at_least_one(b, a)
        if q is not None:
            if a.all_nonnegative():
                return CompareResult.PROVABLY_LE
            if a.all_nonpositive():
                return CompareResult.PROVABLY_GE
    return CompareResult.UNKNOWN
