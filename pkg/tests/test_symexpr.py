from __future__ import annotations

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlite.errors import ExprSyntaxError, NotDivisible, UnboundSymbol, ZeroDivisor
from dynlite.symexpr import CompareResult, SymExpr, compare, div_exact, evaluate, parse, upper_bound

from conftest import SYMS, bindings, polys, random_poly

N = SymExpr.symbol("N")
SUM_N = SymExpr.symbol("sumN")


def to_sympy(e: SymExpr):
    return sympy.expand(sympy.sympify(str(e), locals={s: sympy.Symbol(s) for s in e.symbols}))


# -- examples --------------------------------------------------------------------------------------


def test_parse_examples():
    assert parse("batch * 16") == SymExpr.symbol("batch") * 16
    assert parse("sumN - N") == SUM_N - N
    assert parse("0").is_zero()
    assert parse("2*(N+1)") == 2 * N + 2
    assert parse(" 7 ") == SymExpr.const(7)


@pytest.mark.parametrize("text, offset", [("N +", 3), ("N / 2", 2), ("(N", 2), ("N @ 3", 2), ("", 0), ("3 N", 2)])
def test_parse_errors_carry_offset(text, offset):
    with pytest.raises(ExprSyntaxError) as info:
        parse(text)
    assert info.value.offset == offset


def test_arith_examples():
    assert (SUM_N - N) + N == SUM_N
    assert (N - N).is_zero()
    assert N * (32 * 128) == N * 4096
    for v in (1, 2, 7, 1000):
        assert (N * 4096).evaluate({"N": v}) == v * 4096


def test_str_is_canonical_and_reparses():
    e = parse("(a+2*b)*(a-b) - 3")
    assert parse(str(e)) == e
    assert str(parse(str(e))) == str(e)
    assert str(parse("b*a")) == str(parse("a*b"))


def test_div_examples():
    assert div_exact(N * 4096, 128) == N * 32
    assert div_exact(parse("a*a*b + a*b"), parse("a + 1")) == parse("a*b")
    assert div_exact(12, 4) == SymExpr.const(3)
    with pytest.raises(NotDivisible):
        div_exact(N * 4096 + 1, 128)
    with pytest.raises(NotDivisible):
        div_exact(7, 2)
    with pytest.raises(NotDivisible):
        div_exact(N, SUM_N)
    with pytest.raises(ZeroDivisor):
        div_exact(N, 0)


def test_evaluate_examples():
    assert evaluate("sumN - N", {"sumN": 10, "N": 3}) == 7
    with pytest.raises(UnboundSymbol):
        evaluate("sumN - N", {"N": 3})


def test_compare_examples():
    assert compare(N * 4096, N * 32 * 128) is CompareResult.EQUAL
    assert compare(N * 4096, SUM_N * 2 * 128) is CompareResult.UNKNOWN
    assert compare(SUM_N, SUM_N - N) is CompareResult.PROVABLY_GE
    assert compare(N, N * N) is CompareResult.PROVABLY_LE
    assert compare(N * 8 + 4, N * 2 + 1) is CompareResult.PROVABLY_GE  # via exact quotient 4


def test_compare_ge_holds_exhaustively():
    a, b = N * N + 3, N * 2
    assert compare(a, b) is CompareResult.PROVABLY_GE
    assert all(a.evaluate({"N": v}) >= b.evaluate({"N": v}) for v in range(1, 101))


def test_upper_bound():
    assert upper_bound("sumN - N", {"sumN": 256, "N": 256}) == 255
    assert upper_bound("N*4096", {"N": 256}) == 256 * 4096


# -- ring laws and homomorphism, checked against sympy -------------------------------------------


@settings(max_examples=150, deadline=None)
@given(polys, polys, polys)
def test_ring_laws(a, b, c):
    assert a + b == b + a
    assert a * b == b * a
    assert (a + b) + c == a + (b + c)
    assert (a * b) * c == a * (b * c)
    assert a * (b + c) == a * b + a * c
    assert (a - a).is_zero()
    assert a * 1 == a and a + 0 == a


@settings(max_examples=150, deadline=None)
@given(polys, polys)
def test_arith_matches_sympy(a, b):
    sa, sb = to_sympy(a), to_sympy(b)
    assert to_sympy(a + b) == sympy.expand(sa + sb)
    assert to_sympy(a - b) == sympy.expand(sa - sb)
    assert to_sympy(a * b) == sympy.expand(sa * sb)


@settings(max_examples=200, deadline=None)
@given(polys, polys, bindings)
def test_evaluate_homomorphism(a, b, env):
    ea, eb = a.evaluate(env), b.evaluate(env)
    assert (a + b).evaluate(env) == ea + eb
    assert (a - b).evaluate(env) == ea - eb
    assert (a * b).evaluate(env) == ea * eb
    assert a.evaluate(env) == int(to_sympy(a).subs(env)) if a.symbols else int(a) == ea


@settings(max_examples=200, deadline=None)
@given(polys, polys)
def test_div_exact_sound(a, b):
    if b.is_zero():
        return
    try:
        q = div_exact(a, b)
    except NotDivisible:
        # sympy agrees that no polynomial quotient with integer coefficients exists
        if a.is_zero():
            pytest.fail("zero is divisible by everything")
        sq, sr = sympy.div(to_sympy(a), to_sympy(b), *[sympy.Symbol(s) for s in SYMS])
        ok = sr == 0 and all(c.is_integer for c in sympy.Poly(sq, *[sympy.Symbol(s) for s in SYMS]).coeffs())
        assert not ok
        return
    assert q * b == a


@settings(max_examples=200, deadline=None)
@given(polys, polys.filter(lambda p: not p.is_zero()))
def test_div_exact_recovers_products(q, b):
    assert div_exact(q * b, b) == q


def test_compare_sound_randomized():
    rng = np.random.default_rng(2024)
    decided = 0
    for i in range(1000):
        b = random_poly(rng)
        kind = i % 4
        if kind == 0:
            a = b + random_poly(rng, nonneg=True)  # a >= b
        elif kind == 1:
            a = b * (random_poly(rng, nonneg=True) + 1)  # quotient >= 1
        elif kind == 2:
            a = b - random_poly(rng, nonneg=True)
        else:
            a = random_poly(rng)
        verdict = compare(a, b)
        if verdict is CompareResult.UNKNOWN:
            continue
        decided += 1
        for _ in range(100):
            env = {s: int(v) for s, v in zip(SYMS, rng.integers(1, 50, len(SYMS)))}
            va, vb = a.evaluate(env), b.evaluate(env)
            if verdict is CompareResult.EQUAL:
                assert va == vb, (a, b, env)
            elif verdict is CompareResult.PROVABLY_GE:
                assert va >= vb, (a, b, env)
            else:
                assert va <= vb, (a, b, env)
    assert decided > 500


@given(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6))
def test_constant_compare_is_complete(x, y):
    verdict = compare(x, y)
    want = CompareResult.EQUAL if x == y else CompareResult.PROVABLY_GE if x > y else CompareResult.PROVABLY_LE
    assert verdict is want


def test_more_division_examples():
    n4096 = N * 4096
    assert div_exact(n4096, N * 32 * 128) == SymExpr.const(1)
    with pytest.raises(NotDivisible):
        div_exact(n4096, SUM_N * 256)
    m = SymExpr.symbol("M")
    assert div_exact(N * m * 32, N * 8) == m * 4
    assert (m * 4) * (N * 8) == N * m * 32


def test_offset_is_provably_ge():
    a, b = N * 4096 + 64, N * 4096
    assert compare(a, b) is CompareResult.PROVABLY_GE
    assert all(a.evaluate({"N": v}) >= b.evaluate({"N": v}) for v in range(1, 101))
