from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from dynlite.graphir import ToyConfig, build_toy_decoder
from dynlite.symexpr import SymExpr

FIXTURES = Path(__file__).parent / "fixtures"
SYMS = ("a", "b", "c")


def poly_from_terms(terms) -> SymExpr:
    """Build a polynomial through the public arithmetic only (no internal term maps)."""
    out = SymExpr.const(0)
    for coeff, powers in terms:
        m = SymExpr.const(coeff)
        for sym, p in zip(SYMS, powers):
            for _ in range(p):
                m = m * SymExpr.symbol(sym)
        out = out + m
    return out


monomial = st.tuples(st.integers(-6, 6), st.tuples(*[st.integers(0, 2)] * len(SYMS)))
polys = st.lists(monomial, max_size=4).map(poly_from_terms)
bindings = st.fixed_dictionaries({s: st.integers(1, 40) for s in SYMS})


def random_poly(rng: np.random.Generator, max_terms=4, coeff=6, nonneg=False) -> SymExpr:
    terms = []
    for _ in range(rng.integers(0, max_terms + 1)):
        lo = 0 if nonneg else -coeff
        terms.append((int(rng.integers(lo, coeff + 1)), tuple(int(x) for x in rng.integers(0, 3, len(SYMS)))))
    return poly_from_terms(terms)


@pytest.fixture(scope="session")
def toy():
    return build_toy_decoder(ToyConfig())


@pytest.fixture(scope="session")
def toy_llama():
    return build_toy_decoder(ToyConfig(layout="llama"))


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


# -- acceptance summary ------------------------------------------------------------------------------

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
