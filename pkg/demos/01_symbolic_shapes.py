"""Shapes as polynomials.

A decoder's KV cache grows every step, so its extents cannot be literal
numbers. Here they are integer polynomials over named symbols: N is the
number of tokens fed this pass, sumN the total the attention sees.
"""

from __future__ import annotations

from dynlite.graphir import GraphBuilder
from dynlite.symexpr import compare, div_exact, parse

N, sumN = parse("N"), parse("sumN")

# appending N new tokens to a past of sumN - N gives exactly sumN
print("past + new =", (sumN - N) + N)

# the usual memory questions: is one buffer at least as big as another?
print("N*4096 vs N*32*128 :", compare(N * 4096, N * 32 * 128).value)
print("N*4096 vs sumN*256 :", compare(N * 4096, sumN * 2 * 128).value)
print("N*4096 / 128       =", div_exact(N * 4096, 128))

# the same rules drive whole-graph derivation
b = GraphBuilder("demo")
b.symbol("N")
b.symbol("sumN")
past = b.input("past", "F32", ["sumN - N", 1, 2, 128])
new = b.input("new", "F32", ["N", 1, 2, 128])
b.mark_output(b.op("Concat", [past, new], {"axis": 0}, name="kv"))
x = b.input("x", "F32", [1, "N", 4096])
b.const("target", [1, -1, 32, 128])
b.mark_output(b.op("Reshape", [x, "target"], {"allowzero": 0}, name="heads"))
g = b.build()
for name in ("kv", "heads"):
    print(f"{name:6s}", [str(d) for d in g.tensors[name].shape])
