"""One arena for every sequence length.

Buffers are reused only when a symbolic comparison proves the free block is
large enough for all bindings. Blocks are then sized once at the symbol
maxima, so nothing is reallocated while the sequence grows.
"""

from __future__ import annotations

from dynlite.graphir import ToyConfig, build_toy_decoder
from dynlite.memplan import plan_memory, verify_plan
from dynlite.shapeinfer import compile_plan

g, _ = build_toy_decoder(ToyConfig())
plan = compile_plan(g)
mp = plan_memory(plan.graph, plan.shape_program + plan.tensor_program, plan.shapes)
assert not verify_plan(mp)
print(f"{len(mp.assignment)} tensors share {len(mp.blocks)} blocks")
print(f"peak {mp.peak_bytes} bytes vs {mp.naive_bytes} without reuse ({mp.savings_ratio:.1%} saved)")
for b in sorted(mp.blocks, key=lambda b: -b.max_bytes)[:5]:
    print(f"  block {b.id:2d}: {str(b.size):>20s} -> {b.max_bytes} bytes")
