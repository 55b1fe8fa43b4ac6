"""Shape subgraphs vanish at compile time.

Real decoder graphs compute reshape targets with Shape -> Gather -> Concat
chains. Once every shape is a polynomial, those chains are known
symbolically and need not run at all. What is left is a single device
phase: one sync point per forward pass.
"""

from __future__ import annotations

from pathlib import Path

from dynlite.graphir import ToyConfig, build_toy_decoder, load_graph
from dynlite.shapeinfer import compile_plan, dump_shapes

g, _ = build_toy_decoder(ToyConfig())
shape_nodes = sum(n.op == "Shape" for n in g.nodes)
plan = compile_plan(g)
print(f"toy decoder: {len(g.nodes)} nodes, {shape_nodes} Shape nodes")
print("summary:", plan.summary())
print("folded shape ops:", len(plan.folded))
for line in dump_shapes(plan)[:6]:
    print("  ", line)

# a graph that genuinely needs a shape value after device work pays a second sync
adv = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "adversarial.json"
if adv.exists():
    print("adversarial fixture:", compile_plan(load_graph(adv)).summary())
