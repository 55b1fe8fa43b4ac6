"""Regenerate the test fixtures. Run from the repo root:

    python3 tests/fixtures/make_fixtures.py

Decoder fixtures come from the CLI model builder; the small hand-made graphs
exercise one compiler rule each.
"""

from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import numpy as np

from dynlite.graphir import GraphBuilder, load_graph, save_graph, save_weights
from dynlite.quantfp4 import pack_weight, quantize_weight

HERE = Path(__file__).parent


def cli(*args):
    subprocess.run([sys.executable, "-m", "dynlite", *args], check=True, stdout=subprocess.DEVNULL)


def decoders():
    cli("build-toy-model", "--layers", "1", "--ffn", "128", "--max-seq", "64",
        "--out-graph", str(HERE / "toy1.json"), "--out-weights", str(HERE / "toy1.lgw"))
    cli("build-toy-model", "--layers", "1", "--hidden", "32", "--heads", "2", "--head-dim", "16",
        "--ffn", "64", "--vocab", "31", "--max-seq", "64", "--layout", "llama", "--seed", "3",
        "--out-graph", str(HERE / "toy1_llama.json"), "--out-weights", str(HERE / "toy1_llama.lgw"))
    # golden: one normalize pass of the builder output
    g = load_graph(HERE / "toy1.json")
    (HERE / "toy1.golden.json").write_bytes(save_graph(g))


def adversarial():
    """A Shape node reads a MatMul output and its value is a graph output."""
    b = GraphBuilder("adversarial")
    b.symbol("N", 32)
    x = b.input("x", "F32", [1, "N", 8])
    w = b.weight("w", np.random.default_rng(1).standard_normal((8, 8)).astype(np.float32))
    y = b.op("MatMul", [x, w], name="y")
    b.mark_output(b.op("Add", [y, y], name="z"))
    b.mark_output(b.op("Shape", [y], name="y_shape", dtype="I64"))
    g = b.build()
    (HERE / "adversarial.json").write_bytes(save_graph(g))
    (HERE / "adversarial.lgw").write_bytes(save_weights(b.weights))


def two_chains():
    """Two independent Shape -> Gather -> Unsqueeze -> Concat chains, each feeding a Reshape."""
    b = GraphBuilder("two_chains")
    b.symbol("N", 64)
    b.symbol("M", 64)
    x = b.input("x", "F32", [1, "N", 32])
    z = b.input("z", "F32", [1, "M", 16])
    b.const("idx1", [1], shape=[])
    b.const("tail_x", [4, 8])
    b.const("tail_z", [2, 8])
    for src, tail in ((x, "tail_x"), (z, "tail_z")):
        s = b.op("Shape", [src], dtype="I64")
        n = b.op("Gather", [s, "idx1"], {"axis": 0}, dtype="I64")
        n1 = b.op("Unsqueeze", [n], {"axes": [0]}, dtype="I64")
        target = b.op("Concat", [n1, tail], {"axis": 0}, dtype="I64")
        r = b.op("Reshape", [src, target], {"allowzero": 0})
        b.mark_output(b.op("Silu", [r], name=f"{src}_out"))
    (HERE / "two_chains.json").write_bytes(save_graph(b.build()))


def layer_norm_mlp():
    """LayerNorm written out op by op, then a GELU/Mul chain: one norm and one elementwise fusion."""
    rng = np.random.default_rng(4)
    b = GraphBuilder("layer_norm_mlp")
    b.symbol("N", 16)
    x = b.input("x", "F32", [1, "N", 24])
    gamma = b.weight("gamma", (1 + 0.1 * rng.standard_normal(24)).astype(np.float32))
    beta = b.weight("beta", (0.1 * rng.standard_normal(24)).astype(np.float32))
    w = b.weight("w_up", (0.2 * rng.standard_normal((24, 24))).astype(np.float32))
    b.const("two", [2.0], dtype="F32", shape=[])
    b.const("eps", [1e-5], dtype="F32", shape=[])
    mu = b.op("ReduceMean", [x], {"axes": [-1], "keepdims": 1})
    xc = b.op("Sub", [x, mu])
    var = b.op("ReduceMean", [b.op("Pow", [xc, "two"])], {"axes": [-1], "keepdims": 1})
    den = b.op("Sqrt", [b.op("Add", [var, "eps"])])
    y = b.op("Add", [b.op("Mul", [b.op("Div", [xc, den]), gamma]), beta])
    h = b.op("MatMul", [y, w])
    b.mark_output(b.op("Add", [b.op("Mul", [b.op("Gelu", [h]), h]), x], name="out"))
    (HERE / "layer_norm_mlp.json").write_bytes(save_graph(b.build()))
    (HERE / "layer_norm_mlp.lgw").write_bytes(save_weights(b.weights))


def golden_lgq():
    w = (np.random.default_rng(11).standard_normal((320, 8)) * 0.05).astype(np.float32)
    (HERE / "golden_e0m4_g128.lgq").write_bytes(pack_weight(quantize_weight(w, "e0m4", 128, 1)))


if __name__ == "__main__":
    decoders()
    adversarial()
    two_chains()
    layer_norm_mlp()
    golden_lgq()
