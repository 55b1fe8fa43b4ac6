from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlite.errors import (
    BroadcastError,
    ExceedsPreallocation,
    NonDivisibleReshape,
    NonPositiveDim,
    RankMismatch,
    UnboundSymbol,
    UnsupportedDynamicAttr,
)
from dynlite.graphir import GraphBuilder, load_graph, load_weights
from dynlite.refexec import max_rel_diff, run_graph, run_plan
from dynlite.shapeinfer import (
    NodeClass,
    bind_symbols,
    broadcast_shapes,
    classify,
    compile_plan,
    derive_shapes,
    dump_shapes,
    fuse,
    fuse_with_report,
    parse_program,
)
from dynlite.symexpr import SymExpr, parse

from conftest import FIXTURES

GRAPHS = ["toy1", "toy1_llama", "adversarial", "two_chains", "layer_norm_mlp"]


def load(name):
    g = load_graph(FIXTURES / f"{name}.json")
    lgw = FIXTURES / f"{name}.lgw"
    return g, (load_weights(lgw) if lgw.exists() else {})


def dims(*xs):
    return tuple(parse(x) if isinstance(x, str) else SymExpr.const(x) for x in xs)


def random_bindings(g, rng):
    """Positive bindings; decoder graphs also need sumN > N so the past cache is non-empty."""
    out = {}
    for sym, mx in g.symbols.items():
        out[sym] = int(rng.integers(1, min(mx or 32, 32) + 1))
    if "sumN" in out:
        out["N"] = int(rng.integers(1, 16))
        out["sumN"] = out["N"] + int(rng.integers(1, 16))
    return out


def random_feeds(g, env, rng):
    feeds = {}
    for name in g.inputs:
        t = g.tensors[name]
        shape = tuple(d.evaluate(env) for d in t.shape)
        if t.dtype == "I64":
            feeds[name] = rng.integers(0, 8, shape).astype(np.int64)
        else:
            feeds[name] = rng.standard_normal(shape).astype(np.float32)
    return feeds


# -- worked examples ----------------------------------------------------------------------------------


def test_concat_of_past_and_new_cache():
    b = GraphBuilder()
    b.symbol("N")
    b.symbol("sumN")
    past = b.input("past", "F32", ["sumN - N", 1, 2, 128])
    new = b.input("new", "F32", ["N", 1, 2, 128])
    out = b.op("Concat", [past, new], {"axis": 0}, name="full")
    b.mark_output(out)
    g = b.build()
    assert g.tensors["full"].shape == dims("sumN", 1, 2, 128)


def test_reshape_with_minus_one():
    b = GraphBuilder()
    b.symbol("N")
    x = b.input("x", "F32", [1, "N", 4096])
    b.const("target", [1, -1, 32, 128])
    b.mark_output(b.op("Reshape", [x, "target"], {"allowzero": 0}, name="y"))
    g = b.build()
    assert g.tensors["y"].shape == dims(1, "N", 32, 128)


def _reshape_graph(src, target):
    b = GraphBuilder()
    b.symbol("N")
    x = b.input("x", "F32", src)
    b.const("target", target)
    b.mark_output(b.op("Reshape", [x, "target"], {"allowzero": 0}, name="y"))
    return b


def test_reshape_zero_copies_and_errors():
    g = _reshape_graph([2, "N", 6], [0, 0, 3, 2]).build()
    assert g.tensors["y"].shape == dims(2, "N", 3, 2)
    with pytest.raises(NonDivisibleReshape):
        _reshape_graph([1, "N", 4095], [1, -1, 32, 128]).build()
    with pytest.raises(NonDivisibleReshape):
        _reshape_graph([1, "N", 8], [-1, -1]).build()


def test_shape_errors():
    b = GraphBuilder()
    b.symbol("N")
    x = b.input("x", "F32", ["N", 3])
    y = b.input("y", "F32", ["N", 4])
    b.mark_output(b.op("Add", [x, y]))
    with pytest.raises(BroadcastError):
        b.build()
    b = GraphBuilder()
    b.symbol("N")
    x = b.input("x", "F32", ["N", 3])
    y = b.input("y", "F32", ["N", 3, 1])
    b.mark_output(b.op("Concat", [x, y], {"axis": 0}))
    with pytest.raises(RankMismatch):
        b.build()
    b = GraphBuilder()
    b.symbol("N")
    x = b.input("x", "F32", ["N", 3])
    b.mark_output(b.op("Slice", [x], {"starts": [0], "ends": [4], "axes": [0]}))
    with pytest.raises(UnsupportedDynamicAttr):
        b.build()


def test_broadcast_shapes():
    assert broadcast_shapes(dims(1, "N", 1), dims(4, 1, 8)) == dims(4, "N", 8)
    assert broadcast_shapes(dims("N"), dims(3, 1)) == dims(3, "N")
    with pytest.raises(BroadcastError):
        broadcast_shapes(dims("N"), dims("M"))


# -- derivation commutes with evaluation; numpy execution is the oracle -------------------------------


@pytest.mark.parametrize("name", GRAPHS)
def test_derivation_commutes_with_binding(name):
    g, w = load(name)
    symbolic = derive_shapes(g)
    rng = np.random.default_rng(abs(hash(name)) % 1000)
    for _ in range(50):
        env = random_bindings(g, rng)
        concrete = derive_shapes(g, bindings=env)
        for t, shape in symbolic.shapes.items():
            want = tuple(int(d) for d in concrete.shapes[t])
            assert tuple(d.evaluate(env) for d in shape) == want, t


@pytest.mark.parametrize("name", GRAPHS)
def test_derived_shapes_match_numpy_execution(name):
    g, w = load(name)
    symbolic = derive_shapes(g)
    rng = np.random.default_rng(1)
    for _ in range(5):
        env = random_bindings(g, rng)
        actual = run_graph(g, w, random_feeds(g, env, rng))
        for t, shape in symbolic.shapes.items():
            assert tuple(d.evaluate(env) for d in shape) == actual[t].shape, t
        for t, vec in symbolic.values.items():
            assert [d.evaluate(env) for d in vec] == actual[t].reshape(-1).tolist(), t


# -- classification -----------------------------------------------------------------------------------


def random_topo_order(g, rng):
    prod = g.producers()
    deps = {n.id: {prod[x].id for x in n.inputs if x in prod} for n in g.nodes}
    by_id = {n.id: n for n in g.nodes}
    done, order = set(), []
    while len(order) < len(g.nodes):
        ready = [i for i in deps if i not in done and deps[i] <= done]
        pick = ready[rng.integers(len(ready))]
        done.add(pick)
        order.append(by_id[pick])
    return order


@pytest.mark.parametrize("name", GRAPHS)
def test_classification_order_independent(name):
    g, _ = load(name)
    base = classify(g)
    rng = np.random.default_rng(9)
    for _ in range(20):
        assert classify(g, order=random_topo_order(g, rng)) == base
        shuffled = list(g.nodes)
        rng.shuffle(shuffled)
        assert classify(g, order=shuffled) == base


def test_classification_rule():
    g, _ = load("two_chains")
    cls = {n.op + str(n.id): c for n, c in ((n, classify(g)[n.id]) for n in g.nodes)}
    assert [k for k, c in cls.items() if c is NodeClass.SHAPE] == [
        "Shape0", "Gather1", "Unsqueeze2", "Concat3", "Shape6", "Gather7", "Unsqueeze8", "Concat9"]
    # a node fed only by constants stays tensor-computing
    b = GraphBuilder()
    b.const("a", [1, 2])
    b.const("b", [3, 4])
    b.mark_output(b.op("Add", ["a", "b"], dtype="I64", kind="Activation"))
    g = b.build()
    assert classify(g)[0] is NodeClass.TENSOR


# -- folding and scheduling -------------------------------------------------------------------------


def test_toy_decoder_plan(toy):
    plan = compile_plan(toy[0])
    assert plan.shape_ops_retained == 0
    assert plan.sync_points == 1
    assert len(plan.folded) == 2 * 4


def test_two_chains_fold_completely():
    plan = compile_plan(load("two_chains")[0])
    assert plan.shape_ops_retained == 0 and len(plan.folded) == 8 and plan.sync_points == 1


def test_adversarial_needs_a_second_sync():
    plan = compile_plan(load("adversarial")[0])
    assert plan.sync_points == 2
    assert [n.op for n in plan.hoisted] == ["Shape"]
    assert plan.summary() == {"shape_ops_retained": 1, "sync_points": 2, "fused_nodes": 0}


def test_shape_output_of_input_is_retained_without_sync():
    b = GraphBuilder()
    b.symbol("N", 8)
    x = b.input("x", "F32", [1, "N"])
    b.mark_output(b.op("Shape", [x], name="s", dtype="I64"))
    b.mark_output(b.op("Neg", [x]))
    plan = compile_plan(b.build())
    assert plan.shape_ops_retained == 1 and plan.sync_points == 1 and not plan.hoisted


@pytest.mark.parametrize("name", GRAPHS)
@pytest.mark.parametrize("fused", [False, True])
def test_folding_reproduces_interpreted_shape_values(name, fused):
    g, w = load(name)
    plan = compile_plan(g, fuse_ops=fused)
    rng = np.random.default_rng(4)
    for _ in range(5):
        env = random_bindings(g, rng)
        feeds = random_feeds(g, env, rng)
        naive = run_graph(g, w, feeds)
        planned = run_plan(plan, w, feeds, env)
        for t, info in g.tensors.items():
            if info.dtype == "I64" and info.kind != "GraphInput" and t in planned:
                assert np.array_equal(planned[t], naive[t]), t
        for out in g.outputs:
            assert max_rel_diff(planned[out], naive[out]) <= 1e-6, out


# -- fusion -------------------------------------------------------------------------------------------


def test_rms_norm_collapses(toy):
    g, _ = toy
    fused, report = fuse_with_report(g)
    assert report.rms_norm == 2 * 2 + 1
    ops = [n.op for n in fused.nodes]
    assert ops.count("RMSNorm") == 5 and "Sqrt" not in ops and "Pow" not in ops
    assert len(g.nodes) - len(fused.nodes) == report.nodes_removed


def test_layer_norm_and_elementwise_program():
    g, _ = load("layer_norm_mlp")
    fused, report = fuse_with_report(g)
    assert (report.layer_norm, report.rms_norm, report.elementwise) == (1, 0, 1)
    assert [n.op for n in fused.nodes] == ["LayerNorm", "MatMul", "FusedElementwise"]
    prog = fused.nodes[-1].attrs["program"]
    assert prog == "t0=Gelu(i0);t1=Mul(t0,i0);t2=Add(t1,i1)"
    assert parse_program(prog) == [("t0", "Gelu", ["i0"]), ("t1", "Mul", ["t0", "i0"]),
                                   ("t2", "Add", ["t1", "i1"])]


@pytest.mark.parametrize("name", GRAPHS)
def test_fusion_is_idempotent(name):
    once = fuse(load(name)[0])
    assert fuse(once) == once


@pytest.mark.parametrize("name", GRAPHS)
def test_fusion_preserves_outputs(name):
    g, w = load(name)
    fused = fuse(g)
    rng = np.random.default_rng(6)
    for _ in range(5):
        env = random_bindings(g, rng)
        feeds = random_feeds(g, env, rng)
        a, b = run_graph(fused, w, feeds), run_graph(g, w, feeds)
        for out in g.outputs:
            assert max_rel_diff(a[out], b[out]) <= 1e-6, out


def test_observable_intermediate_blocks_fusion():
    b = GraphBuilder()
    b.symbol("N", 4)
    x = b.input("x", "F32", ["N"])
    s = b.mark_output(b.op("Silu", [x], name="s"))
    b.mark_output(b.op("Neg", [s]))
    fused, report = fuse_with_report(b.build())
    assert report.elementwise == 0 and len(fused.nodes) == 2


# -- binding ----------------------------------------------------------------------------------------


def test_bind_symbols_and_errors(toy):
    plan = compile_plan(toy[0])
    r = bind_symbols(plan, {"N": 1, "sumN": 5})
    assert r["past_kv.0"] == (4, 1, 8, 16)
    assert bind_symbols(plan, {"N": 3, "sumN": 3})["past_kv.0"][0] == 0  # prefill: empty past
    with pytest.raises(UnboundSymbol):
        bind_symbols(plan, {"N": 1})
    with pytest.raises(NonPositiveDim):
        bind_symbols(plan, {"N": 0, "sumN": 1})
    with pytest.raises(ExceedsPreallocation):
        bind_symbols(plan, {"N": 1, "sumN": 257})
    with pytest.raises(NonPositiveDim):
        bind_symbols(plan, {"N": 4, "sumN": 2})  # sumN - N < 0


def test_dump_lines(toy):
    lines = dump_shapes(compile_plan(toy[0]))
    assert "past_kv.0 : F32 [sumN - N, 1, 8, 16] class=T" in lines
    assert any(line.endswith("class=S") for line in lines)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8), st.sampled_from([1, 2, 4, 8]))
def test_reshape_symbolic_vs_numpy(n, a, c):
    g = _reshape_graph([a, "N", 8], [-1, c]).build()
    want = np.empty((a, n, 8)).reshape(-1, c).shape
    assert tuple(d.evaluate({"N": n}) for d in g.tensors["y"].shape) == want


def brute_force_classes(g):
    """Shape-computing by direct recursion over producers, no fixpoint iteration."""
    prod = g.producers()
    memo = {}

    def is_shape(node):
        if node.id in memo:
            return memo[node.id]
        memo[node.id] = False
        if node.op == "Shape":
            memo[node.id] = True
            return True
        from dynlite.graphir import data_inputs

        srcs = []
        for x in data_inputs(node):
            if x in prod:
                srcs.append(is_shape(prod[x]))
            elif g.tensors[x].kind == "Weight":
                srcs.append(None)
            else:
                srcs.append(False)
        memo[node.id] = any(s is True for s in srcs) and all(s is not False for s in srcs)
        return memo[node.id]

    return {n.id: NodeClass.SHAPE if is_shape(n) else NodeClass.TENSOR for n in g.nodes}


@pytest.mark.parametrize("name", GRAPHS)
def test_classification_matches_brute_force(name):
    g, _ = load(name)
    assert classify(g) == brute_force_classes(g)


def test_shape_chain_with_mul_feeding_reshape():
    b = GraphBuilder()
    b.symbol("N", 16)
    x = b.input("x", "F32", [1, "N", 8])
    y = b.input("y", "F32", [1, "N", 8])
    b.const("i1", [1], shape=[])
    b.const("two", [2], shape=[])
    b.const("tail", [4])
    s = b.op("Shape", [x], dtype="I64")
    n = b.op("Gather", [s, "i1"], {"axis": 0}, dtype="I64")
    n2 = b.op("Mul", [n, "two"], dtype="I64")
    s2 = b.op("Shape", [y], dtype="I64")
    m = b.op("Gather", [s2, "i1"], {"axis": 0}, dtype="I64")
    total = b.op("Add", [n, m], dtype="I64")  # two shape-derived scalars
    t = b.op("Concat", [b.op("Unsqueeze", [n2], {"axes": [0]}, dtype="I64"), "tail"], {"axis": 0}, dtype="I64")
    r = b.op("Reshape", [x, t], {"allowzero": 0}, name="r")
    b.mark_output(r)
    b.mark_output(b.op("Unsqueeze", [total], {"axes": [0]}, dtype="I64", name="tot"))
    g = b.build()
    cls = classify(g)
    by_op = {}
    for node in g.nodes:
        by_op.setdefault(node.op, set()).add(cls[node.id])
    assert by_op["Reshape"] == {NodeClass.TENSOR}
    assert all(by_op[op] == {NodeClass.SHAPE} for op in ("Shape", "Gather", "Mul", "Add", "Concat"))
    assert g.tensors["r"].shape == dims("2*N", 4)
    assert cls == brute_force_classes(g)
    plan = compile_plan(g)
    assert plan.sync_points == 1  # tot is observable but only needs input shapes


def test_add_mul_silu_chain_becomes_one_node():
    b = GraphBuilder()
    b.symbol("N", 8)
    x = b.input("x", "F32", ["N", 5])
    y = b.input("y", "F32", ["N", 5])
    b.mark_output(b.op("Silu", [b.op("Mul", [b.op("Add", [x, y]), y])], name="out"))
    g = b.build()
    fused, report = fuse_with_report(g)
    assert [n.op for n in fused.nodes] == ["FusedElementwise"]
    assert fused.nodes[0].attrs["program"] == "t0=Add(i0,i1);t1=Mul(t0,i1);t2=Silu(t1)"
    rng = np.random.default_rng(0)
    feeds = {"x": rng.standard_normal((6, 5)).astype(np.float32), "y": rng.standard_normal((6, 5)).astype(np.float32)}
    assert max_rel_diff(run_graph(fused, {}, feeds)["out"], run_graph(g, {}, feeds)["out"]) <= 1e-6


def test_toy_kv_shapes_seq_first(toy):
    g, _ = toy
    assert g.tensors["past_kv.0"].shape == dims("sumN - N", 1, 8, 16)
    assert g.tensors["present_kv.0"].shape == dims("sumN", 1, 8, 16)
