from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlite.errors import CapacityExceeded, ConfigError, SchemeUnsupported, ShapeMismatch
from dynlite.graphir import NodeSpec
from dynlite.quantfp4 import quantize_weight
from dynlite.refexec import (
    MASK_MIN,
    NAIVE,
    OPTIMIZED,
    Counters,
    Session,
    SessionOptions,
    attention_mask,
    densify,
    generate,
    matmul,
    matmul_quant,
    max_rel_diff,
    padded_length,
    quantize_graph,
    run_kernel,
)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 40), st.integers(1, 200), st.integers(1, 50), st.integers(0, 2**31))
def test_matmul_paths_match_float64(b, m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((b, m, k)).astype(np.float32)
    w = rng.standard_normal((k, n)).astype(np.float32)
    c = Counters()
    got = matmul(a, w, c)
    want = a.astype(np.float64) @ w.astype(np.float64)
    assert max_rel_diff(got, want) <= 1e-6
    assert (c.matmul_decode, c.matmul_prefill) == ((1, 0) if b * m == 1 else (0, 1))


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeMismatch):
        matmul(np.ones((1, 3), np.float32), np.ones((4, 2), np.float32))


@pytest.mark.parametrize("scheme", ["e0m4", "int4"])
@pytest.mark.parametrize("rows", [1, 7])
def test_matmul_quant_equals_dense_dequant(scheme, rows):
    rng = np.random.default_rng(rows)
    w = rng.standard_normal((300, 24)).astype(np.float32)
    qw = quantize_weight(w, scheme, 128)
    a = rng.standard_normal((1, rows, 300)).astype(np.float32)
    c = Counters()
    got = matmul_quant(a, qw, c)
    want = a.astype(np.float64) @ qw.dequantize().astype(np.float64)
    assert max_rel_diff(got, want) <= 1e-6
    assert c.dequant_scratch_peak == 128 * 24 * 4  # one group block, never the whole matrix
    with pytest.raises(SchemeUnsupported):
        matmul_quant(a, w)


def node(op, **attrs):
    return NodeSpec(0, op, [], ["y"], attrs)


def test_kernels_against_formulas():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 8)).astype(np.float32)
    g = (1 + rng.standard_normal(8)).astype(np.float32)
    bta = rng.standard_normal(8).astype(np.float32)
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(-1, keepdims=True))
    assert max_rel_diff(run_kernel(node("Softmax", axis=-1), [x]), e / e.sum(-1, keepdims=True)) <= 1e-6
    rms = x64 / np.sqrt((x64 ** 2).mean(-1, keepdims=True) + 1e-5) * g
    assert max_rel_diff(run_kernel(node("RMSNorm", eps=1e-5), [x, g]), rms) <= 1e-6
    mu = x64.mean(-1, keepdims=True)
    ln = (x64 - mu) / np.sqrt(((x64 - mu) ** 2).mean(-1, keepdims=True) + 1e-5) * g + bta
    assert max_rel_diff(run_kernel(node("LayerNorm", eps=1e-5), [x, g, bta]), ln) <= 1e-6
    silu = x64 / (1 + np.exp(-x64))
    assert max_rel_diff(run_kernel(node("Silu"), [x]), silu) <= 1e-6
    prog = node("FusedElementwise", program="t0=Silu(i0);t1=Mul(t0,i1)")
    assert max_rel_diff(run_kernel(prog, [x, x]), silu * x64) <= 1e-6
    out = np.empty_like(x)
    assert run_kernel(prog, [x, x], out=out) is out


def test_padding_helpers():
    assert padded_length(65, 64, 256) == 128
    assert padded_length(64, 64, 256) == 64
    assert padded_length(250, 128, 256) == 256
    assert padded_length(250, 64, 250) == 250
    m = attention_mask(3, 2, 8)
    assert m.shape == (1, 1, 2, 8)
    assert (m[0, 0] == 0).sum(axis=1).tolist() == [4, 5]
    assert m[0, 0, 0, 4] == MASK_MIN


def test_options_validation(toy):
    for bad in (SessionOptions(engine="gpu"), SessionOptions(kv="paged"), SessionOptions(pad=0),
                SessionOptions(engine="interpreted", kv="arena"), SessionOptions(kv="copy", pad=64)):
        with pytest.raises(ConfigError):
            bad.validate()


def test_determinism(toy):
    a = generate(Session(*toy), [3, 1, 4, 1, 5], 12)
    b = generate(Session(*toy), [3, 1, 4, 1, 5], 12)
    assert a.tokens == b.tokens and np.array_equal(a.logits, b.logits)


@pytest.mark.parametrize("prompt", [[7], [3, 1, 4, 1, 5, 9, 2, 6], list(range(60, 90))])
def test_padding_transparency(toy, prompt):
    base = generate(Session(*toy, SessionOptions(pad=1)), prompt, 20)
    for pad in (64, 128):
        r = generate(Session(*toy, SessionOptions(pad=pad)), prompt, 20)
        assert r.tokens == base.tokens
        assert r.counters["shape_updates"] < base.counters["shape_updates"]


def test_counter_contract_64_steps(toy):
    s = Session(*toy, OPTIMIZED)
    r = generate(s, [5, 6, 7], 64)
    c = r.counters
    assert c["shape_ops_executed"] == 0
    assert c["sync_points"] == r.steps == 64
    assert c["kv_copy_bytes"] == 0
    assert r.allocations_after_warmup == 0
    # prefill binding, then sumN stays at 64 until the cache passes 64 tokens
    assert c["shape_updates"] == 1 + 1 + 1


def test_naive_counters(toy):
    r = generate(Session(*toy, NAIVE), [5, 6, 7], 8)
    assert r.counters["shape_ops_executed"] > 0
    assert r.counters["sync_points"] > r.steps
    assert r.counters["allocations"] > 0


def test_quantized_session_matches_densified(toy):
    g, w = toy
    qg, qw = quantize_graph(g, w, "e0m4", 64)
    assert sum(n.op == "MatMulQuant" for n in qg.nodes) == 15
    dg, dw = densify(qg, qw)
    assert all(n.op != "MatMulQuant" for n in dg.nodes)
    a = generate(Session(qg, qw), [1, 2, 3], 10)
    b = generate(Session(dg, dw, SessionOptions(engine="interpreted", kv="copy", pad=1, fuse=False)), [1, 2, 3], 10)
    assert a.tokens == b.tokens
    assert max_rel_diff(a.logits, b.logits) <= 1e-5


def test_capacity(toy):
    with pytest.raises(CapacityExceeded):
        generate(Session(*toy), list(range(10)) * 26, 4)
    s = Session(*toy, SessionOptions(max_seq=16))
    with pytest.raises(CapacityExceeded):
        generate(s, [1] * 10, 8)
    with pytest.raises(ConfigError):
        generate(Session(*toy), [], 4)


def test_f16_storage_stays_close(toy):
    a = generate(Session(*toy), [9, 8, 7], 4)
    b = generate(Session(*toy, SessionOptions(f16_storage=True)), [9, 8, 7], 4)
    assert max_rel_diff(b.logits, a.logits) < 1e-2


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((7, 64)).astype(np.float32)
    w = rng.standard_normal((64, 96)).astype(np.float32)
    ref = np.zeros((7, 96))
    for i in range(7):
        for j in range(96):
            s = 0.0
            for k in range(64):
                s += float(a[i, k]) * float(w[k, j])
            ref[i, j] = s
    assert max_rel_diff(matmul(a, w), ref) <= 1e-6


def test_grid_aligned_weight_matches_dense():
    rng = np.random.default_rng(4)
    qw = quantize_weight(rng.standard_normal((256, 32)), "e0m4", 128)
    a = rng.standard_normal((3, 256)).astype(np.float32)
    assert max_rel_diff(matmul_quant(a, qw), matmul(a, qw.dequantize())) <= 1e-6


def test_output_mae_fp4_below_int4():
    rng = np.random.default_rng(5)
    w = (rng.standard_normal((1024, 256)) * 0.02).astype(np.float32)
    a = rng.standard_normal((16, 1024)).astype(np.float32)
    ref = a.astype(np.float64) @ w
    err = {s: np.abs(matmul_quant(a, quantize_weight(w, s, 128)) - ref).mean() for s in ("e0m4", "int4")}
    assert err["e0m4"] < err["int4"]


def test_padding_keeps_bindings_between_multiples(toy):
    assert padded_length(130, 64, 256) == padded_length(131, 64, 256) == 192
    s = Session(*toy, SessionOptions(pad=64))
    s.forward(list(range(1, 97)) + list(range(1, 34)))  # 129 tokens
    s.forward([1])  # 130
    before = s.counters.shape_updates
    s.forward([2])  # 131
    assert s.counters.shape_updates == before
    s.forward([3] * 1)
    assert s.cur_len == 132
