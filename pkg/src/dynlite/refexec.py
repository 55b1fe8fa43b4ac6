"""Reference CPU executor and the greedy decode loop.

Two engines share one set of operator kernels:

* ``planned``: runs the compiled two-phase program. Shapes come from the
  symbolic plan, every activation is a view into the preallocated arena set
  and the KV caches are appended in place.
* ``interpreted``: walks the original graph in topological order, executes
  the shape subgraphs for real and allocates every output. This is the
  oracle the planned path is checked against.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from dynlite.errors import (
    CapacityExceeded,
    ConfigError,
    PositionMismatch,
    SchemeUnsupported,
    ShapeMismatch,
)
from dynlite.graphir import Graph, NodeSpec, matmul_weight_names
from dynlite.kvcache import CacheArena, arena_specs, inverse_perm, rewrite_graph_outputs
from dynlite.memplan import ALIAS_OPS, Allocator, plan_memory, preallocate
from dynlite.quantfp4 import QuantizedWeight, quantize_weight
from dynlite.shapeinfer import (
    NodeClass,
    bind_symbols,
    check_bindings,
    classify,
    compile_plan,
    parse_program,
)

MASK_MIN = np.finfo(np.float32).min
NP_DTYPE = {"F32": np.float32, "F16": np.float16, "I64": np.int64, "BOOL": np.bool_}


# -- kernels -------------------------------------------------------------------------------------


@dataclass
class Counters:
    shape_updates: int = 0
    shape_ops_executed: int = 0
    sync_points: int = 0
    allocations: int = 0
    kv_copy_bytes: int = 0
    matmul_prefill: int = 0
    matmul_decode: int = 0
    dequant_scratch_peak: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def _silu(x, out=None):
    out = np.negative(x, out=out)
    np.exp(out, out=out)
    out += np.float32(1)
    return np.divide(x, out, out=out)


def _gelu(x, out=None):
    c = np.float32(math.sqrt(2.0 / math.pi))
    inner = (x + np.float32(0.044715) * x * x * x) * c
    return np.multiply(np.float32(0.5) * x, np.float32(1) + np.tanh(inner), out=out)


_UNARY = {"Neg": np.negative, "Sqrt": np.sqrt, "Silu": _silu, "Gelu": _gelu}
_BINARY = {"Add": np.add, "Sub": np.subtract, "Mul": np.multiply, "Div": np.divide, "Pow": np.power}


def _softmax(x, axis, out=None):
    m = np.max(x, axis=axis, keepdims=True)
    out = np.subtract(x, m, out=out)
    np.exp(out, out=out)
    s = np.sum(out, axis=axis, keepdims=True)
    return np.divide(out, s, out=out)


def _rms_norm(x, w, eps, out=None):
    ms = np.mean(np.power(x, np.float32(2)), axis=-1, keepdims=True)
    r = np.sqrt(ms + np.float32(eps))
    out = np.divide(x, r, out=out)
    return np.multiply(out, w, out=out)


def _layer_norm(x, w, b, eps, out=None):
    d = x - np.mean(x, axis=-1, keepdims=True)
    var = np.mean(np.power(d, np.float32(2)), axis=-1, keepdims=True)
    out = np.divide(d, np.sqrt(var + np.float32(eps)), out=out)
    np.multiply(out, w, out=out)
    return np.add(out, b, out=out)


def matmul(a, w, counters: Counters | None = None, out=None):
    """a [..., M, K] x w [K, N]. M == 1 takes the vector-matrix path."""
    a = np.asarray(a)
    if a.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.shape[-1]} vs {w.shape[0]}")
    K, N = w.shape
    rows = math.prod(a.shape[:-1])
    shape = a.shape[:-1] + (N,)
    if out is None:
        out = np.empty(shape, dtype=np.result_type(a, w))
    if rows == 1:
        if counters is not None:
            counters.matmul_decode += 1
        np.dot(a.reshape(K), w, out=out.reshape(N))
    else:
        if counters is not None:
            counters.matmul_prefill += 1
        np.matmul(a.reshape(rows, K), w, out=out.reshape(rows, N))
    return out


def matmul_quant(a, qw: QuantizedWeight, counters: Counters | None = None, out=None):
    """Quantized matmul, dequantizing one K-group block at a time."""
    if not isinstance(qw, QuantizedWeight) or qw.scheme not in ("e0m4", "int4"):
        raise SchemeUnsupported("MatMulQuant needs an e0m4 or int4 weight")
    a = np.asarray(a, dtype=np.float32)
    K, N = qw.shape
    if a.shape[-1] != K:
        raise ShapeMismatch(f"matmul inner dims {a.shape[-1]} vs {K}")
    rows = math.prod(a.shape[:-1])
    a2 = a.reshape(rows, K)
    if out is None:
        out = np.empty(a.shape[:-1] + (N,), dtype=np.float32)
    acc = out.reshape(rows, N)
    acc[...] = 0
    if counters is not None:
        if rows == 1:
            counters.matmul_decode += 1
        else:
            counters.matmul_prefill += 1
    for kg in range(qw.num_groups):
        block = qw.dequantize_block(kg)
        if counters is not None:
            counters.dequant_scratch_peak = max(counters.dequant_scratch_peak, block.nbytes)
        lo = kg * qw.group_size
        acc += a2[:, lo:lo + block.shape[0]] @ block
    return out


def _fused_elementwise(program, ins, out=None):
    env = {f"i{k}": v for k, v in enumerate(ins)}
    steps = parse_program(program)
    for j, (target, op, args) in enumerate(steps):
        vals = [env[x] for x in args]
        dst = out if j == len(steps) - 1 else None
        if op in _UNARY:
            env[target] = _UNARY[op](vals[0], out=dst)
        else:
            env[target] = _BINARY[op](vals[0], vals[1], out=dst)
    return env[steps[-1][0]]


def run_kernel(node: NodeSpec, ins, out=None, counters=None):
    """Reference semantics for one node. ``out`` receives the result when given."""
    op, a = node.op, node.attrs
    if op in _BINARY:
        return _BINARY[op](ins[0], ins[1], out=out)
    if op in _UNARY:
        return _UNARY[op](ins[0], out=out)
    if op == "MatMul":
        if ins[1].ndim == 2:
            return matmul(ins[0], ins[1], counters, out=out)
        return np.matmul(ins[0], ins[1], out=out)
    if op == "MatMulQuant":
        return matmul_quant(ins[0], ins[1], counters, out=out)
    if op == "Softmax":
        return _softmax(ins[0], a["axis"], out=out)
    if op == "RMSNorm":
        return _rms_norm(ins[0], ins[1], a["eps"], out=out)
    if op == "LayerNorm":
        return _layer_norm(ins[0], ins[1], ins[2], a["eps"], out=out)
    if op == "FusedElementwise":
        return _fused_elementwise(a["program"], ins, out=out)
    if op == "Concat":
        return np.concatenate(ins, axis=a["axis"], out=out)
    if op == "ReduceMean":
        res = np.mean(ins[0], axis=tuple(a["axes"]), keepdims=bool(a.get("keepdims", 1)))
    elif op == "Identity":
        res = ins[0]
    elif op == "Shape":
        res = np.array(ins[0].shape, dtype=np.int64)
    elif op == "Gather":
        res = np.take(ins[0], ins[1], axis=a["axis"])
    elif op == "Slice":
        x = ins[0]
        idx = [slice(None)] * x.ndim
        for s, e, ax in zip(a["starts"], a["ends"], a["axes"]):
            idx[ax] = slice(s, e)
        res = x[tuple(idx)]
    elif op == "Reshape":
        x, target = ins
        dims = [x.shape[j] if int(t) == 0 else int(t) for j, t in enumerate(target.reshape(-1))]
        res = x.reshape(dims)
    elif op == "Transpose":
        res = np.transpose(ins[0], a["perm"])
    elif op == "Unsqueeze":
        res = ins[0]
        for ax in sorted(x % (ins[0].ndim + len(a["axes"])) for x in a["axes"]):
            res = np.expand_dims(res, ax)
    elif op == "Squeeze":
        res = np.squeeze(ins[0], axis=tuple(a["axes"]))
    elif op == "Cast":
        res = ins[0].astype(NP_DTYPE[a["to"]])
    else:
        raise ShapeMismatch(f"no kernel for {op}", node.id)
    if out is not None:
        out[...] = res
        return out
    return res


# -- weights --------------------------------------------------------------------------------------


def quantize_graph(g: Graph, weights: dict, scheme="e0m4", group_size=128, n=1, names=None):
    """Swap MatMul weights for 4-bit ones; returns (graph, weights)."""
    if scheme == "f32":
        return g, weights
    if scheme not in ("e0m4", "int4"):
        raise SchemeUnsupported(f"unknown scheme {scheme!r}")
    g = g.copy()
    weights = dict(weights)
    names = set(matmul_weight_names(g) if names is None else names)
    for name in names:
        w = weights[name]
        if not isinstance(w, QuantizedWeight):
            weights[name] = quantize_weight(w, scheme, group_size, n)
        info = g.tensors[name]
        info.dtype = "U4-E0M4" if scheme == "e0m4" else "U4-INT4"
    for i, node in enumerate(g.nodes):
        if node.op == "MatMul" and node.inputs[1] in names:
            g.nodes[i] = NodeSpec(node.id, "MatMulQuant", list(node.inputs), list(node.outputs),
                                  {"group_size": group_size, "scheme": scheme, "n": n})
    return g, weights


def densify(g: Graph, weights: dict):
    """Undo quantize_graph numerically: dense F32 copies of the dequantized weights."""
    g = g.copy()
    weights = dict(weights)
    for i, node in enumerate(g.nodes):
        if node.op == "MatMulQuant":
            w = node.inputs[1]
            if isinstance(weights[w], QuantizedWeight):
                weights[w] = weights[w].dequantize()
            g.tensors[w].dtype = "F32"
            g.nodes[i] = NodeSpec(node.id, "MatMul", list(node.inputs), list(node.outputs), {})
    return g, weights


def _weight_env(g: Graph, weights: dict):
    env = {}
    for t in g.tensors.values():
        if t.kind != "Weight":
            continue
        if t.name in weights:
            w = weights[t.name]
            env[t.name] = w if isinstance(w, QuantizedWeight) else np.asarray(w, dtype=NP_DTYPE[t.dtype])
        elif t.value is not None:
            env[t.name] = t.array()
        else:
            raise ConfigError(f"weight {t.name!r} has no data")
    return env


def run_graph(g: Graph, weights: dict, feeds: dict) -> dict:
    """Naive topological interpreter: every tensor, shape values included, computed for real."""
    env = _weight_env(g, weights)
    env.update({k: np.asarray(v) for k, v in feeds.items()})
    for node in g.nodes:
        env[node.outputs[0]] = np.asarray(run_kernel(node, [env[x] for x in node.inputs]))
    return env


def run_plan(plan, weights: dict, feeds: dict, bindings: dict) -> dict:
    """Execute a compiled plan: retained shape program first, then the tensor program.

    Folded shape values are never computed; they come from the plan's
    symbolic vectors evaluated at ``bindings``.
    """
    g = plan.graph
    env = _weight_env(g, weights)
    env.update({k: np.asarray(v) for k, v in feeds.items()})
    for node in plan.folded:
        out = node.outputs[0]
        vec = plan.values.get(out)
        if vec is None:
            continue  # nothing downstream reads it at run time
        env[out] = np.array([d.evaluate(bindings) for d in vec], dtype=np.int64).reshape(
            tuple(int(d.evaluate(bindings)) for d in plan.shapes[out]))
    for node in plan.shape_program + plan.tensor_program:
        env[node.outputs[0]] = np.asarray(run_kernel(node, [env[x] for x in node.inputs]))
    return env


# -- sessions -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionOptions:
    engine: str = "planned"  # planned | interpreted
    fuse: bool = True
    kv: str = "arena"  # arena | copy
    pad: int = 64
    f16_storage: bool = False
    dense_weights: bool = False
    max_seq: int | None = None

    def validate(self):
        if self.engine not in ("planned", "interpreted"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.kv not in ("arena", "copy"):
            raise ConfigError(f"unknown kv mode {self.kv!r}")
        if self.kv == "arena" and self.engine != "planned":
            raise ConfigError("KV arenas need the planned engine")
        if self.pad < 1:
            raise ConfigError("pad must be >= 1")
        if self.kv == "copy" and self.pad != 1:
            raise ConfigError("copy-based KV caching runs unpadded (pad=1)")


OPTIMIZED = SessionOptions()
NAIVE = SessionOptions(engine="interpreted", fuse=False, kv="copy", pad=1, dense_weights=True)


def _round_half(buf):
    # masked scores saturate to -inf in half precision; softmax still maps them to 0
    with np.errstate(over="ignore"):
        buf[...] = buf.astype(np.float16)


def padded_length(total: int, pad: int, max_seq: int) -> int:
    return min(-(-total // pad) * pad, max_seq)


def attention_mask(cur: int, n: int, sum_n: int) -> np.ndarray:
    """Additive mask [1,1,n,sum_n]: query i sees keys j <= cur + i."""
    j = np.arange(sum_n)[None, :]
    i = np.arange(n)[:, None]
    mask = np.where(j <= cur + i, np.float32(0), MASK_MIN).astype(np.float32)
    return mask.reshape(1, 1, n, sum_n)


def max_rel_diff(a, b) -> float:
    """max|a-b| / max|b|, the relative tolerance used throughout the tests."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.max(np.abs(b)) if b.size else 0.0
    diff = np.max(np.abs(a - b)) if a.size else 0.0
    return float(diff / scale) if scale > 0 else float(diff)


class Session:
    def __init__(self, graph: Graph, weights: dict, options: SessionOptions = OPTIMIZED):
        options.validate()
        self.options = options
        self.counters = Counters()
        self.allocator = Allocator()
        self.source = graph
        g = graph
        if options.dense_weights:
            g, weights = densify(g, weights)
        if options.kv == "arena":
            g = rewrite_graph_outputs(g)
        self.max_seq = options.max_seq or max(
            (m for m in graph.symbols.values() if m is not None), default=None
        )
        if self.max_seq is None:
            raise ConfigError("no max sequence length: declare symbol maxima or pass max_seq")
        self.max_bindings = {s: (m if m is not None else self.max_seq) for s, m in graph.symbols.items()}
        self.max_bindings = {s: min(v, self.max_seq) for s, v in self.max_bindings.items()}
        g.symbols = dict(self.max_bindings)
        self.weights = _weight_env(g, weights)
        self.kv_pairs = list(g.meta.kv_pairs)
        if options.engine == "planned":
            self.plan = compile_plan(g, fuse_ops=options.fuse)
            self.graph = self.plan.graph
            past = {p.past for p in self.kv_pairs} if options.kv == "arena" else set()
            program = self.plan.shape_program + self.plan.tensor_program
            self.memory = plan_memory(self.graph, program, self.plan.shapes, self.max_bindings, past)
            self.plan.memory = self.memory
            self.arenas_mem = preallocate(self.memory, self.max_bindings, self.allocator)
        else:
            self.plan = None
            self.graph = g
            self.classes = classify(g)
            self.order = list(g.nodes)
        self.arenas = []
        self.perms = []
        if options.kv == "arena":
            for layer, (pair, seq_dim, shape) in enumerate(arena_specs(self.graph)):
                self.arenas.append(CacheArena(layer, shape, seq_dim, self.max_seq, allocator=self.allocator))
                node = next(n for n in self.graph.nodes if n.op == "KVAppend" and n.inputs[0] == pair.past)
                self.perms.append(node.attrs.get("perm"))
        self._copy_past: dict = {}
        self._bindings = None
        self._views: dict = {}
        self._resolved = None
        self.cur_len = 0
        self.passes = 0
        self.counters.allocations = self.allocator.count

    # -- state ---------------------------------------------------------------------------------

    def reset(self):
        for arena in self.arenas:
            arena.reset()
        self._copy_past = {}
        self.cur_len = 0

    @property
    def kv_bytes(self) -> int:
        """Bytes of KV storage currently held (arena mode: fixed, copy mode: both copies)."""
        if self.arenas:
            return sum(a.nbytes for a in self.arenas)
        return sum(2 * v.nbytes for v in self._copy_past.values())

    def cache_contents(self, layer: int) -> np.ndarray:
        """Cached tokens of one layer, in the source graph's layout."""
        if self.arenas:
            data = self.arenas[layer].contents()
            perm = self.perms[layer]
            return np.transpose(data, inverse_perm(perm)) if perm else data
        pair = self.kv_pairs[layer]
        return self._copy_past.get(pair.past, np.zeros((0,)))

    def _sync_allocs(self):
        self.counters.allocations = self.allocator.count

    # -- one forward pass ------------------------------------------------------------------------

    def forward(self, ids, positions=None) -> dict:
        ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
        n = ids.shape[1]
        cur = self.cur_len
        total = cur + n
        if total > self.max_seq:
            raise CapacityExceeded(f"{total} tokens exceed max_seq {self.max_seq}")
        sum_n = padded_length(total, self.options.pad, self.max_seq) if cur > 0 else total
        if positions is None:
            positions = np.arange(cur, total, dtype=np.int64).reshape(1, n)
        feeds = {"input_ids": ids, "position_ids": positions, "attn_mask": attention_mask(cur, n, sum_n)}
        bindings = {"N": n, "sumN": sum_n}
        if self.options.engine == "planned":
            outs = self._run_planned(feeds, bindings)
        else:
            outs = self._run_interpreted(feeds, bindings)
        self.cur_len = total
        self.passes += 1
        self._sync_allocs()
        return outs

    def _feed_past(self, bindings):
        feeds = {}
        for pair in self.kv_pairs:
            if self.options.kv == "arena":
                continue
            prev = self._copy_past.get(pair.past)
            info = self.graph.tensors[pair.past]
            shape = tuple(d.evaluate(bindings) for d in info.shape)
            if prev is None:
                feeds[pair.past] = np.zeros(shape, dtype=np.float32)
            else:
                if prev.shape != shape:
                    raise ShapeMismatch(f"{pair.past}: cached {prev.shape}, graph wants {shape}")
                feeds[pair.past] = prev
                self.counters.kv_copy_bytes += prev.nbytes
        return feeds

    def _store_present(self, env):
        if self.options.kv != "copy":
            return
        for pair in self.kv_pairs:
            self._copy_past[pair.past] = env[pair.new]

    def _run_planned(self, feeds, bindings):
        plan = self.plan
        if bindings != self._bindings:
            check_bindings(self.graph.symbols, bindings)
            self._resolved = bind_symbols(plan, bindings)
            self._views = {}
            for name in self.memory.assignment:
                info = self.graph.tensors[name]
                self._views[name] = self.arenas_mem.view(name, self._resolved[name], NP_DTYPE[info.dtype])
            self._bindings = dict(bindings)
            self.counters.shape_updates += 1
        resolved = self._resolved
        env = dict(self.weights)
        feeds = dict(feeds)
        feeds.update(self._feed_past(bindings))
        for name, value in feeds.items():
            view = self._views.get(name)
            if value.shape != resolved[name]:
                raise ShapeMismatch(f"input {name}: got {value.shape}, expected {resolved[name]}")
            if view is not None:
                view[...] = value
                env[name] = view
            else:
                env[name] = value
        if self.arenas:
            for arena, pair in zip(self.arenas, self.kv_pairs):
                past_len = bindings["sumN"] - bindings["N"]
                env[pair.past] = arena.view(0, past_len).array()

        arena_of = {p.past: a for p, a in zip(self.kv_pairs, self.arenas)}
        for node in plan.shape_program:
            self._exec_planned(node, env, resolved, arena_of)
            self.counters.shape_ops_executed += 1
        self.counters.sync_points += plan.sync_points
        for node in plan.tensor_program:
            self._exec_planned(node, env, resolved, arena_of)
            if plan.classes.get(node.id) is NodeClass.SHAPE:
                self.counters.shape_ops_executed += 1
        if self.arenas:
            n = bindings["N"]
            for arena in self.arenas:
                arena.cur_len = self.cur_len + n
        self._store_present(env)
        return {name: env[name] for name in self.graph.outputs}

    def _exec_planned(self, node, env, resolved, arena_of):
        out = node.outputs[0]
        if node.op in ALIAS_OPS:
            env[out] = env[node.inputs[0]].reshape(resolved[out])
            return
        if node.op == "KVAppend":
            past, new, pos = (env[x] for x in node.inputs)
            arena = arena_of[node.inputs[0]]
            start = int(pos.reshape(-1)[0])
            if start != self.cur_len:
                raise PositionMismatch(f"append at {start}, cache holds {self.cur_len}")
            arena.cur_len = start
            arena.append(new, start)
            env[out] = arena.view(0, resolved[out][arena.seq_dim]).array()
            return
        ins = [env[x] for x in node.inputs]
        dst = self._views.get(out)
        try:
            res = run_kernel(node, ins, out=dst, counters=self.counters)
        except ValueError as exc:
            raise ShapeMismatch(str(exc), node.id) from None
        if dst is None:
            res = np.asarray(res)
            if res.shape != resolved[out]:
                raise ShapeMismatch(f"{out}: produced {res.shape}, plan says {resolved[out]}", node.id)
        elif self.options.f16_storage and dst.dtype == np.float32:
            _round_half(dst)
        env[out] = dst if dst is not None else res

    def _run_interpreted(self, feeds, bindings):
        check_bindings(self.graph.symbols, bindings)
        if bindings != self._bindings:
            self._bindings = dict(bindings)
            self.counters.shape_updates += 1
        env = dict(self.weights)
        env.update(feeds)
        env.update(self._feed_past(bindings))
        for name in self.graph.inputs:
            info = self.graph.tensors[name]
            want = tuple(d.evaluate(bindings) for d in info.shape)
            if env[name].shape != want:
                raise ShapeMismatch(f"input {name}: got {env[name].shape}, expected {want}")
        syncs = 1
        prev = NodeClass.TENSOR
        for node in self.order:
            cls = self.classes[node.id]
            if cls is NodeClass.SHAPE:
                self.counters.shape_ops_executed += 1
                if prev is NodeClass.TENSOR:
                    syncs += 1
            prev = cls
            ins = [env[x] for x in node.inputs]
            try:
                res = np.asarray(run_kernel(node, ins, counters=self.counters))
            except ValueError as exc:
                raise ShapeMismatch(str(exc), node.id) from None
            buf = self.allocator.empty(res.shape, res.dtype)
            buf[...] = res
            if self.options.f16_storage and buf.dtype == np.float32:
                _round_half(buf)
            env[node.outputs[0]] = buf
        self.counters.sync_points += syncs
        self._store_present(env)
        return {name: env[name] for name in self.graph.outputs}

    # -- reporting ------------------------------------------------------------------------------

    def report(self) -> dict:
        c = self.counters
        return {
            "shape_updates": c.shape_updates,
            "shape_ops_executed": c.shape_ops_executed,
            "sync_points": c.sync_points,
            "allocations": c.allocations,
            "kv_copy_bytes": c.kv_copy_bytes,
        }


@dataclass
class GenerateResult:
    tokens: list
    logits: np.ndarray
    steps: int
    prefill_tokens: int
    counters: dict
    allocations_after_warmup: int
    step_ms: list = field(default_factory=list)

    def report(self, timing=False) -> dict:
        out = {
            "steps": self.steps,
            "prefill_tokens": self.prefill_tokens,
            "counters": dict(self.counters),
            "allocations_after_warmup": self.allocations_after_warmup,
        }
        if timing and self.step_ms:
            out["tokens_per_step_ms"] = sum(self.step_ms[1:]) / max(len(self.step_ms) - 1, 1)
        return out


def generate(session: Session, prompt, max_new_tokens: int, timing=False) -> GenerateResult:
    """Greedy decoding: one prefill pass, then one token per pass."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ConfigError("prompt must not be empty")
    if len(prompt) > session.max_seq:
        raise CapacityExceeded(f"prompt of {len(prompt)} tokens exceeds max_seq {session.max_seq}")
    if len(prompt) + max_new_tokens - 1 > session.max_seq:
        raise CapacityExceeded(
            f"{len(prompt)} + {max_new_tokens} tokens exceed max_seq {session.max_seq}"
        )
    tokens = []
    step_ms = []
    feed = prompt
    logits = None
    warm = None
    for step in range(max_new_tokens):
        t0 = time.perf_counter()
        outs = session.forward(feed)
        logits = outs["logits"]
        nxt = int(np.argmax(logits.reshape(-1, logits.shape[-1])[-1]))
        if timing:
            step_ms.append((time.perf_counter() - t0) * 1e3)
        tokens.append(nxt)
        feed = [nxt]
        if step == 0:
            warm = session.allocator.count
    logits = np.array(logits, copy=True)
    steps = max_new_tokens
    return GenerateResult(
        tokens=tokens,
        logits=logits,
        steps=steps,
        prefill_tokens=len(prompt),
        counters=session.report(),
        allocations_after_warmup=session.allocator.count - (warm if warm is not None else session.allocator.count),
        step_ms=step_ms,
    )
