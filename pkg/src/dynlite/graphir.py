"""Computation-graph IR with symbolic tensor shapes.

Graphs are stored as diffable JSON; large float weights live in a binary
sidecar (magic ``LGW1``). Small constants (shape vectors, eps, scales) may be
inlined in the JSON under ``"value"`` so that shape inference and pattern
matching can read them without the sidecar.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from dynlite.errors import (
    BadMagic,
    ConfigError,
    CycleError,
    ExprSyntaxError,
    SchemaError,
    ShapeArityError,
    TruncatedStream,
    UndeclaredSymbol,
    UnknownOperator,
)
from dynlite.symexpr import SymExpr, is_symbol_name, parse

DTYPES = ("F32", "F16", "I64", "U4-E0M4", "U4-INT4", "BOOL")
KINDS = ("GraphInput", "GraphOutput", "Weight", "Activation", "ShapeValue")

NUMPY_DTYPES = {
    "F32": np.float32,
    "F16": np.float16,
    "I64": np.int64,
    "BOOL": np.bool_,
}

_INT, _INTS, _FLOAT, _STR = "int", "ints", "float", "str"

# op -> (min inputs, max inputs or None, outputs, required attrs, optional attrs)
OPS: dict[str, tuple] = {
    "Identity": (1, 1, 1, {}, {}),
    "Shape": (1, 1, 1, {}, {}),
    "Gather": (2, 2, 1, {"axis": _INT}, {}),
    "Concat": (1, None, 1, {"axis": _INT}, {}),
    "Slice": (1, 1, 1, {"starts": _INTS, "ends": _INTS, "axes": _INTS}, {}),
    "Reshape": (2, 2, 1, {"allowzero": _INT}, {}),
    "Transpose": (1, 1, 1, {"perm": _INTS}, {}),
    "Unsqueeze": (1, 1, 1, {"axes": _INTS}, {}),
    "Squeeze": (1, 1, 1, {"axes": _INTS}, {}),
    "Cast": (1, 1, 1, {"to": _STR}, {}),
    "Add": (2, 2, 1, {}, {}),
    "Sub": (2, 2, 1, {}, {}),
    "Mul": (2, 2, 1, {}, {}),
    "Div": (2, 2, 1, {}, {}),
    "Pow": (2, 2, 1, {}, {}),
    "Neg": (1, 1, 1, {}, {}),
    "Sqrt": (1, 1, 1, {}, {}),
    "Silu": (1, 1, 1, {}, {}),
    "Gelu": (1, 1, 1, {}, {}),
    "ReduceMean": (1, 1, 1, {"axes": _INTS}, {"keepdims": _INT}),
    "Softmax": (1, 1, 1, {"axis": _INT}, {}),
    "MatMul": (2, 2, 1, {}, {}),
    "MatMulQuant": (2, 2, 1, {"group_size": _INT, "scheme": _STR, "n": _INT}, {}),
    "RMSNorm": (2, 2, 1, {"eps": _FLOAT}, {}),
    "LayerNorm": (3, 3, 1, {"eps": _FLOAT}, {}),
    "KVAppend": (3, 3, 1, {"axis": _INT}, {"perm": _INTS}),
    "FusedElementwise": (1, None, 1, {"program": _STR}, {}),
}

UNARY_ELEMENTWISE = frozenset({"Neg", "Sqrt", "Silu", "Gelu"})
BINARY_ELEMENTWISE = frozenset({"Add", "Sub", "Mul", "Div", "Pow"})

# Input slots that carry shape parameters rather than data.
PARAM_SLOTS = {"Reshape": frozenset({1})}


def data_inputs(node) -> list:
    params = PARAM_SLOTS.get(node.op, frozenset())
    return [name for i, name in enumerate(node.inputs) if i not in params]


@dataclass
class TensorInfo:
    name: str
    dtype: str
    shape: tuple | None
    kind: str
    value: tuple | None = None

    @property
    def rank(self):
        return None if self.shape is None else len(self.shape)

    def array(self) -> np.ndarray:
        """Inline constant as an ndarray."""
        if self.value is None:
            raise ValueError(f"tensor {self.name!r} has no inline value")
        dims = tuple(int(d) for d in self.shape)
        return np.array(self.value, dtype=NUMPY_DTYPES[self.dtype]).reshape(dims)


@dataclass
class NodeSpec:
    id: int
    op: str
    inputs: list
    outputs: list
    attrs: dict = field(default_factory=dict)


@dataclass
class KVPair:
    past: str
    new: str
    arena: str


@dataclass
class GraphMeta:
    name: str = ""
    kv_pairs: list = field(default_factory=list)
    position_ids: str | None = None


@dataclass
class Graph:
    tensors: dict
    nodes: list
    symbols: dict
    meta: GraphMeta = field(default_factory=GraphMeta)

    def names_of(self, kind):
        return [t.name for t in self.tensors.values() if t.kind == kind]

    @property
    def inputs(self):
        return self.names_of("GraphInput")

    @property
    def outputs(self):
        return self.names_of("GraphOutput")

    def is_constant(self, name) -> bool:
        return self.tensors[name].kind == "Weight"

    def producers(self) -> dict:
        return {out: node for node in self.nodes for out in node.outputs}

    def consumers(self) -> dict:
        users: dict = {name: [] for name in self.tensors}
        for node in self.nodes:
            for name in node.inputs:
                users[name].append(node)
        return users

    def node_by_id(self, node_id):
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    def next_node_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1


# -- validation -----------------------------------------------------------------------------


def _expect(cond, path, reason):
    if not cond:
        raise SchemaError(path, reason)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _check_attr(value, kind, path):
    if kind == _INT:
        _expect(_is_int(value), path, "expected an integer")
    elif kind == _INTS:
        _expect(isinstance(value, list) and all(_is_int(v) for v in value), path,
                "expected a list of integers")
    elif kind == _FLOAT:
        _expect((_is_int(value) or isinstance(value, float)) and math.isfinite(value), path,
                "expected a finite number")
    elif kind == _STR:
        _expect(isinstance(value, str), path, "expected a string")


def _parse_dim(raw, path, declared):
    if _is_int(raw):
        if raw < 1:
            raise ShapeArityError(f"{path}: literal dim must be >= 1, got {raw}")
        return SymExpr.const(raw)
    _expect(isinstance(raw, str), path, "dim must be an integer or expression string")
    try:
        expr = parse(raw)
    except ExprSyntaxError as exc:
        raise SchemaError(path, str(exc)) from None
    for sym in sorted(expr.symbols):
        if sym not in declared:
            raise UndeclaredSymbol(sym)
    if expr.is_constant() and expr.constant_term < 1:
        raise ShapeArityError(f"{path}: literal dim must be >= 1, got {expr}")
    return expr


def _parse_symbols(raw):
    _expect(isinstance(raw, list), "$.symbols", "expected a list")
    symbols = {}
    for i, entry in enumerate(raw):
        path = f"$.symbols[{i}]"
        _expect(isinstance(entry, dict), path, "expected an object")
        name = entry.get("name")
        _expect(is_symbol_name(name), f"{path}.name", "expected a C identifier")
        _expect(name not in symbols, f"{path}.name", f"duplicate symbol {name!r}")
        mx = entry.get("max")
        if mx is not None:
            _expect(_is_int(mx) and mx >= 1, f"{path}.max", "expected a positive integer")
        symbols[name] = mx
    return symbols


def _parse_tensor(entry, path, symbols):
    _expect(isinstance(entry, dict), path, "expected an object")
    name = entry.get("name")
    _expect(isinstance(name, str) and name != "", f"{path}.name", "expected a non-empty string")
    dtype = entry.get("dtype")
    _expect(dtype in DTYPES, f"{path}.dtype", f"unknown dtype {dtype!r}")
    kind = entry.get("kind")
    _expect(kind in KINDS, f"{path}.kind", f"unknown kind {kind!r}")
    raw_shape = entry.get("shape")
    if raw_shape is None:
        _expect(kind in ("Activation", "ShapeValue", "GraphOutput"), f"{path}.shape",
                f"{kind} tensors need a shape")
        shape = None
    else:
        _expect(isinstance(raw_shape, list), f"{path}.shape", "expected a list")
        shape = tuple(_parse_dim(d, f"{path}.shape[{j}]", symbols) for j, d in enumerate(raw_shape))
    if kind == "ShapeValue":
        _expect(dtype == "I64", f"{path}.dtype", "ShapeValue tensors must be I64")
        if shape is not None and len(shape) > 1:
            raise ShapeArityError(f"{path}: ShapeValue tensors are rank 0 or 1")
    if kind == "Weight" and not all(d.is_constant() for d in shape):
        raise ShapeArityError(f"{path}: weight shapes must be literal")
    value = entry.get("value")
    if value is not None:
        _expect(kind == "Weight", f"{path}.value", "only weights carry inline values")
        _expect(isinstance(value, list), f"{path}.value", "expected a flat list")
        if dtype == "I64":
            _expect(all(_is_int(v) for v in value), f"{path}.value", "expected integers")
        else:
            _expect(all((_is_int(v) or isinstance(v, float)) for v in value), f"{path}.value",
                    "expected numbers")
        count = math.prod(int(d) for d in shape)
        if count != len(value):
            raise ShapeArityError(f"{path}: value has {len(value)} elements, shape needs {count}")
        value = tuple(value)
    elif kind == "Weight" and dtype == "I64":
        raise SchemaError(f"{path}.value", "I64 constants must be inlined")
    return TensorInfo(name, dtype, shape, kind, value)


def _parse_node(entry, path, tensors):
    _expect(isinstance(entry, dict), path, "expected an object")
    node_id = entry.get("id")
    _expect(_is_int(node_id), f"{path}.id", "expected an integer")
    op = entry.get("op")
    _expect(isinstance(op, str), f"{path}.op", "expected a string")
    if op not in OPS:
        raise UnknownOperator(f"{path}: unknown operator {op!r}")
    lo, hi, n_out, required, optional = OPS[op]
    ins = entry.get("inputs")
    outs = entry.get("outputs")
    for key, names in (("inputs", ins), ("outputs", outs)):
        _expect(isinstance(names, list) and all(isinstance(x, str) for x in names),
                f"{path}.{key}", "expected a list of tensor names")
        for j, name in enumerate(names):
            _expect(name in tensors, f"{path}.{key}[{j}]", f"unknown tensor {name!r}")
    if len(ins) < lo or (hi is not None and len(ins) > hi) or len(outs) != n_out:
        raise ShapeArityError(f"{path}: {op} takes {lo}..{hi or 'n'} inputs and {n_out} outputs")
    attrs = entry.get("attrs", {})
    _expect(isinstance(attrs, dict), f"{path}.attrs", "expected an object")
    for key, kind in required.items():
        _expect(key in attrs, f"{path}.attrs", f"{op} requires attribute {key!r}")
    for key, value in attrs.items():
        kind = required.get(key) or optional.get(key)
        _expect(kind is not None, f"{path}.attrs.{key}", f"unexpected attribute for {op}")
        _check_attr(value, kind, f"{path}.attrs.{key}")
    if op == "Reshape":
        _expect(attrs["allowzero"] == 0, f"{path}.attrs.allowzero", "only allowzero=0 is supported")
    if op == "MatMulQuant":
        _expect(attrs["scheme"] in ("e0m4", "int4"), f"{path}.attrs.scheme", "expected e0m4 or int4")
    return NodeSpec(node_id, op, list(ins), list(outs), dict(attrs))


def _topo_sort(nodes, tensors):
    producer = {}
    for node in nodes:
        for out in node.outputs:
            info = tensors[out]
            if info.kind in ("GraphInput", "Weight"):
                raise SchemaError(f"node {node.id}", f"{out!r} is a {info.kind} and cannot be produced")
            if out in producer:
                raise SchemaError(f"node {node.id}", f"{out!r} is produced twice")
            producer[out] = node
    for info in tensors.values():
        if info.kind not in ("GraphInput", "Weight") and info.name not in producer:
            raise SchemaError(f"tensor {info.name}", "no node produces this tensor")
    # Kahn's algorithm, stable on the given order
    index = {id(n): i for i, n in enumerate(nodes)}
    deps = {}
    users: dict = {id(n): [] for n in nodes}
    for node in nodes:
        pre = {id(producer[x]) for x in node.inputs if x in producer}
        deps[id(node)] = len(pre)
        for p in pre:
            users[p].append(node)
    import heapq

    ready = [(index[id(n)], n.id) for n in nodes if deps[id(n)] == 0]
    by_index = {index[id(n)]: n for n in nodes}
    heapq.heapify(ready)
    order = []
    while ready:
        i, _ = heapq.heappop(ready)
        node = by_index[i]
        order.append(node)
        for user in users[id(node)]:
            deps[id(user)] -= 1
            if deps[id(user)] == 0:
                heapq.heappush(ready, (index[id(user)], user.id))
    if len(order) != len(nodes):
        stuck = sorted(n.id for n in nodes if deps[id(n)] > 0)
        raise CycleError(f"graph has a cycle through nodes {stuck}")
    return order


def _parse_meta(raw, tensors):
    if raw is None:
        return GraphMeta()
    _expect(isinstance(raw, dict), "$.meta", "expected an object")
    name = raw.get("name", "")
    _expect(isinstance(name, str), "$.meta.name", "expected a string")
    pairs = []
    raw_pairs = raw.get("kv_pairs", [])
    _expect(isinstance(raw_pairs, list), "$.meta.kv_pairs", "expected a list")
    for i, entry in enumerate(raw_pairs):
        path = f"$.meta.kv_pairs[{i}]"
        _expect(isinstance(entry, dict), path, "expected an object")
        vals = []
        for key in ("past", "new", "arena"):
            v = entry.get(key)
            _expect(isinstance(v, str), f"{path}.{key}", "expected a string")
            vals.append(v)
        past, new, arena = vals
        _expect(past in tensors and tensors[past].kind == "GraphInput", f"{path}.past",
                "must name a graph input")
        _expect(new in tensors, f"{path}.new", f"unknown tensor {new!r}")
        pairs.append(KVPair(past, new, arena))
    pos = raw.get("position_ids")
    if pos is not None:
        _expect(isinstance(pos, str) and pos in tensors, "$.meta.position_ids", "unknown tensor")
    return GraphMeta(name, pairs, pos)


def graph_from_dict(doc: Any) -> Graph:
    _expect(isinstance(doc, dict), "$", "expected a JSON object")
    symbols = _parse_symbols(doc.get("symbols", []))
    raw_tensors = doc.get("tensors")
    _expect(isinstance(raw_tensors, list), "$.tensors", "expected a list")
    tensors: dict = {}
    for i, entry in enumerate(raw_tensors):
        info = _parse_tensor(entry, f"$.tensors[{i}]", symbols)
        _expect(info.name not in tensors, f"$.tensors[{i}].name", f"duplicate tensor {info.name!r}")
        tensors[info.name] = info
    raw_nodes = doc.get("nodes")
    _expect(isinstance(raw_nodes, list), "$.nodes", "expected a list")
    nodes = [_parse_node(e, f"$.nodes[{i}]", tensors) for i, e in enumerate(raw_nodes)]
    ids = [n.id for n in nodes]
    _expect(len(set(ids)) == len(ids), "$.nodes", "duplicate node ids")
    nodes = _topo_sort(nodes, tensors)
    meta = _parse_meta(doc.get("meta"), tensors)
    return Graph(tensors, nodes, symbols, meta)


def load_graph(source) -> Graph:
    """Parse and validate a graph from bytes, str, path-like or binary stream."""
    if hasattr(source, "read"):
        source = source.read()
    elif not isinstance(source, (bytes, bytearray, str)):
        with open(source, "rb") as fh:
            source = fh.read()
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("$", f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return graph_from_dict(doc)


def graph_to_dict(g: Graph) -> dict:
    tensors = []
    for t in g.tensors.values():
        entry = {
            "name": t.name,
            "dtype": t.dtype,
            "shape": None if t.shape is None else [d.to_json() for d in t.shape],
            "kind": t.kind,
        }
        if t.value is not None:
            entry["value"] = list(t.value)
        tensors.append(entry)
    meta = {
        "name": g.meta.name,
        "kv_pairs": [{"past": p.past, "new": p.new, "arena": p.arena} for p in g.meta.kv_pairs],
    }
    if g.meta.position_ids is not None:
        meta["position_ids"] = g.meta.position_ids
    return {
        "symbols": [
            {"name": s} if mx is None else {"name": s, "max": mx} for s, mx in g.symbols.items()
        ],
        "tensors": tensors,
        "nodes": [
            {"id": n.id, "op": n.op, "inputs": n.inputs, "outputs": n.outputs, "attrs": n.attrs}
            for n in g.nodes
        ],
        "meta": meta,
    }


def save_graph(g: Graph) -> bytes:
    return (json.dumps(graph_to_dict(g), indent=1) + "\n").encode("utf-8")


# -- weight sidecar ------------------------------------------------------------------------------

WEIGHTS_MAGIC = b"LGW1"
_DTYPE_CODE = {name: i for i, name in enumerate(DTYPES)}


def save_weights(weights: dict) -> bytes:
    """Serialize ``name -> ndarray | QuantizedWeight`` into the LGW1 sidecar format."""
    from dynlite.quantfp4 import QuantizedWeight, pack_weight

    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    for name, value in weights.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        if isinstance(value, QuantizedWeight):
            dtype = "U4-E0M4" if value.scheme == "e0m4" else "U4-INT4"
            dims = value.shape
            payload = pack_weight(value)
            payload = struct.pack("<I", len(payload)) + payload
        else:
            arr = np.asarray(value)
            dtype = next((k for k, v in NUMPY_DTYPES.items() if arr.dtype == v), None)
            if dtype is None:
                raise TypeError(f"weight {name!r} has unsupported dtype {arr.dtype}")
            dims = arr.shape
            payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        buf.write(struct.pack("<BB", _DTYPE_CODE[dtype], len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
        buf.write(payload)
    return buf.getvalue()


def load_weights(source) -> dict:
    from dynlite.quantfp4 import unpack_weight

    if hasattr(source, "read"):
        data = source.read()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise BadMagic(f"expected {WEIGHTS_MAGIC!r}, found {data[:4]!r}")
    pos = 4
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedStream(f"needed {n} bytes at offset {pos}, stream has {len(data) - pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code >= len(DTYPES):
            raise BadMagic(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPES[code]
        if dtype.startswith("U4"):
            (blob_len,) = struct.unpack("<I", take(4))
            out[name] = unpack_weight(take(blob_len))
        else:
            np_dtype = np.dtype(NUMPY_DTYPES[dtype]).newbyteorder("<")
            count = math.prod(dims)
            arr = np.frombuffer(take(count * np_dtype.itemsize), dtype=np_dtype)
            out[name] = arr.astype(NUMPY_DTYPES[dtype]).reshape(dims)
    return out


# -- builder ----------------------------------------------------------------------------------------


class GraphBuilder:
    """Imperative helper for assembling graphs in code."""

    def __init__(self, name=""):
        self.tensors: dict = {}
        self.nodes: list = []
        self.symbols: dict = {}
        self.meta = GraphMeta(name=name)
        self.weights: dict = {}
        self._counter = 0

    def symbol(self, name, max=None):
        self.symbols[name] = max
        return SymExpr.symbol(name)

    def _add(self, name, dtype, shape, kind, value=None):
        if name in self.tensors:
            raise ConfigError(f"duplicate tensor {name!r}")
        dims = None if shape is None else tuple(
            d if isinstance(d, SymExpr) else (parse(d) if isinstance(d, str) else SymExpr.const(d))
            for d in shape
        )
        self.tensors[name] = TensorInfo(name, dtype, dims, kind, value)
        return name

    def input(self, name, dtype, shape):
        return self._add(name, dtype, shape, "GraphInput")

    def weight(self, name, array):
        arr = np.asarray(array)
        dtype = next(k for k, v in NUMPY_DTYPES.items() if arr.dtype == v)
        self.weights[name] = arr
        return self._add(name, dtype, arr.shape, "Weight")

    def const(self, name, values, dtype="I64", shape=None):
        vals = np.asarray(values, dtype=NUMPY_DTYPES[dtype])
        if shape is None:
            shape = vals.shape
        return self._add(name, dtype, shape, "Weight", tuple(vals.reshape(-1).tolist()))

    def op(self, op, inputs, attrs=None, *, name=None, dtype="F32", kind=None):
        if name is None:
            name = f"t{self._counter}_{op.lower()}"
        self._counter += 1
        if kind is None:
            kind = "ShapeValue" if dtype == "I64" else "Activation"
        self._add(name, dtype, None, kind)
        self.nodes.append(NodeSpec(len(self.nodes), op, list(inputs), [name], dict(attrs or {})))
        return name

    def mark_output(self, name):
        self.tensors[name].kind = "GraphOutput"
        return name

    def build(self, derive=True) -> Graph:
        g = Graph(dict(self.tensors), list(self.nodes), dict(self.symbols), copy.deepcopy(self.meta))
        g = load_graph(save_graph(g))
        if derive:
            from dynlite.shapeinfer import derive_shapes

            shapes = derive_shapes(g).shapes
            for name, info in g.tensors.items():
                if info.shape is None:
                    info.shape = shapes[name]
        return g


# -- toy decoder -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    head_dim: int = 16
    vocab: int = 97
    seed: int = 7
    ffn: int | None = None
    max_seq: int = 256
    layout: str = "glm"  # "glm": [seq, 1, 2H, D]; "llama": [1, 2H, seq, D]
    eps: float = 1e-5

    def validate(self):
        for key in ("layers", "hidden", "heads", "head_dim", "vocab", "max_seq"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden ({self.hidden}) must equal heads * head_dim ({self.heads}*{self.head_dim})"
            )
        if self.ffn is not None and self.ffn < 1:
            raise ConfigError("ffn must be >= 1")
        if self.layout not in ("glm", "llama"):
            raise ConfigError(f"unknown layout {self.layout!r}")


def _rms_norm_unfused(b: GraphBuilder, x, weight):
    sq = b.op("Pow", [x, "const.two"])
    ms = b.op("ReduceMean", [sq], {"axes": [-1], "keepdims": 1})
    shifted = b.op("Add", [ms, "const.eps"])
    root = b.op("Sqrt", [shifted])
    normed = b.op("Div", [x, root])
    return b.op("Mul", [normed, weight])


def build_toy_decoder(cfg: ToyConfig = ToyConfig()):
    """Build a small decoder-only transformer graph and its weights.

    Returns ``(graph, weights)``. Same config and seed give identical weights.
    """
    cfg.validate()
    H, D, hid = cfg.heads, cfg.head_dim, cfg.hidden
    ffn = cfg.ffn or 4 * hid
    rng = np.random.default_rng(cfg.seed)

    def randn(*shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    b = GraphBuilder(name=f"toy-decoder-{cfg.layout}")
    b.symbol("N", cfg.max_seq)
    b.symbol("sumN", cfg.max_seq)
    b.input("input_ids", "I64", [1, "N"])
    b.input("position_ids", "I64", [1, "N"])
    b.input("attn_mask", "F32", [1, 1, "N", "sumN"])
    b.meta.position_ids = "position_ids"

    b.const("const.two", [2.0], "F32")
    b.const("const.eps", [cfg.eps], "F32")
    b.const("const.scale", [1.0 / math.sqrt(D)], "F32")
    b.const("const.idx1", 1, "I64", shape=())
    b.const("const.out_shape", [1, -1, hid], "I64")
    if cfg.layout == "glm":
        b.const("const.head_tail", [1, H, D], "I64")
    else:
        b.const("const.one", [1], "I64")
        b.const("const.head_tail", [H, D], "I64")

    embed = b.weight("embed.weight", randn(cfg.vocab, hid, std=1.0))
    pos_embed = b.weight("pos_embed.weight", randn(cfg.max_seq, hid, std=0.5))
    tok = b.op("Gather", [embed, "input_ids"], {"axis": 0})
    pos = b.op("Gather", [pos_embed, "position_ids"], {"axis": 0})
    x = b.op("Add", [tok, pos], name="hidden.0")

    for layer in range(cfg.layers):
        p = f"layers.{layer}"
        past_shape = ["sumN - N", 1, 2 * H, D] if cfg.layout == "glm" else [1, 2 * H, "sumN - N", D]
        past = b.input(f"past_kv.{layer}", "F32", past_shape)

        attn_w = b.weight(f"{p}.attn_norm.weight", 1.0 + randn(hid, std=0.1))
        h = _rms_norm_unfused(b, x, attn_w)
        q = b.op("MatMul", [h, b.weight(f"{p}.q_proj.weight", randn(hid, hid, std=hid ** -0.5))])
        k = b.op("MatMul", [h, b.weight(f"{p}.k_proj.weight", randn(hid, hid, std=hid ** -0.5))])
        v = b.op("MatMul", [h, b.weight(f"{p}.v_proj.weight", randn(hid, hid, std=hid ** -0.5))])

        # shape subgraph: N taken from the runtime shape of h
        hs = b.op("Shape", [h], dtype="I64")
        n = b.op("Gather", [hs, "const.idx1"], {"axis": 0}, dtype="I64")
        n1 = b.op("Unsqueeze", [n], {"axes": [0]}, dtype="I64")
        if cfg.layout == "glm":
            target = b.op("Concat", [n1, "const.head_tail"], {"axis": 0}, dtype="I64")
        else:
            target = b.op("Concat", ["const.one", n1, "const.head_tail"], {"axis": 0}, dtype="I64")

        q4 = b.op("Reshape", [q, target], {"allowzero": 0})
        k4 = b.op("Reshape", [k, target], {"allowzero": 0})
        v4 = b.op("Reshape", [v, target], {"allowzero": 0})
        if cfg.layout == "glm":
            # [N, 1, H, D] -> cache rows [N, 1, 2H, D], seq-first
            kv_new = b.op("Concat", [k4, v4], {"axis": 2}, name=f"kv_new.{layer}")
            kv_all = b.op("Concat", [past, kv_new], {"axis": 0}, name=f"present_kv.{layer}")
            keys = b.op("Slice", [kv_all], {"starts": [0], "ends": [H], "axes": [2]})
            vals = b.op("Slice", [kv_all], {"starts": [H], "ends": [2 * H], "axes": [2]})
            k_t = b.op("Transpose", [keys], {"perm": [1, 2, 3, 0]})  # [1, H, D, sumN]
            v_t = b.op("Transpose", [vals], {"perm": [1, 2, 0, 3]})  # [1, H, sumN, D]
            q_t = b.op("Transpose", [q4], {"perm": [1, 2, 0, 3]})  # [1, H, N, D]
        else:
            # [1, N, H, D] -> [1, H, N, D]; cache [1, 2H, seq, D]
            q_t = b.op("Transpose", [q4], {"perm": [0, 2, 1, 3]})
            k_h = b.op("Transpose", [k4], {"perm": [0, 2, 1, 3]})
            v_h = b.op("Transpose", [v4], {"perm": [0, 2, 1, 3]})
            kv_new = b.op("Concat", [k_h, v_h], {"axis": 1}, name=f"kv_new.{layer}")
            kv_all = b.op("Concat", [past, kv_new], {"axis": 2}, name=f"present_kv.{layer}")
            keys = b.op("Slice", [kv_all], {"starts": [0], "ends": [H], "axes": [1]})
            v_t = b.op("Slice", [kv_all], {"starts": [H], "ends": [2 * H], "axes": [1]})
            k_t = b.op("Transpose", [keys], {"perm": [0, 1, 3, 2]})
        b.mark_output(kv_all)
        b.meta.kv_pairs.append(KVPair(past, kv_all, f"arena.{layer}"))

        scores = b.op("MatMul", [q_t, k_t])  # [1, H, N, sumN]
        scaled = b.op("Mul", [scores, "const.scale"])
        masked = b.op("Add", [scaled, "attn_mask"])
        probs = b.op("Softmax", [masked], {"axis": -1})
        ctx = b.op("MatMul", [probs, v_t])  # [1, H, N, D]
        ctx_t = b.op("Transpose", [ctx], {"perm": [0, 2, 1, 3]})
        merged = b.op("Reshape", [ctx_t, "const.out_shape"], {"allowzero": 0})
        o = b.op("MatMul", [merged, b.weight(f"{p}.o_proj.weight", randn(hid, hid, std=hid ** -0.5))])
        x = b.op("Add", [x, o], name=f"hidden.{layer}.attn")

        mlp_w = b.weight(f"{p}.mlp_norm.weight", 1.0 + randn(hid, std=0.1))
        h2 = _rms_norm_unfused(b, x, mlp_w)
        gate = b.op("MatMul", [h2, b.weight(f"{p}.gate_proj.weight", randn(hid, ffn, std=hid ** -0.5))])
        up = b.op("MatMul", [h2, b.weight(f"{p}.up_proj.weight", randn(hid, ffn, std=hid ** -0.5))])
        act = b.op("Silu", [gate])
        prod = b.op("Mul", [act, up])
        down = b.op("MatMul", [prod, b.weight(f"{p}.down_proj.weight", randn(ffn, hid, std=ffn ** -0.5))])
        x = b.op("Add", [x, down], name=f"hidden.{layer + 1}")

    final_w = b.weight("final_norm.weight", 1.0 + randn(hid, std=0.1))
    hf = _rms_norm_unfused(b, x, final_w)
    b.op("MatMul", [hf, b.weight("lm_head.weight", randn(hid, cfg.vocab, std=hid ** -0.5))],
         name="logits")
    b.mark_output("logits")
    graph = b.build()
    return graph, dict(b.weights)


def matmul_weight_names(g: Graph) -> list:
    """Weights consumed as the right operand of a MatMul."""
    names = []
    for node in g.nodes:
        if node.op == "MatMul" and g.tensors[node.inputs[1]].kind == "Weight":
            w = node.inputs[1]
            if g.tensors[w].rank == 2 and w not in names:
                names.append(w)
    return names
