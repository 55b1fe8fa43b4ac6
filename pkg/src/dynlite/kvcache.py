"""Per-layer KV arenas with zero-copy sub-tensor views.

Each layer's cache lives in one buffer sized for ``max_seq`` tokens. As long
as every dim in front of the sequence dim is 1, the tokens [a, b) occupy one
contiguous element range, so past and new caches are plain views into the
arena and appending is a single write at offset ``cur_len * trailing``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from dynlite.errors import CapacityExceeded, MetadataMissing, PositionMismatch, ShapeMismatch
from dynlite.graphir import Graph, KVPair, NodeSpec, TensorInfo
from dynlite.symexpr import SymExpr, as_expr


@dataclass(frozen=True)
class LayoutCheck:
    valid: bool
    perm: tuple | None = None

    def __repr__(self):
        return "Valid" if self.valid else f"NeedsTranspose({list(self.perm)})"


def _is_one(d) -> bool:
    e = as_expr(d)
    return e.is_constant() and int(e) == 1


def validate_layout(shape, seq_dim: int) -> LayoutCheck:
    """Valid iff every dim before the sequence dim is a literal 1."""
    rank = len(shape)
    if not 0 <= seq_dim < rank:
        raise IndexError(f"seq_dim {seq_dim} out of range for rank {rank}")
    first = next((j for j in range(seq_dim) if not _is_one(shape[j])), None)
    if first is None:
        return LayoutCheck(True)
    perm = list(range(rank))
    perm.remove(seq_dim)
    perm.insert(first, seq_dim)
    return LayoutCheck(False, tuple(perm))


def apply_perm(shape, perm):
    return tuple(shape[p] for p in perm)


def inverse_perm(perm):
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


@dataclass
class SubTensorView:
    arena: "CacheArena"
    offset: int  # elements
    shape: tuple

    @property
    def length(self):
        return self.shape[self.arena.seq_dim]

    def array(self) -> np.ndarray:
        count = math.prod(self.shape)
        return self.arena.storage[self.offset:self.offset + count].reshape(self.shape)


class CacheArena:
    """Storage for one layer's KV cache; allocated once, appended in place."""

    def __init__(self, layer, shape, seq_dim, max_seq, dtype=np.float32, allocator=None):
        check = validate_layout(shape, seq_dim)
        if not check.valid:
            raise ShapeMismatch(f"arena layout {list(shape)} needs transpose {list(check.perm)}")
        self.layer = layer
        self.seq_dim = seq_dim
        self.max_seq = max_seq
        self.dtype = np.dtype(dtype)
        dims = [int(d) for j, d in enumerate(shape) if j != seq_dim]
        self.dims = tuple(dims[:seq_dim]) + (max_seq,) + tuple(dims[seq_dim:])
        self.trailing = math.prod(self.dims[seq_dim + 1:])
        count = math.prod(self.dims)
        if allocator is not None:
            self.storage = allocator.empty((count,), self.dtype)
        else:
            self.storage = np.empty(count, dtype=self.dtype)
        self.storage[:] = 0
        self.cur_len = 0

    @property
    def nbytes(self):
        return self.storage.nbytes

    def _shape(self, length):
        return self.dims[: self.seq_dim] + (length,) + self.dims[self.seq_dim + 1:]

    def view(self, start, length) -> SubTensorView:
        if start < 0 or length < 0 or start + length > self.max_seq:
            raise CapacityExceeded(
                f"layer {self.layer}: tokens [{start}, {start + length}) exceed max_seq {self.max_seq}"
            )
        return SubTensorView(self, start * self.trailing, self._shape(length))

    def view_past(self) -> SubTensorView:
        return self.view(0, self.cur_len)

    def view_new(self, new_len) -> SubTensorView:
        return self.view(self.cur_len, new_len)

    def append(self, new_kv: np.ndarray, position: int) -> np.ndarray:
        """Write new_kv at ``position`` (== cur_len); return a view of all cached tokens."""
        if position != self.cur_len:
            raise PositionMismatch(f"layer {self.layer}: append at {position}, cache holds {self.cur_len}")
        new_len = new_kv.shape[self.seq_dim] if new_kv.ndim == len(self.dims) else -1
        if new_len < 0:
            raise ShapeMismatch(f"layer {self.layer}: new cache has rank {new_kv.ndim}")
        target = self.view_new(new_len)
        if tuple(new_kv.shape) != target.shape:
            raise ShapeMismatch(f"layer {self.layer}: new cache {new_kv.shape} vs slot {target.shape}")
        target.array()[...] = new_kv
        self.cur_len += new_len
        return self.view_past().array()

    def contents(self) -> np.ndarray:
        return self.view_past().array()

    def reset(self):
        self.cur_len = 0

    def dump(self) -> bytes:
        """Header {layer, cur_len, max_seq, rank, dims} then the cached payload, little-endian."""
        head = struct.pack("<IIIB", self.layer, self.cur_len, self.max_seq, len(self.dims))
        head += struct.pack(f"<{len(self.dims)}I", *self.dims)
        return head + self.contents().astype(self.dtype.newbyteorder("<")).tobytes()


def kv_copy_bytes(cur_len: int, trailing: int, dtype_bytes: int = 4) -> int:
    """Bytes the copy-based pipeline moves to feed a cache of cur_len tokens back in."""
    return cur_len * trailing * dtype_bytes


# -- graph rewrite --------------------------------------------------------------------------------


def _fresh(g: Graph, base):
    name, k = base, 0
    while name in g.tensors:
        k += 1
        name = f"{base}.{k}"
    return name


def rewrite_graph_outputs(g: Graph) -> Graph:
    """Turn each registered Concat(past, new) into an in-place KVAppend.

    The graph then outputs only the freshly computed slice. Caches whose
    sequence dim is not the first non-1 dim are stored transposed: the new
    slice is transposed into arena layout before the append and the full
    cache is transposed back for the attention that reads it.
    """
    if not g.meta.kv_pairs:
        return g
    if g.meta.position_ids is None:
        raise MetadataMissing("kv pairs are declared but position_ids is not")
    g = g.copy()
    prod = g.producers()
    pairs = []
    for pair in g.meta.kv_pairs:
        node = prod.get(pair.new)
        if node is None or node.op != "Concat" or len(node.inputs) != 2 or node.inputs[0] != pair.past:
            raise MetadataMissing(f"{pair.new!r} is not Concat({pair.past!r}, new)")
        past, new = node.inputs
        axis = node.attrs["axis"] % len(g.tensors[past].shape)
        check = validate_layout(g.tensors[past].shape, axis)
        present = pair.new
        info = g.tensors[present]
        info.kind = "Activation"
        idx = g.nodes.index(node)
        if check.valid:
            g.nodes[idx] = NodeSpec(node.id, "KVAppend", [past, new, g.meta.position_ids], [present],
                                    {"axis": axis})
            slice_name = new
        else:
            perm = list(check.perm)
            inv = list(inverse_perm(perm))
            new_axis = perm.index(axis)
            past_info = g.tensors[past]
            past_info.shape = apply_perm(past_info.shape, perm)
            new_info = g.tensors[new]
            slice_name = _fresh(g, f"{new}.arena")
            full_name = _fresh(g, f"{present}.arena")
            g.tensors[slice_name] = TensorInfo(
                slice_name, new_info.dtype,
                None if new_info.shape is None else apply_perm(new_info.shape, perm), "Activation")
            g.tensors[full_name] = TensorInfo(
                full_name, info.dtype, None if info.shape is None else apply_perm(info.shape, perm),
                "Activation")
            base = g.next_node_id()
            g.nodes[idx:idx + 1] = [
                NodeSpec(base, "Transpose", [new], [slice_name], {"perm": perm}),
                NodeSpec(node.id, "KVAppend", [past, slice_name, g.meta.position_ids], [full_name],
                         {"axis": new_axis, "perm": perm}),
                NodeSpec(base + 1, "Transpose", [full_name], [present], {"perm": inv}),
            ]
        g.tensors[slice_name].kind = "GraphOutput"
        pairs.append(KVPair(past, slice_name, pair.arena))
    g.meta.kv_pairs = pairs
    return g


def arena_specs(g: Graph):
    """(pair, seq_dim, shape) for each cache after rewriting: where the arena's sequence axis sits."""
    out = []
    for pair in g.meta.kv_pairs:
        users = [n for n in g.nodes if pair.past in n.inputs and n.op in ("KVAppend", "Concat")]
        if not users:
            raise MetadataMissing(f"no append consumes {pair.past!r}")
        axis = users[0].attrs["axis"]
        out.append((pair, axis % len(g.tensors[pair.past].shape), g.tensors[pair.past].shape))
    return out


def trailing_product(shape, seq_dim) -> int:
    dims = [as_expr(d) for d in shape[seq_dim + 1:]]
    p = SymExpr.const(1)
    for d in dims:
        p = p * d
    return int(p)
