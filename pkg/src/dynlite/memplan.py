"""Activation memory reuse over symbolic sizes, and up-front preallocation.

Sizes are SymExpr byte counts. A freed block is reused only when ``compare``
proves it is at least as large as the new tensor for every binding, so the
plan is valid for the whole range of sequence lengths at once and the arena
can be sized once, at the maximum bindings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dynlite.errors import ExceedsPreallocation, OddPackingError
from dynlite.graphir import Graph
from dynlite.symexpr import CompareResult, SymExpr, compare, upper_bound

FOREVER = math.inf
ALIAS_OPS = frozenset({"Reshape", "Squeeze", "Unsqueeze"})

DTYPE_BYTES = {"F32": 4, "F16": 2, "I64": 8, "BOOL": 1}


def size_expr(t, shape=None) -> SymExpr:
    """Byte size of a tensor as a polynomial in the shape symbols."""
    dtype = t.dtype
    dims = t.shape if shape is None else shape
    count = SymExpr.const(1)
    for d in dims:
        count = count * d
    if dtype.startswith("U4"):
        inner = dims[-1] if dims else SymExpr.const(1)
        if not inner.is_constant() or int(inner) % 2:
            raise OddPackingError(f"{t.name}: innermost dim {inner} cannot be nibble-packed")
        return count.div_exact(2)
    return count * DTYPE_BYTES[dtype]


@dataclass
class Lifetime:
    tensor: str
    def_index: int
    last_use: float

    def overlaps(self, other: "Lifetime") -> bool:
        return self.def_index <= other.last_use and other.def_index <= self.last_use


@dataclass
class Block:
    id: int
    size: SymExpr
    max_bytes: int


@dataclass
class MemoryPlan:
    blocks: list
    assignment: dict  # tensor -> block id
    lifetimes: dict  # tensor -> Lifetime
    sizes: dict  # tensor -> SymExpr
    aliases: dict = field(default_factory=dict)  # alias tensor -> root tensor
    max_bindings: dict = field(default_factory=dict)

    @property
    def peak_bytes(self) -> int:
        return sum(b.max_bytes for b in self.blocks)

    @property
    def naive_bytes(self) -> int:
        return sum(upper_bound(s, self.max_bindings) for s in self.sizes.values())

    @property
    def savings_ratio(self) -> float:
        naive = self.naive_bytes
        return 0.0 if naive == 0 else 1.0 - self.peak_bytes / naive

    def block_of(self, tensor):
        return self.assignment[self.aliases.get(tensor, tensor)]

    def report(self) -> dict:
        return {
            "blocks": [
                {"id": b.id, "size_expr": str(b.size), "max_bytes": b.max_bytes} for b in self.blocks
            ],
            "assignments": dict(self.assignment),
            "peak_bytes": self.peak_bytes,
            "naive_bytes": self.naive_bytes,
            "savings_ratio": self.savings_ratio,
        }


def alias_root(g: Graph, name: str, prod=None) -> str:
    prod = prod if prod is not None else g.producers()
    while name in prod and prod[name].op in ALIAS_OPS:
        name = prod[name].inputs[0]
    return name


def compute_lifetimes(g: Graph, program, shapes=None, exclude=()):
    """Lifetimes, sizes and aliases for the tensors a program materializes.

    Graph inputs are defined at index -1. Outputs of metadata-only ops alias
    their root buffer, which then lives as long as the longest-lived alias.
    Weights, KVAppend outputs and anything in ``exclude`` get no block.
    """
    shapes = shapes or {}
    exclude = set(exclude)
    prod = {o: n for n in program for o in n.outputs}
    outputs = set(g.outputs)

    def root(name):
        while name in prod and prod[name].op in ALIAS_OPS:
            name = prod[name].inputs[0]
        return name

    owned = []
    for t in g.tensors.values():
        if t.kind == "GraphInput" and t.name not in exclude:
            owned.append((t.name, -1))
    aliases = {}
    for i, node in enumerate(program):
        for out in node.outputs:
            if node.op in ALIAS_OPS:
                aliases[out] = root(out)
            elif node.op != "KVAppend" and out not in exclude:
                owned.append((out, i))
    lt = {name: Lifetime(name, d, d) for name, d in owned}

    def touch(name, index):
        r = aliases.get(name, name)
        if r in lt:
            lt[r].last_use = max(lt[r].last_use, index)

    for i, node in enumerate(program):
        for x in node.inputs:
            touch(x, i)
    for name in outputs:
        touch(name, FOREVER)
    sizes = {}
    for name in lt:
        info = g.tensors[name]
        sizes[name] = size_expr(info, shapes.get(name))
    aliases = {a: r for a, r in aliases.items() if r in lt}
    return lt, sizes, aliases


def _fits(block: Block, need: SymExpr) -> bool:
    return compare(block.size, need) in (CompareResult.EQUAL, CompareResult.PROVABLY_GE)


def plan(lifetimes: dict, sizes: dict, max_bindings: dict, aliases=None) -> MemoryPlan:
    """Greedy best-fit sweep in definition order."""
    order = sorted(lifetimes.values(), key=lambda l: l.def_index)  # stable on insertion
    blocks: list = []
    free_at: dict = {}  # block id -> last_use of current occupant
    assignment = {}
    for life in order:
        need = sizes[life.tensor]
        best = None
        for b in blocks:
            if free_at[b.id] < life.def_index and _fits(b, need):
                if best is None or b.max_bytes < best.max_bytes:
                    best = b
        if best is None:
            best = Block(len(blocks), need, upper_bound(need, max_bindings))
            blocks.append(best)
        assignment[life.tensor] = best.id
        free_at[best.id] = life.last_use
    return MemoryPlan(blocks, assignment, dict(lifetimes), dict(sizes), dict(aliases or {}),
                      dict(max_bindings))


def plan_memory(g: Graph, program, shapes, max_bindings=None, exclude=()) -> MemoryPlan:
    if max_bindings is None:
        max_bindings = {s: m for s, m in g.symbols.items() if m is not None}
    lt, sizes, aliases = compute_lifetimes(g, program, shapes, exclude)
    return plan(lt, sizes, max_bindings, aliases)


def verify_plan(mp: MemoryPlan) -> list:
    """Violations of the plan invariants; empty when the plan is sound."""
    problems = []
    by_block: dict = {}
    for name, bid in mp.assignment.items():
        by_block.setdefault(bid, []).append(name)
    for bid, names in by_block.items():
        block = mp.blocks[bid]
        for name in names:
            verdict = compare(block.size, mp.sizes[name])
            if verdict not in (CompareResult.EQUAL, CompareResult.PROVABLY_GE):
                problems.append(f"block {bid} ({block.size}) not provably >= {name} ({mp.sizes[name]})")
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if mp.lifetimes[a].overlaps(mp.lifetimes[b]):
                    problems.append(f"{a} and {b} share block {bid} while both live")
    for b in mp.blocks:
        if b.max_bytes != upper_bound(b.size, mp.max_bindings):
            problems.append(f"block {b.id} max size mismatch")
    return problems


# -- preallocation --------------------------------------------------------------------------------


class Allocator:
    """Counts every buffer handed out; the decode loop asserts the count stays flat."""

    def __init__(self):
        self.count = 0
        self.bytes = 0

    def alloc(self, nbytes: int) -> np.ndarray:
        self.count += 1
        self.bytes += nbytes
        return np.empty(max(int(nbytes), 1), dtype=np.uint8)

    def empty(self, shape, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        buf = self.alloc(math.prod(shape) * dtype.itemsize)
        return buf[: math.prod(shape) * dtype.itemsize].view(dtype).reshape(shape)


class ArenaSet:
    """One contiguous buffer per block, sized at the maximum bindings."""

    def __init__(self, mp: MemoryPlan, allocator: Allocator | None = None):
        self.plan = mp
        self.allocator = allocator or Allocator()
        self.buffers = [self.allocator.alloc(b.max_bytes) for b in mp.blocks]

    @property
    def total_bytes(self):
        return sum(b.max_bytes for b in self.plan.blocks)

    def view(self, tensor: str, shape, dtype) -> np.ndarray:
        bid = self.plan.block_of(tensor)
        dtype = np.dtype(dtype)
        nbytes = math.prod(shape) * dtype.itemsize
        if nbytes > self.plan.blocks[bid].max_bytes:
            raise ExceedsPreallocation(
                f"{tensor} needs {nbytes} bytes, block {bid} holds {self.plan.blocks[bid].max_bytes}"
            )
        return self.buffers[bid][:nbytes].view(dtype).reshape(shape)


def preallocate(mp: MemoryPlan, max_bindings=None, allocator=None) -> ArenaSet:
    if max_bindings is not None:
        for sym, v in max_bindings.items():
            have = mp.max_bindings.get(sym)
            if have is not None and v > have:
                raise ExceedsPreallocation(f"plan was built for {sym} <= {have}, asked for {v}")
    return ArenaSet(mp, allocator)
