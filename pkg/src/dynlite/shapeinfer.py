"""Symbolic shape derivation, node classification, fusion and scheduling.

Every tensor gets a shape made of SymExpr dims. I64 tensors computed from
shapes (the outputs of Shape and whatever arithmetic follows it) are executed
symbolically during derivation, so a Reshape target like
``Concat(Unsqueeze(Gather(Shape(x), 1)), [1, H, D])`` becomes the vector
``[N, 1, H, D]`` at compile time and the nodes that computed it never run.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from dynlite.errors import (
    BroadcastError,
    ExceedsPreallocation,
    NonDivisibleReshape,
    NonPositiveDim,
    NotDivisible,
    RankMismatch,
    ScheduleCycle,
    ShapeInferenceError,
    UnboundSymbol,
    UnsupportedDynamicAttr,
)
from dynlite.graphir import (
    BINARY_ELEMENTWISE,
    UNARY_ELEMENTWISE,
    Graph,
    NodeSpec,
    data_inputs,
)
from dynlite.symexpr import SymExpr, div_exact

ONE = SymExpr.const(1)
# Slice ends at or beyond this mean "to the end of the axis"
SLICE_END_MAX = 2 ** 31 - 1


class NodeClass(enum.Enum):
    SHAPE = "ShapeComputing"
    TENSOR = "TensorComputing"

    @property
    def letter(self):
        return "S" if self is NodeClass.SHAPE else "T"


@dataclass
class ShapeResult:
    shapes: dict  # tensor -> tuple[SymExpr]
    values: dict  # I64 tensor -> tuple[SymExpr] (flattened), when known symbolically


# -- helpers -------------------------------------------------------------------------------------


def _norm_axis(axis, rank, node_id):
    if not -rank <= axis < rank:
        raise RankMismatch(f"axis {axis} out of range for rank {rank}", node_id)
    return axis % rank


def _literal(d: SymExpr):
    return d.constant_term if d.is_constant() else None


def broadcast_shapes(a, b, node_id=None):
    """Right-aligned broadcasting; symbolic dims only broadcast against literal 1."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else ONE
        db = b[-i] if i <= len(b) else ONE
        if da == db:
            out.append(da)
        elif da == ONE:
            out.append(db)
        elif db == ONE:
            out.append(da)
        else:
            raise BroadcastError(f"cannot broadcast {da} against {db}", node_id)
    return tuple(reversed(out))


def _product(dims):
    p = ONE
    for d in dims:
        p = p * d
    return p


def _slice_dim(dim, start, end, node_id):
    """Length of dim[start:end] (step 1)."""
    lit = _literal(dim)
    if lit is not None:
        return SymExpr.const(len(range(*slice(start, end).indices(lit))))
    if start < 0:
        raise UnsupportedDynamicAttr(f"negative slice start on symbolic dim {dim}", node_id)
    if end >= SLICE_END_MAX:
        return dim - start
    if end < 0:
        return dim + end - start
    raise UnsupportedDynamicAttr(f"finite slice end {end} on symbolic dim {dim}", node_id)


# -- derivation ------------------------------------------------------------------------------------


def _values_elementwise(op, xs, ys):
    if len(xs) == 1:
        xs = xs * len(ys)
    if len(ys) == 1:
        ys = ys * len(xs)
    out = []
    for x, y in zip(xs, ys):
        if op == "Add":
            out.append(x + y)
        elif op == "Sub":
            out.append(x - y)
        elif op == "Mul":
            out.append(x * y)
        elif op == "Div":
            try:
                out.append(div_exact(x, y))
            except (NotDivisible, ArithmeticError):
                return None
        else:
            return None
    return tuple(out)


def _infer_node(node: NodeSpec, shapes, values, tensors):
    op, nid, a = node.op, node.id, node.attrs
    ins = [shapes[x] for x in node.inputs]
    vals = [values.get(x) for x in node.inputs]
    value = None

    if op in ("Identity", "Cast"):
        shape, value = ins[0], vals[0]
    elif op == "Shape":
        shape, value = (SymExpr.const(len(ins[0])),), tuple(ins[0])
    elif op == "Gather":
        data, idx = ins
        axis = _norm_axis(a["axis"], len(data), nid)
        shape = data[:axis] + idx + data[axis + 1:]
        if vals[0] is not None and vals[1] is not None and len(data) == 1:
            picks = []
            for i in vals[1]:
                k = _literal(i)
                if k is None:
                    picks = None
                    break
                if not -len(vals[0]) <= k < len(vals[0]):
                    raise RankMismatch(f"gather index {k} out of range", nid)
                picks.append(vals[0][k])
            value = None if picks is None else tuple(picks)
    elif op in ("Concat", "KVAppend"):
        parts = ins if op == "Concat" else ins[:2]
        rank = len(parts[0])
        if any(len(p) != rank for p in parts):
            raise RankMismatch("concat inputs differ in rank", nid)
        axis = _norm_axis(a["axis"], rank, nid)
        for p in parts[1:]:
            for j in range(rank):
                if j != axis and p[j] != parts[0][j]:
                    raise BroadcastError(f"concat dim {j}: {parts[0][j]} vs {p[j]}", nid)
        total = parts[0][axis]
        for p in parts[1:]:
            total = total + p[axis]
        shape = parts[0][:axis] + (total,) + parts[0][axis + 1:]
        if op == "Concat" and all(v is not None for v in vals):
            value = tuple(x for v in vals for x in v)
    elif op == "Slice":
        starts, ends, axes = a["starts"], a["ends"], a["axes"]
        if not len(starts) == len(ends) == len(axes):
            raise RankMismatch("starts/ends/axes differ in length", nid)
        shape = list(ins[0])
        for s, e, ax in zip(starts, ends, axes):
            ax = _norm_axis(ax, len(shape), nid)
            shape[ax] = _slice_dim(shape[ax], s, e, nid)
        shape = tuple(shape)
        if vals[0] is not None and len(ins[0]) == 1 and all(d.is_constant() for d in shape):
            s, e = starts[0], ends[0]
            value = tuple(vals[0][slice(s, e)])
    elif op == "Reshape":
        shape = _reshape(ins[0], vals[1], ins[1], nid)
        value = vals[0]
    elif op == "Transpose":
        perm = a["perm"]
        if sorted(perm) != list(range(len(ins[0]))):
            raise RankMismatch(f"perm {perm} does not match rank {len(ins[0])}", nid)
        shape = tuple(ins[0][p] for p in perm)
    elif op == "Unsqueeze":
        rank = len(ins[0]) + len(a["axes"])
        axes = sorted(_norm_axis(x, rank, nid) for x in a["axes"])
        shape = list(ins[0])
        for ax in axes:
            shape.insert(ax, ONE)
        shape, value = tuple(shape), vals[0]
    elif op == "Squeeze":
        axes = {_norm_axis(x, len(ins[0]), nid) for x in a["axes"]}
        for ax in axes:
            if ins[0][ax] != ONE:
                raise RankMismatch(f"cannot squeeze dim {ins[0][ax]}", nid)
        shape = tuple(d for j, d in enumerate(ins[0]) if j not in axes)
        value = vals[0]
    elif op in BINARY_ELEMENTWISE:
        shape = broadcast_shapes(ins[0], ins[1], nid)
        if vals[0] is not None and vals[1] is not None:
            value = _values_elementwise(op, vals[0], vals[1])
    elif op in UNARY_ELEMENTWISE:
        shape = ins[0]
        if op == "Neg" and vals[0] is not None:
            value = tuple(-x for x in vals[0])
    elif op == "FusedElementwise":
        shape = ins[0]
        for other in ins[1:]:
            shape = broadcast_shapes(shape, other, nid)
    elif op == "ReduceMean":
        axes = {_norm_axis(x, len(ins[0]), nid) for x in a["axes"]}
        if a.get("keepdims", 1):
            shape = tuple(ONE if j in axes else d for j, d in enumerate(ins[0]))
        else:
            shape = tuple(d for j, d in enumerate(ins[0]) if j not in axes)
    elif op in ("Softmax", "RMSNorm", "LayerNorm"):
        if op == "Softmax":
            _norm_axis(a["axis"], len(ins[0]), nid)
        shape = ins[0]
    elif op == "MatMul":
        x, w = ins
        if len(x) < 2 or len(w) < 2:
            raise RankMismatch("MatMul operands must have rank >= 2", nid)
        if x[-1] != w[-2]:
            raise BroadcastError(f"inner dims differ: {x[-1]} vs {w[-2]}", nid)
        batch = broadcast_shapes(x[:-2], w[:-2], nid)
        shape = batch + (x[-2], w[-1])
    elif op == "MatMulQuant":
        x, w = ins
        if len(w) != 2:
            raise RankMismatch("quantized weight must be rank 2", nid)
        if x[-1] != w[0]:
            raise BroadcastError(f"inner dims differ: {x[-1]} vs {w[0]}", nid)
        shape = x[:-1] + (w[1],)
    else:  # pragma: no cover - the loader rejects unknown ops
        raise ShapeInferenceError(f"no shape rule for {op}", nid)

    out = node.outputs[0]
    if tensors[out].dtype == "I64" and value is not None:
        count = _literal(_product(shape)) if all(d.is_constant() for d in shape) else None
        if count != len(value):
            value = None
    else:
        value = None
    return shape, value


def _reshape(src, target_value, target_shape, nid):
    if target_value is None:
        raise UnsupportedDynamicAttr("reshape target is not known at compile time", nid)
    total = _product(src)
    dims = []
    infer_at = None
    for j, d in enumerate(target_value):
        lit = _literal(d)
        if lit == -1:
            if infer_at is not None:
                raise NonDivisibleReshape("more than one -1 in reshape target", nid)
            infer_at = j
            dims.append(None)
        elif lit == 0:
            if j >= len(src):
                raise RankMismatch("reshape 0 refers past the input rank", nid)
            dims.append(src[j])
        elif lit is not None and lit < 0:
            raise NonDivisibleReshape(f"negative reshape dim {lit}", nid)
        else:
            dims.append(d)
    known = _product([d for d in dims if d is not None])
    if infer_at is not None:
        try:
            dims[infer_at] = div_exact(total, known)
        except (NotDivisible, ArithmeticError):
            raise NonDivisibleReshape(f"{total} is not divisible by {known}", nid) from None
    elif known != total:
        raise NonDivisibleReshape(f"element count {total} does not match target {known}", nid)
    return tuple(dims)


def _substitute(shape, bindings):
    if not bindings:
        return shape
    return tuple(
        SymExpr.const(d.evaluate(bindings)) if d.symbols <= bindings.keys() else d for d in shape
    )


def derive_shapes(g: Graph, bindings=None, check_declared=True) -> ShapeResult:
    """Derive every tensor's symbolic shape.

    With ``bindings`` the graph-input shapes are first specialized to literals,
    which gives the concrete derivation the symbolic one must commute with.
    """
    shapes, values = {}, {}
    for t in g.tensors.values():
        if t.kind in ("GraphInput", "Weight"):
            shapes[t.name] = _substitute(t.shape, bindings)
            if t.dtype == "I64" and t.value is not None:
                values[t.name] = tuple(SymExpr.const(v) for v in t.value)
    for node in g.nodes:
        shape, value = _infer_node(node, shapes, values, g.tensors)
        out = node.outputs[0]
        declared = g.tensors[out].shape
        if check_declared and declared is not None:
            declared = _substitute(declared, bindings)
            if len(declared) != len(shape):
                raise RankMismatch(f"{out}: declared rank {len(declared)}, derived {len(shape)}", node.id)
            if tuple(declared) != tuple(shape):
                raise BroadcastError(
                    f"{out}: declared {[str(d) for d in declared]}, derived {[str(d) for d in shape]}",
                    node.id,
                )
        shapes[out] = shape
        if value is not None:
            values[out] = value
    return ShapeResult(shapes, values)


# -- classification ----------------------------------------------------------------------------------


def classify(g: Graph, order=None) -> dict:
    """Node id -> NodeClass, as the least fixpoint of the shape-computing rule.

    ``order`` may be any permutation of the nodes; the iteration repeats until
    nothing changes, so the result does not depend on it.
    """
    nodes = list(order) if order is not None else list(g.nodes)
    shape_tensors: set = set()
    cls = {n.id: NodeClass.TENSOR for n in nodes}
    changed = True
    while changed:
        changed = False
        for node in nodes:
            if cls[node.id] is NodeClass.SHAPE:
                continue
            if node.op == "Shape":
                hit = True
            else:
                ins = data_inputs(node)
                from_shape = [x in shape_tensors for x in ins]
                hit = bool(ins) and any(from_shape) and all(
                    s or g.tensors[x].kind == "Weight" for x, s in zip(ins, from_shape)
                )
            if hit:
                cls[node.id] = NodeClass.SHAPE
                shape_tensors.update(node.outputs)
                changed = True
    return cls


# -- fusion ---------------------------------------------------------------------------------------------


@dataclass
class FuseReport:
    rms_norm: int = 0
    layer_norm: int = 0
    elementwise: int = 0
    nodes_removed: int = 0

    @property
    def fused_nodes(self):
        return self.rms_norm + self.layer_norm + self.elementwise


def _scalar_const(g, name, want=None):
    t = g.tensors[name]
    if t.kind != "Weight" or t.value is None or len(t.value) != 1:
        return None
    v = float(t.value[0])
    if want is not None and v != want:
        return None
    return v


class _Matcher:
    def __init__(self, g: Graph):
        self.g = g
        self.prod = g.producers()
        self.users = g.consumers()
        self.outputs = set(g.outputs)

    def private(self, name, users=1):
        """Produced by a node, not observable, consumed exactly ``users`` times."""
        return name not in self.outputs and len(self.users[name]) == users and name in self.prod

    def src(self, name, op):
        node = self.prod.get(name)
        return node if node is not None and node.op == op else None


def _last_axis(node, rank):
    axes = node.attrs.get("axes", [])
    return node.attrs.get("keepdims", 1) == 1 and len(axes) == 1 and axes[0] in (-1, rank - 1)


def _match_norm_core(m: _Matcher, div: NodeSpec):
    """Div(x, Sqrt(Add(ReduceMean(Pow(x, 2)), eps))) -> (x, eps, inner nodes)."""
    x, root = div.inputs
    sqrt = m.src(root, "Sqrt")
    if sqrt is None or not m.private(root):
        return None
    add = m.src(sqrt.inputs[0], "Add")
    if add is None or not m.private(sqrt.inputs[0]):
        return None
    for ms, eps_name in (add.inputs, add.inputs[::-1]):
        eps = _scalar_const(m.g, eps_name)
        rm = m.src(ms, "ReduceMean")
        if eps is not None and rm is not None and m.private(ms):
            break
    else:
        return None
    rank = m.g.tensors[x].rank
    if not _last_axis(rm, rank):
        return None
    pw = m.src(rm.inputs[0], "Pow")
    if pw is None or not m.private(rm.inputs[0]) or pw.inputs[0] != x:
        return None
    if _scalar_const(m.g, pw.inputs[1], 2.0) is None:
        return None
    return x, eps, [pw, rm, add, sqrt]


def _fuse_norms(g: Graph, report: FuseReport) -> bool:
    m = _Matcher(g)
    for mul in g.nodes:
        if mul.op != "Mul":
            continue
        for normed, weight in (mul.inputs, mul.inputs[::-1]):
            div = m.src(normed, "Div")
            if div is None or not m.private(normed):
                continue
            core = _match_norm_core(m, div)
            if core is None:
                continue
            x, eps, inner = core
            # layer-norm: x is Sub(x0, ReduceMean(x0)) used by Pow and Div, and Mul feeds Add(bias)
            sub = m.src(x, "Sub")
            if sub is not None and m.private(x, users=2):
                mu = m.src(sub.inputs[1], "ReduceMean")
                add_b = [u for u in m.users[mul.outputs[0]] if u.op == "Add"]
                if (
                    mu is not None
                    and mu.inputs[0] == sub.inputs[0]
                    and m.private(sub.inputs[1])
                    and _last_axis(mu, g.tensors[sub.inputs[0]].rank)
                    and len(m.users[mul.outputs[0]]) == 1
                    and add_b
                    and mul.outputs[0] not in m.outputs
                ):
                    add = add_b[0]
                    bias = add.inputs[1] if add.inputs[0] == mul.outputs[0] else add.inputs[0]
                    drop = [mu, sub, *inner, div, mul]
                    fused = NodeSpec(add.id, "LayerNorm", [sub.inputs[0], weight, bias],
                                     list(add.outputs), {"eps": eps})
                    _replace(g, drop + [add], fused)
                    report.layer_norm += 1
                    report.nodes_removed += len(drop)
                    return True
            drop = [*inner, div]
            fused = NodeSpec(mul.id, "RMSNorm", [x, weight], list(mul.outputs), {"eps": eps})
            _replace(g, drop + [mul], fused)
            report.rms_norm += 1
            report.nodes_removed += len(drop)
            return True
    return False


def _replace(g: Graph, dead, fused: NodeSpec):
    """Swap ``dead`` nodes for ``fused``, placed where the last dead node was."""
    dead_ids = {n.id for n in dead}
    produced = {o for n in dead for o in n.outputs} - set(fused.outputs)
    nodes = []
    for n in g.nodes:
        if n.id == fused.id:
            nodes.append(fused)
        elif n.id not in dead_ids:
            nodes.append(n)
    g.nodes = nodes
    for name in produced:
        del g.tensors[name]


ELEMENTWISE = UNARY_ELEMENTWISE | BINARY_ELEMENTWISE


def _fuse_elementwise(g: Graph, cls: dict, report: FuseReport):
    users = g.consumers()
    outputs = set(g.outputs)
    prod = g.producers()

    def fusible(node):
        return (
            node.op in ELEMENTWISE
            and cls.get(node.id) is NodeClass.TENSOR
            and g.tensors[node.outputs[0]].dtype == "F32"
        )

    # each fusible node joins the group of its sole fusible consumer
    root_of = {}
    for node in reversed(g.nodes):
        if not fusible(node):
            continue
        out = node.outputs[0]
        us = users[out]
        if out not in outputs and len(us) == 1 and us[0].id in root_of:
            root_of[node.id] = root_of[us[0].id]
        else:
            root_of[node.id] = node.id
    groups: dict = {}
    for node in g.nodes:
        if node.id in root_of:
            groups.setdefault(root_of[node.id], []).append(node)
    for root_id, members in groups.items():
        if len(members) < 2:
            continue
        member_ids = {n.id for n in members}
        internal = {n.outputs[0]: f"t{i}" for i, n in enumerate(members)}
        ext: list = []
        stmts = []
        for i, n in enumerate(members):
            args = []
            for x in n.inputs:
                if x in internal and prod[x].id in member_ids:
                    args.append(internal[x])
                else:
                    if x not in ext:
                        ext.append(x)
                    args.append(f"i{ext.index(x)}")
            stmts.append(f"t{i}={n.op}({','.join(args)})")
        root = members[-1]
        fused = NodeSpec(root_id, "FusedElementwise", ext, list(root.outputs), {"program": ";".join(stmts)})
        _replace(g, members, fused)
        report.elementwise += 1
        report.nodes_removed += len(members) - 1


def parse_program(program: str):
    """'t0=Silu(i0);t1=Mul(t0,i1)' -> [(target, op, [args])]."""
    out = []
    for stmt in program.split(";"):
        target, rhs = stmt.split("=")
        op, rest = rhs.split("(", 1)
        args = [a for a in rest.rstrip(")").split(",") if a]
        out.append((target, op, args))
    return out


def fuse_with_report(g: Graph):
    g = g.copy()
    report = FuseReport()
    while _fuse_norms(g, report):
        pass
    _fuse_elementwise(g, classify(g), report)
    return g, report


def fuse(g: Graph) -> Graph:
    return fuse_with_report(g)[0]


# -- folding and scheduling ---------------------------------------------------------------------------


@dataclass
class CompiledPlan:
    graph: Graph
    shapes: dict
    values: dict
    classes: dict
    shape_program: list
    tensor_program: list
    hoisted: list
    folded: list
    sync_points: int
    fuse_report: FuseReport = field(default_factory=FuseReport)
    zero_ok: frozenset = frozenset()
    memory: object = None

    @property
    def shape_ops_retained(self):
        return len(self.shape_program) + len(self.hoisted)

    def summary(self) -> dict:
        return {
            "shape_ops_retained": self.shape_ops_retained,
            "sync_points": self.sync_points,
            "fused_nodes": self.fuse_report.fused_nodes,
        }


def fold_shape_subgraphs(g: Graph, shapes: ShapeResult, classes: dict):
    """Split shape-computing nodes into (retained, folded).

    A shape value must be computed at run time only when something outside
    the shape world observes it: a graph output, or a data slot of a tensor
    node. Parameter slots (reshape targets) are captured by the derived
    SymExpr vectors.
    """
    users = g.consumers()
    prod = g.producers()
    outputs = set(g.outputs)
    needed: set = set()
    stack = []
    for node in g.nodes:
        if classes[node.id] is not NodeClass.SHAPE:
            continue
        out = node.outputs[0]
        observed = out in outputs
        for u in users[out]:
            if classes[u.id] is NodeClass.TENSOR and out in data_inputs(u):
                observed = True
        if observed:
            stack.append(node)
    while stack:
        node = stack.pop()
        if node.id in needed:
            continue
        needed.add(node.id)
        for x in node.inputs:
            p = prod.get(x)
            if p is not None and classes[p.id] is NodeClass.SHAPE:
                stack.append(p)
    retained = [n for n in g.nodes if n.id in needed]
    folded = [n for n in g.nodes if classes[n.id] is NodeClass.SHAPE and n.id not in needed]
    return retained, folded


def schedule(g: Graph, shapes: ShapeResult, classes: dict, fuse_report=None) -> CompiledPlan:
    retained, folded = fold_shape_subgraphs(g, shapes, classes)
    retained_ids = {n.id for n in retained}
    prod = g.producers()
    device_tensors: set = set()
    hoisted_ids: set = set()
    boundaries = 0
    for node in g.nodes:
        if classes[node.id] is NodeClass.TENSOR:
            device_tensors.update(node.outputs)
        elif node.id in retained_ids:
            direct = [x for x in node.inputs if x in prod and classes[prod[x].id] is NodeClass.TENSOR]
            if direct:
                boundaries += 1
            if direct or any(x in device_tensors for x in node.inputs):
                hoisted_ids.add(node.id)
                device_tensors.update(node.outputs)
    shape_program = [n for n in g.nodes if n.id in retained_ids and n.id not in hoisted_ids]
    tensor_program = [
        n for n in g.nodes if classes[n.id] is NodeClass.TENSOR or n.id in hoisted_ids
    ]
    # phase order must still respect every dependency
    done = {t.name for t in g.tensors.values() if t.kind in ("GraphInput", "Weight")}
    done |= {o for n in folded for o in n.outputs}
    for node in shape_program + tensor_program:
        for x in node.inputs:
            if x not in done:
                raise ScheduleCycle(f"{x!r} is not available when its phase runs", node.id)
        done.update(node.outputs)
    hoisted = [n for n in g.nodes if n.id in hoisted_ids]
    zero_ok = frozenset(p.past for p in g.meta.kv_pairs)
    return CompiledPlan(
        graph=g,
        shapes=shapes.shapes,
        values=shapes.values,
        classes=classes,
        shape_program=shape_program,
        tensor_program=tensor_program,
        hoisted=hoisted,
        folded=folded,
        sync_points=1 + boundaries,
        fuse_report=fuse_report or FuseReport(),
        zero_ok=zero_ok,
    )


def compile_plan(g: Graph, *, fuse_ops: bool = True) -> CompiledPlan:
    report = FuseReport()
    if fuse_ops:
        g, report = fuse_with_report(g)
    shapes = derive_shapes(g)
    classes = classify(g)
    return schedule(g, shapes, classes, report)


# -- binding ----------------------------------------------------------------------------------------------


@dataclass
class ResolvedShapes:
    bindings: dict
    shapes: dict

    def __getitem__(self, name):
        return self.shapes[name]


def check_bindings(symbols: dict, bindings: dict):
    for sym, mx in symbols.items():
        if sym not in bindings:
            raise UnboundSymbol(sym)
        v = bindings[sym]
        if v < 1:
            raise NonPositiveDim(f"symbol {sym} bound to {v}")
        if mx is not None and v > mx:
            raise ExceedsPreallocation(f"symbol {sym} bound to {v}, preallocated for {mx}")


def bind_symbols(plan: CompiledPlan, bindings: dict) -> ResolvedShapes:
    check_bindings(plan.graph.symbols, bindings)
    out = {}
    for name, shape in plan.shapes.items():
        dims = tuple(d.evaluate(bindings) for d in shape)
        floor = 0 if name in plan.zero_ok else 1
        for d in dims:
            if d < floor:
                raise NonPositiveDim(f"{name} has dim {d} under {bindings}")
        out[name] = dims
    return ResolvedShapes(dict(bindings), out)


# -- reporting ---------------------------------------------------------------------------------------------


def tensor_class(plan: CompiledPlan, name: str) -> NodeClass:
    node = plan.graph.producers().get(name)
    return NodeClass.TENSOR if node is None else plan.classes[node.id]


def dump_shapes(plan: CompiledPlan) -> list:
    lines = []
    for name, info in plan.graph.tensors.items():
        dims = ", ".join(str(d) for d in plan.shapes[name])
        lines.append(f"{name} : {info.dtype} [{dims}] class={tensor_class(plan, name).letter}")
    return lines


def element_count(shape) -> int:
    return math.prod(shape)


__all__ = [
    "NodeClass",
    "ShapeResult",
    "CompiledPlan",
    "ResolvedShapes",
    "FuseReport",
    "derive_shapes",
    "classify",
    "fuse",
    "fuse_with_report",
    "fold_shape_subgraphs",
    "schedule",
    "compile_plan",
    "bind_symbols",
    "broadcast_shapes",
    "dump_shapes",
    "parse_program",
]
