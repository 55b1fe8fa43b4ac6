"""Command-line front end: ``python -m dynlite <subcommand> ...``.

Exit codes: 0 ok, 2 compile error, 3 runtime error, 4 comparison mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from dynlite import errors
from dynlite.graphir import (
    ToyConfig,
    build_toy_decoder,
    load_graph,
    load_weights,
    matmul_weight_names,
    save_graph,
    save_weights,
)
from dynlite.memplan import plan_memory
from dynlite.quantfp4 import QuantizedWeight, mae_compare, mean_ratio
from dynlite.refexec import NAIVE, OPTIMIZED, Session, SessionOptions, generate, quantize_graph
from dynlite.shapeinfer import compile_plan, dump_shapes, tensor_class

EXIT_OK, EXIT_COMPILE, EXIT_RUNTIME, EXIT_MISMATCH = 0, 2, 3, 4

_RUNTIME_ERRORS = (errors.BindError, errors.KVCacheError, errors.ShapeMismatch)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


class _Timer:
    def __init__(self, enabled):
        self.enabled = enabled
        self.stages = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = round((time.perf_counter() - self.t0) * 1e3, 3)

        return _Ctx()

    def attach(self, report):
        if self.enabled:
            report["wall_clock_ms"] = dict(self.stages)
            report["wall_clock_note"] = "local CPU wall clock, for regression tracking only"
        return report


# -- subcommands -----------------------------------------------------------------------------------


def cmd_build_toy_model(args):
    cfg = ToyConfig(
        layers=args.layers, hidden=args.hidden, heads=args.heads, head_dim=args.head_dim,
        vocab=args.vocab, seed=args.seed, ffn=args.ffn, max_seq=args.max_seq, layout=args.layout,
    )
    g, w = build_toy_decoder(cfg)
    Path(args.out_graph).write_bytes(save_graph(g))
    Path(args.out_weights).write_bytes(save_weights(w))
    _emit({"graph": args.out_graph, "weights": args.out_weights, "nodes": len(g.nodes),
           "weights_count": len(w)}, args.out)
    return EXIT_OK


def cmd_infer_shapes(args):
    g = load_graph(Path(args.graph))
    plan = compile_plan(g, fuse_ops=not args.no_fuse)
    if args.text:
        for line in dump_shapes(plan):
            print(line)
    report = {
        "tensors": [
            {
                "name": name,
                "dtype": info.dtype,
                "shape": [d.to_json() for d in plan.shapes[name]],
                "class": tensor_class(plan, name).letter,
            }
            for name, info in plan.graph.tensors.items()
        ],
        "nodes": [
            {"id": n.id, "op": n.op, "class": plan.classes[n.id].value} for n in plan.graph.nodes
        ],
        "summary": plan.summary(),
    }
    if args.text:
        _emit(plan.summary(), args.out)
    else:
        _emit(report, args.out)
    return EXIT_OK


def _parse_bindings(items):
    out = {}
    for item in items or []:
        name, _, value = item.partition("=")
        if not value:
            raise errors.ConfigError(f"expected SYMBOL=VALUE, got {item!r}")
        out[name] = int(value)
    return out


def cmd_plan_memory(args):
    g = load_graph(Path(args.graph))
    plan = compile_plan(g, fuse_ops=not args.no_fuse)
    maxima = {s: m for s, m in g.symbols.items() if m is not None}
    maxima.update(_parse_bindings(args.max))
    missing = [s for s in g.symbols if s not in maxima]
    if missing:
        raise errors.ConfigError(f"no maximum for symbols {missing}; pass --max SYM=VALUE")
    mp = plan_memory(plan.graph, plan.shape_program + plan.tensor_program, plan.shapes, maxima)
    _emit(mp.report(), args.out)
    return EXIT_OK


def _mae_rows(weights, names, group_size, n):
    rows = []
    for name in names:
        w = weights[name]
        if isinstance(w, QuantizedWeight):
            continue
        rep = mae_compare(w, group_size, n)
        row = {"tensor": name, **rep.to_json()}
        rows.append((row, rep))
    return rows


def cmd_quantize(args):
    g = load_graph(Path(args.graph))
    weights = load_weights(args.weights)
    names = matmul_weight_names(g)
    rows = _mae_rows(weights, names, args.group_size, args.n)
    report = {
        "scheme": args.scheme,
        "group_size": args.group_size,
        "n": args.n,
        "table": [r for r, _ in rows],
        "mean_ratio": mean_ratio([rep for _, rep in rows]),
    }
    if args.scheme == "f32":
        report["written"] = False
        _emit(report, args.report)
        return EXIT_OK
    if not args.out:
        raise errors.ConfigError("--out is required unless --scheme f32")
    qg, qw = quantize_graph(g, weights, args.scheme, args.group_size, args.n, names)
    Path(args.out).write_bytes(save_weights(qw))
    report["written"] = args.out
    if args.out_graph:
        Path(args.out_graph).write_bytes(save_graph(qg))
        report["graph"] = args.out_graph
    _emit(report, args.report)
    return EXIT_OK


def cmd_mae_report(args):
    if args.weights:
        weights = load_weights(args.weights)
        names = [k for k, v in weights.items() if not isinstance(v, QuantizedWeight) and np.ndim(v) == 2]
        rows = _mae_rows(weights, names, args.group_size, args.n)
    else:
        rng = np.random.default_rng(args.seed)
        rows = []
        for trial in range(args.trials):
            w = rng.normal(0.0, args.std, (args.rows, args.cols)).astype(np.float32)
            rep = mae_compare(w, args.group_size, args.n)
            rows.append(({"tensor": f"gaussian[{trial}]", **rep.to_json()}, rep))
    _emit({
        "group_size": args.group_size,
        "n": args.n,
        "table": [r for r, _ in rows],
        "mean_ratio": mean_ratio([rep for _, rep in rows]),
    }, args.out)
    return EXIT_OK


def _prompt(args):
    if args.prompt_file:
        text = Path(args.prompt_file).read_text()
    else:
        text = args.prompt or ""
    ids = [int(t) for t in text.replace(",", " ").split()]
    if not ids:
        raise errors.ConfigError("empty prompt")
    return ids


def _load_model(args):
    g = load_graph(Path(args.graph))
    weights = load_weights(args.weights)
    quantized = [k for k, v in weights.items() if isinstance(v, QuantizedWeight)]
    if quantized:
        first = weights[quantized[0]]
        g, weights = quantize_graph(g, weights, first.scheme, first.group_size, first.n, quantized)
    elif args.scheme != "f32":
        g, weights = quantize_graph(g, weights, args.scheme, args.group_size, args.n)
    return g, weights


def _options(args, mode):
    if mode == "naive-oracle":
        return SessionOptions(**{**NAIVE.__dict__, "max_seq": args.max_seq})
    return SessionOptions(**{**OPTIMIZED.__dict__, "pad": args.pad, "max_seq": args.max_seq})


def _run_once(g, weights, options, prompt, max_new, timer, label):
    with timer.stage(f"{label}.compile"):
        session = Session(g, weights, options)
    with timer.stage(f"{label}.decode"):
        result = generate(session, prompt, max_new, timing=timer.enabled)
    return session, result


def cmd_run(args):
    timer = _Timer(args.time)
    with timer.stage("load"):
        g, weights = _load_model(args)
    prompt = _prompt(args)
    _, result = _run_once(g, weights, _options(args, args.mode), prompt, args.max_new_tokens, timer, "run")
    report = {"mode": args.mode, "tokens": result.tokens, **result.report(timing=args.time)}
    _emit(timer.attach(report), args.out)
    return EXIT_OK


def cmd_compare(args):
    timer = _Timer(args.time)
    with timer.stage("load"):
        g, weights = _load_model(args)
    prompt = _prompt(args)
    _, fast = _run_once(g, weights, _options(args, "optimized"), prompt, args.max_new_tokens, timer, "optimized")
    _, slow = _run_once(g, weights, _options(args, "naive-oracle"), prompt, args.max_new_tokens, timer, "naive")
    same = fast.tokens == slow.tokens
    deltas = {k: slow.counters[k] - fast.counters[k] for k in fast.counters}
    report = {
        "tokens_identical": same,
        "kv_copy_bytes_saved": slow.counters["kv_copy_bytes"] - fast.counters["kv_copy_bytes"],
        "counter_deltas": deltas,
        "optimized": {"tokens": fast.tokens, **fast.report(timing=args.time)},
        "naive": {"tokens": slow.tokens, **slow.report(timing=args.time)},
    }
    _emit(timer.attach(report), args.out)
    print(f"tokens identical: {str(same).lower()}; kv_copy_bytes saved: {report['kv_copy_bytes_saved']}",
          file=sys.stderr)
    return EXIT_OK if same else EXIT_MISMATCH


# -- parser ------------------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dynlite", description="dynamic-shape LLM inference micro-runtime")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-toy-model", help="write a toy decoder graph and its weights")
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--hidden", type=int, default=64)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--head-dim", type=int, default=16)
    b.add_argument("--vocab", type=int, default=97)
    b.add_argument("--seed", type=int, default=7)
    b.add_argument("--ffn", type=int, default=None)
    b.add_argument("--max-seq", type=int, default=256)
    b.add_argument("--layout", choices=["glm", "llama"], default="glm")
    b.add_argument("--out-graph", required=True)
    b.add_argument("--out-weights", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_build_toy_model)

    s = sub.add_parser("infer-shapes", help="derive symbolic shapes and the two-phase schedule")
    s.add_argument("graph")
    s.add_argument("--no-fuse", action="store_true")
    s.add_argument("--text", action="store_true", help="per-tensor dump lines, then the summary")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer_shapes)

    m = sub.add_parser("plan-memory", help="activation reuse plan at maximum bindings")
    m.add_argument("graph")
    m.add_argument("--max", action="append", metavar="SYM=VALUE")
    m.add_argument("--no-fuse", action="store_true")
    m.add_argument("--out")
    m.set_defaults(func=cmd_plan_memory)

    q = sub.add_parser("quantize", help="quantize matmul weights and report MAE against INT4")
    q.add_argument("graph")
    q.add_argument("weights")
    q.add_argument("--scheme", choices=["e0m4", "int4", "f32"], default="e0m4")
    q.add_argument("--n", type=int, default=1)
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--out", help="quantized weight sidecar")
    q.add_argument("--out-graph", help="graph rewritten to MatMulQuant")
    q.add_argument("--report")
    q.set_defaults(func=cmd_quantize)

    r = sub.add_parser("mae-report", help="E0M4 vs INT4 reconstruction error table")
    r.add_argument("--weights")
    r.add_argument("--group-size", type=int, default=128)
    r.add_argument("--n", type=int, default=1)
    r.add_argument("--trials", type=int, default=10)
    r.add_argument("--rows", type=int, default=4096)
    r.add_argument("--cols", type=int, default=128)
    r.add_argument("--std", type=float, default=0.02)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_mae_report)

    for name, func, help_ in (
        ("run", cmd_run, "greedy decode with one pipeline"),
        ("compare", cmd_compare, "optimized vs naive-oracle decode"),
    ):
        c = sub.add_parser(name, help=help_)
        c.add_argument("graph")
        c.add_argument("weights")
        c.add_argument("--prompt", help="token ids, comma or space separated")
        c.add_argument("--prompt-file")
        c.add_argument("--max-new-tokens", type=int, default=32)
        c.add_argument("--pad", type=int, default=64)
        c.add_argument("--max-seq", type=int, default=None)
        c.add_argument("--scheme", choices=["f32", "e0m4", "int4"], default="f32")
        c.add_argument("--n", type=int, default=1)
        c.add_argument("--group-size", type=int, default=128)
        c.add_argument("--time", action="store_true", help="add wall-clock per stage")
        c.add_argument("--out")
        if name == "run":
            c.add_argument("--mode", choices=["optimized", "naive-oracle"], default="optimized")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (errors.DynliteError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPILE


__all__ = ["main", "build_parser"]
