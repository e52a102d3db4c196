"""``cgforge`` command line: compile, verify, bench, run.

Exit codes: 0 success, 1 validation or verification failure, 2 irreps parse
error, 3 scratch budget too small.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import conv, engine, kernelgen, scheduler, tpspec, verify

CSV_COLUMNS = ("op", "dtype", "batch", "wall_ns", "flops", "loads", "stores", "ai", "gflops_per_s")
WORD_BYTES = {"fp64": 8, "fp32": 4}


class CliError(Exception):
    def __init__(self, code: int, lines):
        self.code = code
        self.lines = [lines] if isinstance(lines, str) else list(lines)
        super().__init__("\n".join(self.lines))


def _load(path) -> tpspec.ValidatedProblem:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(1, f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliError(1, f"{path}: invalid JSON: {e}") from None
    try:
        return tpspec.problem_from_dict(d)
    except tpspec.InvalidProblem as e:
        code = 2 if any(v.code == "parse" for v in e.violations) else 1
        raise CliError(code, [str(v) for v in e.violations]) from None


def _schedule(p, budget, lane_width=32):
    try:
        return scheduler.build_schedule(p, budget, lane_width)
    except scheduler.BudgetError as e:
        raise CliError(3, str(e)) from None


# -- compile ----------------------------------------------------------------------------

def cmd_compile(args) -> int:
    p = _load(args.spec)
    s = _schedule(p, args.budget, args.lane_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    both = not (args.emit_schedule or args.emit_ir)
    if args.emit_schedule or both:
        (out / "schedule.json").write_text(s.to_json() + "\n")
    if args.emit_ir or both:
        for d in ("ir", "ir_bwd"):
            (out / d).mkdir(exist_ok=True)
        for n, r in enumerate(s.problem.resolved):
            for d, gen in (("ir", kernelgen.gen_forward), ("ir_bwd", kernelgen.gen_backward)):
                ir = gen(r, r.block, s.problem.lane_width)
                kernelgen.typecheck(ir)
                (out / d / f"sk{n:03d}_{kernelgen.golden_name(ir)}").write_text(kernelgen.emit_text(ir))
    (out / "traffic.json").write_text(json.dumps(s.traffic.to_dict(), indent=2) + "\n")
    naive = scheduler.naive_traffic(p, args.lane_width)
    print(f"{s.strategy}: {len(s.phases)} phase(s), {len(s.problem.resolved)} subkernel(s)")
    print(f"traffic per row: loads={s.traffic.loads_words} stores={s.traffic.stores_words} "
          f"flops={s.traffic.flops} ai={s.traffic.arithmetic_intensity:.3f} flop/byte "
          f"(naive: loads={naive.loads_words} stores={naive.stores_words})")
    return 0


# -- verify -------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    p = _load(args.spec)
    _schedule(p, args.budget)
    dtype = engine.DTYPES[args.dtype]
    if args.workers is not None:
        os.environ["CGFORGE_WORKERS"] = str(args.workers)
    q = verify.corrupt_cg(p) if args.corrupt_cg else None
    results = verify.run_all(p, rows=args.batch, seed=args.seed, dtype=dtype, engine_problem=q)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "verification FAILED")
    return 0 if ok else 1


# -- bench --------------------------------------------------------------------------------

def _median_ns(fn, warmup, iters):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def _row(op, dtype, batch, wall_ns, flops, loads, stores):
    wb = WORD_BYTES[dtype]
    words = loads + stores
    ai = flops / (wb * words) if words else 0.0
    gf = flops / wall_ns if wall_ns else 0.0  # flop/ns == GFLOP/s
    return {"op": op, "dtype": dtype, "batch": batch, "wall_ns": wall_ns, "flops": flops,
            "loads": loads, "stores": stores, "ai": f"{ai:.6g}", "gflops_per_s": f"{gf:.6g}"}


def _tp_rows(p, s, args, rng):
    B = args.batch
    dt = engine.DTYPES[args.dtype]
    x, y, w = verify.random_batch(p, B, rng, dt)
    gz = verify.unit_rms(rng, (B, p.dim_z), dt)
    da, db, dC = verify.random_batch(p, B, rng, dt)
    fwd_f = s.traffic.flops
    bwd_f = sum(kernelgen.flop_count(kernelgen.gen_backward(r, r.block, s.problem.lane_width))
                for r in s.problem.resolved)
    rows = []
    c = engine.Counters()
    engine.tp_forward(p, s, (x, y, w), workers=args.workers, counters=c)
    ns = _median_ns(lambda: engine.tp_forward(p, s, (x, y, w), workers=args.workers), args.warmup, args.iters)
    rows.append(_row("tp_forward", args.dtype, B, ns, fwd_f * B, c.loads, c.stores))
    c = engine.Counters()
    engine.tp_backward(p, s, (x, y, w), gz, workers=args.workers, counters=c)
    ns = _median_ns(lambda: engine.tp_backward(p, s, (x, y, w), gz, workers=args.workers), args.warmup, args.iters)
    rows.append(_row("tp_backward", args.dtype, B, ns, bwd_f * B, c.loads, c.stores))
    ns = _median_ns(lambda: engine.tp_double_backward(p, s, (x, y, w), gz, da, db, dC, workers=args.workers),
                    args.warmup, args.iters)
    f_loads, f_stores = rows[0]["loads"], rows[0]["stores"]
    b_loads, b_stores = rows[1]["loads"], rows[1]["stores"]
    rows.append(_row("tp_double_backward", args.dtype, B, ns, (3 * fwd_f + 4 * bwd_f) * B,
                     3 * f_loads + 4 * b_loads, 3 * f_stores + 4 * b_stores))
    return rows


def _conv_rows(p, s, args, rng, mode):
    dt = engine.DTYPES[args.dtype]
    geo, g = conv.lattice_graph(args.cells, args.edges, seed=args.seed)
    E = g.edge_count
    x = verify.unit_rms(rng, (len(geo), p.dim_x), dt)
    y = verify.unit_rms(rng, (E, p.dim_y), dt)
    w = verify.unit_rms(rng, (E, p.total_weights), dt)
    if mode == "unfused":
        fn = lambda c=None: conv.conv_forward_unfused(p, s, g, x, y, w, workers=args.workers, counters=c)
    else:
        m = "deterministic" if mode == "fused-det" else "atomic"
        fn = lambda c=None: conv.conv_forward(p, s, g, x, y, w, m, workers=args.workers, counters=c)
    c = conv.ConvCounters()
    fn(c)
    ns = _median_ns(fn, args.warmup, args.iters)
    loads = c.node_reads + c.edge_reads + c.dup_words
    stores = c.node_store_words + c.dup_words
    return [_row(f"conv_{mode}", args.dtype, E, ns, s.traffic.flops * E, loads, stores)]


def cmd_bench(args) -> int:
    p = _load(args.spec)
    s = _schedule(p, args.budget)
    if args.batch < 0 or args.iters < 1 or args.warmup < 0:
        raise CliError(1, "batch, warmup must be >= 0 and iters >= 1")
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.batch > 0:
        if args.mode is None:
            rows = _tp_rows(p, s, args, rng)
        else:
            modes = ("unfused", "fused-det", "fused-atomic") if args.mode == "all" else (args.mode,)
            for m in modes:
                rows += _conv_rows(p, s, args, rng, m)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(buf.getvalue(), encoding="utf-8")
        (out / "traffic.json").write_text(json.dumps(s.traffic.to_dict(), indent=2) + "\n")
    else:
        sys.stdout.write(buf.getvalue())
    for r in rows:
        print(f"{r['op']:<22} {r['dtype']} batch={r['batch']} median={r['wall_ns'] / 1e6:.2f} ms "
              f"{r['gflops_per_s']} GFLOP/s stores={r['stores']}", file=sys.stderr)
    return 0


# -- run ----------------------------------------------------------------------------------

def cmd_run(args) -> int:
    p = _load(args.spec)
    s = _schedule(p, args.budget)
    x, y, w = (engine.load_array(a) for a in (args.x, args.y, args.w))
    try:
        z = engine.tp_forward(p, s, (x, y, w), workers=args.workers)
    except ValueError as e:
        raise CliError(1, str(e)) from None
    engine.save_array(args.z, z)
    print(f"wrote {args.z} ({z.shape[0]}x{z.shape[1]} {z.dtype.name})")
    return 0


# -- parser -------------------------------------------------------------------------------

def _workers(v):
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("workers must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgforge", description="Sparse CG tensor product compiler and engine")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", required=True, help="problem JSON {x, y, z, instructions}")
        sp.add_argument("--budget", type=int, default=scheduler.DEFAULT_BUDGET_WORDS,
                        help="scratch words per worker (default %(default)s)")
        sp.add_argument("--workers", type=_workers, default=None,
                        help="worker threads (default: $CGFORGE_WORKERS or 1)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("compile", help="schedule, kernel IR and traffic report")
    common(sp)
    sp.add_argument("--lane-width", type=int, default=kernelgen.DEFAULT_LANE_WIDTH)
    sp.add_argument("--emit-schedule", action="store_true")
    sp.add_argument("--emit-ir", action="store_true")
    sp.add_argument("--out", default="cgforge_out")
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("verify", help="run the correctness suites")
    common(sp)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--dtype", choices=sorted(engine.DTYPES), default="fp64")
    sp.add_argument("--corrupt-cg", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="time forward/backward/double backward or the fused convolution")
    common(sp)
    sp.add_argument("--batch", type=int, default=50_000)
    sp.add_argument("--dtype", choices=sorted(engine.DTYPES), default="fp64")
    sp.add_argument("--mode", choices=("unfused", "fused-det", "fused-atomic", "all"), default=None,
                    help="benchmark the graph convolution on the synthetic lattice instead")
    sp.add_argument("--cells", type=int, default=5, help="lattice cells per side (8 atoms each)")
    sp.add_argument("--edges", type=int, default=158_000, help="target edge count of the lattice graph")
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--out", default=None, help="directory for bench.csv (default: CSV on stdout)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("run", help="forward pass on binary arrays")
    common(sp)
    for name in ("x", "y", "w"):
        sp.add_argument(f"--{name}", required=True, help=f"raw array with {name}.json sidecar")
    sp.add_argument("--z", required=True, help="output path")
    sp.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        for line in e.lines:
            print(line, file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
