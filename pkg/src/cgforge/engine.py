"""Batched execution of a schedule: forward, backward and double backward.

Rows of the batch are independent.  They are cut into fixed-size row blocks
(independent of the worker count) and the blocks are handed to a thread
pool; each output row is written by exactly one block, so results do not
depend on how many workers run.

For every phase of the schedule the engine runs the phase's subkernels on a
row block.  ``x``, ``y`` and ``W`` are bound as strided views; ``z`` ranges
live in a per-block scratch that is zero-filled (or reloaded, for greedy
schedules) when first touched and written back when the phase stores it.
"""
from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernelgen as kg
from .scheduler import Schedule, build_schedule
from .tpspec import ResolvedInstruction, ValidatedProblem

ROW_BLOCK = 512
DTYPES = {"fp64": np.float64, "fp32": np.float32}


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    z: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return self.x.shape[0]

    def check(self, p: ValidatedProblem) -> None:
        want = {"x": p.dim_x, "y": p.dim_y, "w": p.total_weights, "z": p.dim_z}
        for name in ("x", "y", "w", "z"):
            a = getattr(self, name)
            if a is None:
                continue
            if a.ndim != 2 or a.shape[1] != want[name]:
                raise ValueError(f"{name} has shape {a.shape}, expected (rows, {want[name]})")
            if a.shape[0] != self.rows:
                raise ValueError(f"{name} has {a.shape[0]} rows, x has {self.rows}")


@dataclass
class Counters:
    """Per-call totals over the whole batch."""

    flops: int = 0
    loads: int = 0  # words read from global arrays
    stores: int = 0  # words written to global arrays
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, flops=0, loads=0, stores=0):
        with self._lock:
            self.flops += flops
            self.loads += loads
            self.stores += stores


def default_workers() -> int:
    return max(1, int(os.environ.get("CGFORGE_WORKERS", "1")))


# -- compilation ---------------------------------------------------------------

@dataclass(frozen=True)
class PhaseProgram:
    subkernels: tuple[int, ...]
    fwd_irs: tuple
    bwd_irs: tuple
    fwd: object  # specialized callables
    bwd: object


@dataclass(frozen=True)
class Program:
    schedule: Schedule
    phases: tuple[PhaseProgram, ...]
    saved_loads: int  # register slots saved by redundant-load elimination


_programs: dict = {}
_schedules: dict = {}
_programs_lock = threading.Lock()
CACHE_LIMIT = 256


def _remember(cache: dict, key, value):
    with _programs_lock:
        if len(cache) >= CACHE_LIMIT:
            cache.clear()
        cache[key] = value


def compile_program(s: Schedule) -> Program:
    """Generate, optimize and specialize the kernels of every phase (memoized)."""
    key = id(s)
    hit = _programs.get(key)
    if hit is not None and hit[0] is s:
        return hit[1]
    p = s.problem
    phases = []
    saved = 0
    for n, ph in enumerate(s.phases):
        instrs = [p.resolved[k] for k in ph.subkernels]
        fwd = [kg.gen_forward(r, r.block, p.lane_width) for r in instrs]
        bwd = [kg.gen_backward(r, r.block, p.lane_width) for r in instrs]
        fwd, s1 = kg.eliminate_redundant_loads(instrs, fwd)
        bwd, s2 = kg.eliminate_redundant_loads(instrs, bwd)
        saved += s1 + s2
        phases.append(PhaseProgram(ph.subkernels, tuple(fwd), tuple(bwd),
                                   kg.specialize(fwd, f"phase{n}_fwd"),
                                   kg.specialize(bwd, f"phase{n}_bwd")))
    prog = Program(s, tuple(phases), saved)
    _remember(_programs, key, (s, prog))
    return prog


# -- buffer binding -----------------------------------------------------------------

def _seg(a, off, lanes, n):
    return a[:, off:off + lanes * n].reshape(a.shape[0], lanes, n)


def _wview(w, r: ResolvedInstruction, writeable=False):
    if r.kind == "B":
        return w[:, r.w_offset:r.w_offset + r.z_lanes]
    item = w.itemsize
    base = w[:, r.w_offset:]
    return as_strided(base, shape=(w.shape[0], r.z_lanes, r.x_lanes),
                      strides=(w.strides[0], r.w_row_stride * item, item), writeable=writeable)


def _fwd_binds(p, ph: PhaseProgram, x, y, w, scratch):
    binds = []
    for k in ph.subkernels:
        r = p.resolved[k]
        R = x.shape[0]
        b = {"X": _seg(x, r.x_offset, r.x_lanes, r.n1), "y": y[:, r.y_offset:r.y_offset + r.n2],
             "W": _wview(w, r), "Z": scratch[(r.z_offset, r.z_words)].reshape(R, r.z_lanes, r.n3)}
        if r.kind == "C":
            b["Zp"] = np.empty((R, r.x_lanes, r.n3), x.dtype)
        binds.append(b)
    return binds


def _bwd_binds(p, ph: PhaseProgram, x, y, w, gz, gx, gy, gw):
    binds = []
    for k in ph.subkernels:
        r = p.resolved[k]
        R = x.shape[0]
        b = {"X": _seg(x, r.x_offset, r.x_lanes, r.n1), "y": y[:, r.y_offset:r.y_offset + r.n2],
             "W": _wview(w, r), "GZ": _seg(gz, r.z_offset, r.z_lanes, r.n3),
             "GX": _seg(gx, r.x_offset, r.x_lanes, r.n1), "GY": gy[:, r.y_offset:r.y_offset + r.n2],
             "GW": _wview(gw, r, writeable=True)}
        if r.kind == "C":
            b["Zp"] = np.empty((R, r.x_lanes, r.n3), x.dtype)
            b["GZp"] = np.zeros((R, r.x_lanes, r.n3), x.dtype)
        binds.append(b)
    return binds


def _words(ranges):
    return sum(rg[2] for rg in ranges)


# -- row-block kernels ------------------------------------------------------------

def _forward_block(prog: Program, x, y, w, z, counters: Optional[Counters], instrumented: bool):
    """z[:] = TP(x, y, w) on one row block, phase by phase."""
    s = prog.schedule
    p = s.problem
    R = x.shape[0]
    scratch: dict = {}
    flop = kg.FlopCounter() if instrumented else None
    loads = stores = 0
    for ph_sched, ph in zip(s.phases, prog.phases):
        for rg in ph_sched.loads:
            loads += rg[2]
            if rg[0] == "z":  # reload a partial sum evicted earlier
                scratch[(rg[1], rg[2])] = z[:, rg[1]:rg[1] + rg[2]].copy()
        for rg in ph_sched.z_ranges:
            scratch.setdefault((rg[1], rg[2]), np.zeros((R, rg[2]), x.dtype))
        binds = _fwd_binds(p, ph, x, y, w, scratch)
        if instrumented:
            kg.interpret_sequence(ph.fwd_irs, binds, flop)
        else:
            ph.fwd(binds)
        for rg in ph_sched.stores:
            z[:, rg[1]:rg[1] + rg[2]] = scratch.pop((rg[1], rg[2]))
            stores += rg[2]
    for rg in s.zero_fill:
        z[:, rg[1]:rg[1] + rg[2]] = 0
        stores += rg[2]
    if counters is not None:
        counters.add(flop.flops if flop else 0, loads * R, stores * R)


def phase_forward(prog: Program, n: int, x, y, w) -> dict:
    """Contributions of phase ``n`` alone: ``{(z_offset, words): (rows, words) array}``."""
    ph_sched, ph = prog.schedule.phases[n], prog.phases[n]
    scratch = {(rg[1], rg[2]): np.zeros((x.shape[0], rg[2]), x.dtype) for rg in ph_sched.z_ranges}
    ph.fwd(_fwd_binds(prog.schedule.problem, ph, x, y, w, scratch))
    return scratch


def backward_rows(prog: Program, x, y, w, gz, gx, gy, gw) -> None:
    """Accumulate gradients of a row block (all phases) into ``gx, gy, gw``."""
    _backward_block(prog, x, y, w, gz, gx, gy, gw, None, False)


def _backward_block(prog: Program, x, y, w, gz, gx, gy, gw, counters: Optional[Counters], instrumented: bool):
    """Accumulate the three gradients of one row block into gx, gy, gw."""
    s = prog.schedule
    p = s.problem
    R = x.shape[0]
    flop = kg.FlopCounter() if instrumented else None
    for ph in prog.phases:
        binds = _bwd_binds(p, ph, x, y, w, gz, gx, gy, gw)
        if instrumented:
            kg.interpret_sequence(ph.bwd_irs, binds, flop)
        else:
            ph.bwd(binds)
    if counters is not None:
        # each phase reads its x/y/W ranges and the g_z ranges it consumes;
        # every gradient range is written back once
        loads = sum(_words([rg for rg in ph.loads if rg[0] != "z"]) + _words(ph.z_ranges) for ph in s.phases)
        touched = {("x", r.x_offset, r.x_words) for r in p.resolved}
        touched |= {("y", r.y_offset, r.n2) for r in p.resolved}
        stores = _words(touched) + p.total_weights
        counters.add(flop.flops if flop else 0, loads * R, stores * R)


# -- driver ---------------------------------------------------------------------------

def prepare(p: ValidatedProblem, s: Optional[Schedule]):
    """Default or checked schedule plus its compiled program."""
    if s is None:
        hit = _schedules.get(id(p))
        if hit is not None and hit[0] is p:
            s = hit[1]
        else:
            s = build_schedule(p)
            _remember(_schedules, id(p), (p, s))
    elif not s.source.same_problem(p):
        raise ValueError("schedule was built for a different problem")
    return s, compile_program(s)


def _as_rows(a, dtype, name):
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array")
    return np.ascontiguousarray(a, dtype=dtype)


def _dtype_of(*arrays):
    dt = np.result_type(*arrays)
    return np.float32 if dt == np.float32 else np.float64


def _coerce_batch(batch, p, extra=()):
    if isinstance(batch, Batch):
        x, y, w = batch.x, batch.y, batch.w
    else:
        x, y, w = batch
    dtype = _dtype_of(np.asarray(x), np.asarray(y), np.asarray(w))
    x, y, w = (_as_rows(a, dtype, n) for a, n in ((x, "x"), (y, "y"), (w, "w")))
    extra = tuple(_as_rows(a, dtype, n) for a, n in extra)
    b = Batch(x, y, w)
    b.check(p)
    return b, extra, dtype


def _run_blocks(fn, rows, workers):
    blocks = [(r0, min(rows, r0 + ROW_BLOCK)) for r0 in range(0, rows, ROW_BLOCK)]
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(blocks) <= 1:
        for blk in blocks:
            fn(*blk)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda blk: fn(*blk), blocks))


def tp_forward(p: ValidatedProblem, s: Optional[Schedule], batch, *, workers=None,
               counters: Optional[Counters] = None, instrumented=False) -> np.ndarray:
    """``z`` of shape ``(rows, dim_z)``.  ``batch`` is a :class:`Batch` or ``(x, y, w)``.

    ``instrumented=True`` runs the kernel interpreter, which counts every
    floating-point operation into ``counters.flops``.
    """
    s, prog = prepare(p, s)
    b, _, dtype = _coerce_batch(batch, p)
    z = np.empty((b.rows, p.dim_z), dtype)

    def run(r0, r1):
        _forward_block(prog, b.x[r0:r1], b.y[r0:r1], b.w[r0:r1], z[r0:r1], counters, instrumented)

    _run_blocks(run, b.rows, workers)
    return z


def tp_backward(p: ValidatedProblem, s: Optional[Schedule], batch, g_z, *, workers=None,
                counters: Optional[Counters] = None, instrumented=False):
    """``(g_x, g_y, g_w)`` for the upstream gradient ``g_z``."""
    s, prog = prepare(p, s)
    b, (gz,), dtype = _coerce_batch(batch, p, ((g_z, "g_z"),))
    if gz.shape != (b.rows, p.dim_z):
        raise ValueError(f"g_z has shape {gz.shape}, expected {(b.rows, p.dim_z)}")
    gx = np.zeros_like(b.x)
    gy = np.zeros_like(b.y)
    gw = np.zeros_like(b.w)

    def run(r0, r1):
        sl = slice(r0, r1)
        _backward_block(prog, b.x[sl], b.y[sl], b.w[sl], gz[sl], gx[sl], gy[sl], gw[sl],
                        counters, instrumented)

    _run_blocks(run, b.rows, workers)
    return gx, gy, gw


def _check_like(name, a, ref):
    if a.shape != ref.shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {ref.shape}")


def tp_double_backward(p: ValidatedProblem, s: Optional[Schedule], batch, g_z, dL_da, dL_db, dL_dC,
                       *, workers=None, fused=True):
    """Gradients ``(dL/dx, dL/dy, dL/dW, dL/dg_z)`` given upstream gradients of
    the backward outputs ``(a, b, C) = backward(x, y, W, g_z)``.

    Seven dispatches::

        op1 = backward(dL_da, dL_db, W, g_z)    op2 = backward(x, y, dL_dC, g_z)
        op3 = TP(dL_da, y, W)                   op4 = backward(dL_da, y, W, g_z)
        op5 = backward(x, dL_db, W, g_z)        op6 = TP(x, dL_db, W)
        op7 = TP(x, y, dL_dC)

    combined as ``dx = op1.gx + op2.gx``, ``dy = op1.gy + op2.gy``,
    ``dW = op4.gw + op5.gw``, ``dgz = op3 + op6 + op7``.  With ``fused=True``
    the three forward dispatches run in one pass over the batch and the four
    backward dispatches in another, accumulating in place.
    """
    s, prog = prepare(p, s)
    b, (gz, da, db, dC), dtype = _coerce_batch(
        batch, p, ((g_z, "g_z"), (dL_da, "dL_da"), (dL_db, "dL_db"), (dL_dC, "dL_dC")))
    _check_like("g_z", gz, np.empty((b.rows, p.dim_z)))
    _check_like("dL_da", da, b.x)
    _check_like("dL_db", db, b.y)
    _check_like("dL_dC", dC, b.w)
    x, y, w = b.x, b.y, b.w
    if not fused:
        return _seven_calls(p, s, x, y, w, gz, da, db, dC, workers)

    dx, dy, dw = np.zeros_like(x), np.zeros_like(y), np.zeros_like(w)
    dgz = np.empty((b.rows, p.dim_z), dtype)

    def fwd_pass(r0, r1):
        sl = slice(r0, r1)
        out = dgz[sl]
        tmp = np.empty_like(out)
        _forward_block(prog, da[sl], y[sl], w[sl], out, None, False)
        for args in ((x[sl], db[sl], w[sl]), (x[sl], y[sl], dC[sl])):
            _forward_block(prog, *args, tmp, None, False)
            out += tmp

    def bwd_pass(r0, r1):
        sl = slice(r0, r1)
        R = r1 - r0
        sink_x = np.empty((R, p.dim_x), dtype)
        sink_y = np.empty((R, p.dim_y), dtype)
        sink_w = np.empty((R, p.total_weights), dtype)
        for sink in (sink_x, sink_y, sink_w):
            sink.fill(0)
        # op1, op2 feed dx and dy; op4, op5 feed dW; the remaining outputs are discarded
        _backward_block(prog, da[sl], db[sl], w[sl], gz[sl], dx[sl], dy[sl], sink_w, None, False)
        _backward_block(prog, x[sl], y[sl], dC[sl], gz[sl], dx[sl], dy[sl], sink_w, None, False)
        _backward_block(prog, da[sl], y[sl], w[sl], gz[sl], sink_x, sink_y, dw[sl], None, False)
        _backward_block(prog, x[sl], db[sl], w[sl], gz[sl], sink_x, sink_y, dw[sl], None, False)

    _run_blocks(fwd_pass, b.rows, workers)
    _run_blocks(bwd_pass, b.rows, workers)
    return dx, dy, dw, dgz


def _seven_calls(p, s, x, y, w, gz, da, db, dC, workers):
    kw = {"workers": workers}
    op1 = tp_backward(p, s, (da, db, w), gz, **kw)
    op2 = tp_backward(p, s, (x, y, dC), gz, **kw)
    op3 = tp_forward(p, s, (da, y, w), **kw)
    op4 = tp_backward(p, s, (da, y, w), gz, **kw)
    op5 = tp_backward(p, s, (x, db, w), gz, **kw)
    op6 = tp_forward(p, s, (x, db, w), **kw)
    op7 = tp_forward(p, s, (x, y, dC), **kw)
    return op1[0] + op2[0], op1[1] + op2[1], op4[2] + op5[2], op3 + op6 + op7


# -- binary array files --------------------------------------------------------------

def save_array(path, a: np.ndarray) -> None:
    """Raw little-endian data at ``path`` plus ``path.json`` with ``{rows, cols, dtype}``."""
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None, :]
    if a.dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {a.dtype}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    meta = {"rows": a.shape[0], "cols": a.shape[1], "dtype": a.dtype.name}
    Path(str(path) + ".json").write_text(json.dumps(meta) + "\n")


def load_array(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    a = np.frombuffer(path.read_bytes(), dtype=dt)
    if a.size != meta["rows"] * meta["cols"]:
        raise ValueError(f"{path}: {a.size} values, sidecar says {meta['rows']}x{meta['cols']}")
    return a.reshape(meta["rows"], meta["cols"]).astype(meta["dtype"])
