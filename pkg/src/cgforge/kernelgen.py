"""Straight-line kernel IR for the B and C subkernels.

Every subkernel is a list of ops executed by ``lanes`` threads (one row of
``X`` each).  Ops are unrolled over the nonzero CG coefficients, so the
stream is specific to one ``(l1, l2, l3)`` block.  Register files hold one
value per lane and per slot; ``y_reg`` is shared by all lanes.

Op semantics (per active lane ``t`` unless noted):

``load``          stage register files from buffers (``0`` = zero fill,
                  ``GY@0`` = seed lane 0 with the running ``GY`` sum)
``fma``           ``dst[k] += (v * a[i]) * b[j]``                 3 flops
``scale``         ``dst[k] += a[i] * b[j]``                       2 flops
``reduce_lanes``  lane 0 of ``reg`` += every other lane (left fold)
                  ``width * (lanes - 1)`` flops
``matmul``        cross-lane ``dst += op(A) @ op(B)``              ``2*m*k*n`` flops
``store``         spill a register file to a scratch buffer
``accumulate``    commit a register file to an output accumulator

Buffers: ``X y W`` inputs, ``Z`` output scratch, ``Zp``/``GZp`` temporaries,
``GZ`` incoming gradient, ``GX GY GW`` gradient accumulators.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .cg import CGBlock

DEFAULT_LANE_WIDTH = 32


class Load(NamedTuple):
    items: tuple  # ((reg, source, width), ...)


class Fma(NamedTuple):
    dst: str
    k: int
    v: float
    a: str
    i: int
    b: str
    j: int


class Scale(NamedTuple):
    dst: str
    k: int
    a: str
    i: int
    b: str
    j: int


class ReduceLanes(NamedTuple):
    reg: str
    width: int


class Matmul(NamedTuple):
    dst: str
    a: str
    ta: bool
    b: str
    tb: bool
    m: int
    k: int
    n: int


class Store(NamedTuple):
    dst: str
    reg: str
    width: int


class Accumulate(NamedTuple):
    dst: str
    reg: str
    width: int


Op = Union[Load, Fma, Scale, ReduceLanes, Matmul, Store, Accumulate]

TEMP_BUFFERS = ("Zp", "GZp")


@dataclass(frozen=True)
class KernelIR:
    kind: str  # B_fwd, C_fwd, B_bwd, C_bwd
    l1: int
    l2: int
    l3: int
    lane_width: int
    lanes: int  # active lanes = b' (rows of X)
    rows: int  # b (rows of Z)
    ops: tuple

    @property
    def n1(self):
        return 2 * self.l1 + 1

    @property
    def n2(self):
        return 2 * self.l2 + 1

    @property
    def n3(self):
        return 2 * self.l3 + 1

    def count(self, op_type) -> int:
        return sum(isinstance(op, op_type) for op in self.ops)

    def without_loads(self, regs: Sequence[str]) -> "KernelIR":
        """Copy with the given registers dropped from every load (they are live-in)."""
        regs = set(regs)
        ops = []
        for op in self.ops:
            if isinstance(op, Load):
                op = Load(tuple(it for it in op.items if it[0] not in regs))
            ops.append(op)
        return KernelIR(self.kind, self.l1, self.l2, self.l3, self.lane_width, self.lanes, self.rows, tuple(ops))


def _check_lanes(lanes: int, rows: int, lane_width: int):
    if lanes > lane_width or rows > lane_width:
        raise ValueError(f"b={rows}, b'={lanes} exceed lane width {lane_width}; split multiplicities first")


def gen_forward(instr, block: CGBlock, lane_width: int = DEFAULT_LANE_WIDTH) -> KernelIR:
    kind = instr.kind
    b, bp = instr.z_lanes, instr.x_lanes
    _check_lanes(bp, b, lane_width)
    n1, n2, n3 = block.shape
    fmas = [Fma("z_reg", k, v, "x_reg", i, "y_reg", j) for i, j, k, v in block.entries]
    if kind == "B":
        ops = [Load((("x_reg", "X[t]", n1), ("y_reg", "y", n2), ("w_reg", "W[t]", 1),
                     ("z_reg", "0", n3), ("o_reg", "Z[t]", n3)))]
        ops += fmas
        ops += [Scale("o_reg", k, "w_reg", 0, "z_reg", k) for k in range(n3)]
        ops.append(Accumulate("Z[t]", "o_reg", n3))
    else:
        ops = [Load((("x_reg", "X[t]", n1), ("y_reg", "y", n2), ("z_reg", "0", n3)))]
        ops += fmas
        ops.append(Store("Zp[t]", "z_reg", n3))
        ops.append(Matmul("Z", "W", False, "Zp", False, b, bp, n3))
    return KernelIR(f"{kind}_fwd", block.l1, block.l2, block.l3, lane_width, bp, b, tuple(ops))


def gen_backward(instr, block: CGBlock, lane_width: int = DEFAULT_LANE_WIDTH) -> KernelIR:
    kind = instr.kind
    b, bp = instr.z_lanes, instr.x_lanes
    _check_lanes(bp, b, lane_width)
    n1, n2, n3 = block.shape
    body = []
    for i, j, k, v in block.entries:
        body.append(Fma("gx_reg", i, v, "y_reg", j, "gzp_reg", k))
        body.append(Fma("gy_reg", j, v, "x_reg", i, "gzp_reg", k))
        body.append(Fma("z_reg", k, v, "x_reg", i, "y_reg", j))
    if kind == "B":
        ops = [Load((("x_reg", "X[t]", n1), ("y_reg", "y", n2), ("w_reg", "W[t]", 1),
                     ("gz_reg", "GZ[t]", n3), ("gzp_reg", "0", n3), ("gx_reg", "GX[t]", n1),
                     ("gy_reg", "GY@0", n2), ("z_reg", "0", n3), ("gw_reg", "GW[t]", 1)))]
        ops += [Scale("gzp_reg", k, "w_reg", 0, "gz_reg", k) for k in range(n3)]
        ops += body
        ops += [Scale("gw_reg", 0, "gz_reg", k, "z_reg", k) for k in range(n3)]
        ops.append(ReduceLanes("gy_reg", n2))
        ops += [Accumulate("GY", "gy_reg", n2), Accumulate("GX[t]", "gx_reg", n1),
                Accumulate("GW[t]", "gw_reg", 1)]
    else:
        ops = [Matmul("GZp", "W", True, "GZ", False, bp, b, n3)]
        ops.append(Load((("x_reg", "X[t]", n1), ("y_reg", "y", n2), ("gzp_reg", "GZp[t]", n3),
                         ("gx_reg", "GX[t]", n1), ("gy_reg", "GY@0", n2), ("z_reg", "0", n3))))
        ops += body
        ops.append(ReduceLanes("gy_reg", n2))
        ops += [Accumulate("GY", "gy_reg", n2), Accumulate("GX[t]", "gx_reg", n1),
                Store("Zp[t]", "z_reg", n3)]
        ops.append(Matmul("GW", "GZ", False, "Zp", True, b, n3, bp))
    return KernelIR(f"{kind}_bwd", block.l1, block.l2, block.l3, lane_width, bp, b, tuple(ops))


def flop_count(ir: KernelIR) -> int:
    """FLOPs per batch element."""
    L = ir.lanes
    total = 0
    for op in ir.ops:
        if isinstance(op, Fma):
            total += 3 * L
        elif isinstance(op, Scale):
            total += 2 * L
        elif isinstance(op, ReduceLanes):
            total += op.width * (L - 1)
        elif isinstance(op, Matmul):
            total += 2 * op.m * op.k * op.n
    return total


# -- checking ---------------------------------------------------------------

class IRTypeError(AssertionError):
    pass


def typecheck(ir: KernelIR, live_in: dict | None = None) -> dict:
    """Read-before-write and bounds checks; returns the live register widths at exit."""
    regs: dict[str, int] = dict(live_in or {})
    committed: set[str] = set()
    written_bufs: set[str] = set()

    def read(reg, idx):
        if reg not in regs:
            raise IRTypeError(f"{ir.kind}: register {reg} read before load")
        if not 0 <= idx < regs[reg]:
            raise IRTypeError(f"{ir.kind}: {reg}[{idx}] out of bounds (width {regs[reg]})")

    def write(reg, idx):
        read(reg, idx)
        if reg in committed:
            raise IRTypeError(f"{ir.kind}: {reg} written after it was stored")

    def read_buf(name):
        if name in TEMP_BUFFERS and name not in written_bufs:
            raise IRTypeError(f"{ir.kind}: temporary {name} read before written")

    for op in ir.ops:
        if isinstance(op, Load):
            for reg, src, width in op.items:
                read_buf(src.split("[")[0])
                regs[reg] = width
                committed.discard(reg)
        elif isinstance(op, Fma):
            read(op.a, op.i)
            read(op.b, op.j)
            write(op.dst, op.k)
        elif isinstance(op, Scale):
            read(op.a, op.i)
            read(op.b, op.j)
            write(op.dst, op.k)
        elif isinstance(op, ReduceLanes):
            for s in range(op.width):
                write(op.reg, s)
        elif isinstance(op, Matmul):
            read_buf(op.a)
            read_buf(op.b)
            written_bufs.add(op.dst)
        elif isinstance(op, (Store, Accumulate)):
            for s in range(op.width):
                read(op.reg, s)
            committed.add(op.reg)
            written_bufs.add(op.dst.split("[")[0])
    return regs


# -- text -------------------------------------------------------------------

def _fmt_op(op: Op, ir: KernelIR) -> str:
    if isinstance(op, Load):
        items = " ".join(f"{r}[{w}]<-{s}" for r, s, w in op.items)
        return f"load lanes={ir.lanes}/{ir.lane_width} {items}".rstrip()
    if isinstance(op, Fma):
        return f"fma {op.dst}[{op.k}] += {op.v!r} * {op.a}[{op.i}] * {op.b}[{op.j}]"
    if isinstance(op, Scale):
        return f"scale {op.dst}[{op.k}] += {op.a}[{op.i}] * {op.b}[{op.j}]"
    if isinstance(op, ReduceLanes):
        return f"reduce_lanes {op.reg}[{op.width}] over {ir.lanes} lanes"
    if isinstance(op, Matmul):
        a = f"{op.a}{'^T' if op.ta else ''}[{op.m}x{op.k}]"
        b = f"{op.b}{'^T' if op.tb else ''}[{op.k}x{op.n}]"
        return f"matmul {op.dst}[{op.m}x{op.n}] += {a} @ {b}"
    if isinstance(op, Store):
        return f"store {op.dst} <- {op.reg}[{op.width}]"
    if isinstance(op, Accumulate):
        return f"accumulate {op.dst} <- {op.reg}[{op.width}]"
    raise TypeError(op)


def emit_text(ir: KernelIR) -> str:
    return "".join(_fmt_op(op, ir) + "\n" for op in ir.ops)


def golden_name(ir: KernelIR) -> str:
    kind, direction = ir.kind.split("_")
    return f"{ir.l1}_{ir.l2}_{ir.l3}_{kind}_{direction}.ir"


# -- execution ----------------------------------------------------------------
#
# ``bufs`` maps buffer names to arrays for a block of R batch rows:
#   X (R, b', n1)   y (R, n2)   W (R, b') for B or (R, b, b') for C
#   Z (R, b, n3)    Zp, GZp (R, b', n3)   GZ (R, b, n3)
#   GX (R, b', n1)  GY (R, n2)  GW like W
# Register slots are (R, b') arrays except y_reg slots, which are (R, 1).

def _load_slots(src: str, width: int, bufs, R, L, dtype):
    name = src.split("[")[0].split("@")[0]
    if src == "0":
        return [np.zeros((R, L), dtype) for _ in range(width)]
    if src == "y":
        y = bufs["y"]
        return [y[:, s:s + 1] for s in range(width)]
    if src == "GY@0":
        gy = bufs["GY"]
        out = [np.zeros((R, L), dtype) for _ in range(width)]
        for s in range(width):
            out[s][:, 0] = gy[:, s]
        return out
    buf = bufs[name]
    if name in ("W", "GW"):
        return [buf.copy() if name == "GW" else buf]
    if name in ("Z", "GX"):
        return [buf[:, :, s].copy() for s in range(width)]
    return [buf[:, :, s] for s in range(width)]


def _commit(dst: str, slots, bufs, width):
    name = dst.split("[")[0]
    buf = bufs[name]
    if name == "GY":
        for s in range(width):
            buf[:, s] = slots[s][:, 0]
    elif name == "GW":
        buf[...] = slots[0]
    else:
        for s in range(width):
            buf[:, :, s] = slots[s]


def _operand(bufs, name, transposed):
    a = bufs[name]
    return a.transpose(0, 2, 1) if transposed else a


class FlopCounter:
    def __init__(self):
        self.flops = 0


def interpret(ir: KernelIR, bufs: dict, regs: dict | None = None, counter: FlopCounter | None = None) -> dict:
    """Execute ``ir`` on bound buffers; returns the register file (for reuse by the next kernel)."""
    regs = {} if regs is None else regs
    X = bufs["X"]
    R, L = X.shape[0], ir.lanes
    dtype = X.dtype
    t = np.empty((R, L), dtype)
    count = counter is not None
    for op in ir.ops:
        if isinstance(op, Load):
            for reg, src, width in op.items:
                regs[reg] = _load_slots(src, width, bufs, R, L, dtype)
        elif isinstance(op, Fma):
            d = regs[op.dst][op.k]
            np.multiply(regs[op.a][op.i], op.v, out=t)
            np.multiply(t, regs[op.b][op.j], out=t)
            np.add(d, t, out=d)
            if count:
                counter.flops += 3 * t.size
        elif isinstance(op, Scale):
            d = regs[op.dst][op.k]
            np.multiply(regs[op.a][op.i], regs[op.b][op.j], out=t)
            np.add(d, t, out=d)
            if count:
                counter.flops += 2 * t.size
        elif isinstance(op, ReduceLanes):
            for s in range(op.width):
                slot = regs[op.reg][s]
                acc = slot[:, 0:1]
                for lane in range(1, L):
                    np.add(acc, slot[:, lane:lane + 1], out=acc)
                    if count:
                        counter.flops += R
        elif isinstance(op, Matmul):
            dst = bufs[op.dst]
            m = np.matmul(_operand(bufs, op.a, op.ta), _operand(bufs, op.b, op.tb))
            np.add(dst, m, out=dst)
            if count:
                counter.flops += 2 * op.m * op.k * op.n * R
        elif isinstance(op, Store):
            _commit(op.dst, regs[op.reg], bufs, op.width)
        elif isinstance(op, Accumulate):
            _commit(op.dst, regs[op.reg], bufs, op.width)
    return regs


# -- specialization -------------------------------------------------------------

def _src_op(op: Op, L: int) -> list[str]:
    r = lambda reg, s: f"{reg}_{s}"
    if isinstance(op, Load):
        lines = []
        for reg, src, width in op.items:
            names = ", ".join(r(reg, s) for s in range(width)) + ","
            lines.append(f"{names} = _load({src!r}, {width}, bufs, R, {L}, dtype)")
        return lines
    if isinstance(op, Fma):
        d = r(op.dst, op.k)
        return [f"_mul({r(op.a, op.i)}, {op.v!r}, out=_t)",
                f"_mul(_t, {r(op.b, op.j)}, out=_t)",
                f"_add({d}, _t, out={d})"]
    if isinstance(op, Scale):
        d = r(op.dst, op.k)
        return [f"_mul({r(op.a, op.i)}, {r(op.b, op.j)}, out=_t)", f"_add({d}, _t, out={d})"]
    if isinstance(op, ReduceLanes):
        lines = []
        for s in range(op.width):
            lines.append(f"_acc = {r(op.reg, s)}[:, 0:1]")
            lines += [f"_add(_acc, {r(op.reg, s)}[:, {lane}:{lane + 1}], out=_acc)" for lane in range(1, L)]
        return lines
    if isinstance(op, Matmul):
        a = f"bufs[{op.a!r}]" + (".transpose(0, 2, 1)" if op.ta else "")
        b = f"bufs[{op.b!r}]" + (".transpose(0, 2, 1)" if op.tb else "")
        return [f"_d = bufs[{op.dst!r}]", f"_add(_d, _matmul({a}, {b}), out=_d)"]
    if isinstance(op, (Store, Accumulate)):
        names = "[" + ", ".join(r(op.reg, s) for s in range(op.width)) + "]"
        return [f"_commit({op.dst!r}, {names}, bufs, {op.width})"]
    raise TypeError(op)


def kernel_source(irs: Sequence[KernelIR], name: str = "kernel") -> str:
    """Python source running ``irs`` back to back; ``binds[n]`` holds kernel n's buffers.

    Register files are locals, so registers dropped from a later load by
    :func:`eliminate_redundant_loads` keep their values across kernels.
    """
    lines = [f"def {name}(binds):"]
    for n, ir in enumerate(irs):
        lines.append(f"    # {ir.kind} ({ir.l1},{ir.l2},{ir.l3}) lanes={ir.lanes} rows={ir.rows}")
        lines.append(f"    bufs = binds[{n}]")
        lines.append("    X = bufs['X']; R = X.shape[0]; dtype = X.dtype")
        lines.append(f"    _t = _empty((R, {ir.lanes}), dtype)")
        for op in ir.ops:
            lines += ["    " + s for s in _src_op(op, ir.lanes)]
    lines.append("    return None")
    return "\n".join(lines) + "\n"


def specialize(irs: Sequence[KernelIR], name: str = "kernel"):
    """Compile ``irs`` into a single callable taking one buffer dict per kernel."""
    src = kernel_source(irs, name)
    env = {
        "_mul": np.multiply, "_add": np.add, "_matmul": np.matmul, "_empty": np.empty,
        "_load": _load_slots, "_commit": _commit,
    }
    exec(compile(src, f"<cgforge:{name}>", "exec"), env)
    fn = env[name]
    fn.source = src
    return fn


def interpret_sequence(irs: Sequence[KernelIR], binds: Sequence[dict], counter: FlopCounter | None = None):
    regs: dict = {}
    for ir, bufs in zip(irs, binds):
        regs = interpret(ir, bufs, regs, counter)


# -- register persistence -------------------------------------------------------

_READ_ONLY = {"x_reg": ("x_offset", "x_lanes", "l1"), "y_reg": ("y_offset", "l2")}


def eliminate_redundant_loads(instrs: Sequence, irs: Sequence[KernelIR]) -> tuple[list[KernelIR], int]:
    """Drop reloads of ``x_reg``/``y_reg`` that already hold the same data.

    Both register files are never written by any kernel, so when consecutive
    kernels read the same segment the previous kernel's registers are reused.
    Returns the rewritten kernels and the number of register slots saved.
    """
    out = []
    saved = 0
    prev: Optional[object] = None
    for ins, ir in zip(instrs, irs):
        drop = []
        if prev is not None:
            for reg, keys in _READ_ONLY.items():
                if all(getattr(ins, k) == getattr(prev, k) for k in keys):
                    drop.append(reg)
        if drop:
            for op in ir.ops:
                if isinstance(op, Load):
                    saved += sum(w for r, _, w in op.items if r in drop)
            ir = ir.without_loads(drop)
        out.append(ir)
        prev = ins
    return out, saved
