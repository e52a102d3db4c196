"""Tensor-product problem description and validation.

A problem is three :class:`~cgforge.irreps.Irreps` (for ``x``, ``y`` and ``z``)
plus a list of instructions ``(x_seg, y_seg, z_seg, kind)`` with 1-based
segment indices.  Two subkernel kinds are supported:

``B``
    ``mult(x_seg) == mult(z_seg) == b`` and ``mult(y_seg) == 1``; the weights
    are a diagonal ``b x b`` matrix stored as ``b`` values.
``C``
    ``mult(y_seg) == 1``, ``b' = mult(x_seg)``, ``b = mult(z_seg)``; the
    weights are a dense ``b x b'`` matrix stored row-major (``b`` rows of
    ``b'`` values).

Weights of all instructions are concatenated in instruction order.  Several
instructions may write the same ``z`` segment; their contributions add.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cg import CGBlock, cg_block, triangle_ok
from .irreps import Irreps, parse_irreps

KINDS = ("B", "C")


@dataclass(frozen=True)
class Instruction:
    x_seg: int
    y_seg: int
    z_seg: int
    kind: str

    @classmethod
    def coerce(cls, item) -> "Instruction":
        if isinstance(item, Instruction):
            return item
        xs, ys, zs, kind = item
        return cls(xs, ys, zs, kind)


@dataclass(frozen=True)
class Violation:
    instruction: Optional[int]  # 0-based index into the instruction list; None for global issues
    code: str
    message: str

    def __str__(self):
        where = "problem" if self.instruction is None else f"instruction {self.instruction}"
        return f"{where}: {self.code}: {self.message}"


class InvalidProblem(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("\n".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class ResolvedInstruction:
    """One subkernel with every offset resolved.

    ``x_offset``/``z_offset`` point at lane 0 of the (possibly chunked)
    segment; lane ``t`` occupies ``[off + t*(2l+1), off + (t+1)*(2l+1))``.
    Weight element ``(r, c)`` of a C kernel lives at
    ``w_offset + r * w_row_stride + c``; lane ``t`` of a B kernel at
    ``w_offset + t``.
    """

    index: int  # instruction this subkernel came from
    kind: str
    l1: int
    l2: int
    l3: int
    x_offset: int
    x_lanes: int  # b'
    y_offset: int
    z_offset: int
    z_lanes: int  # b
    w_offset: int
    w_row_stride: int
    block: CGBlock = field(repr=False, compare=False)

    @property
    def n1(self) -> int:
        return 2 * self.l1 + 1

    @property
    def n2(self) -> int:
        return 2 * self.l2 + 1

    @property
    def n3(self) -> int:
        return 2 * self.l3 + 1

    @property
    def x_words(self) -> int:
        return self.x_lanes * self.n1

    @property
    def z_words(self) -> int:
        return self.z_lanes * self.n3

    @property
    def w_count(self) -> int:
        return self.z_lanes if self.kind == "B" else self.z_lanes * self.x_lanes

    @property
    def temp_words(self) -> int:
        """Scratch needed for ``Z'`` (C kernels only)."""
        return self.x_lanes * self.n3 if self.kind == "C" else 0

    def weight_indices(self) -> np.ndarray:
        """Positions in the compressed weight vector, in kernel (row-major) order."""
        if self.kind == "B":
            return self.w_offset + np.arange(self.z_lanes)
        r = np.arange(self.z_lanes)[:, None] * self.w_row_stride
        c = np.arange(self.x_lanes)[None, :]
        return (self.w_offset + r + c).ravel()


@dataclass(frozen=True)
class ValidatedProblem:
    x_ir: Irreps
    y_ir: Irreps
    z_ir: Irreps
    instructions: tuple[Instruction, ...]
    resolved: tuple[ResolvedInstruction, ...]
    total_weights: int
    lane_width: Optional[int] = None  # set once multiplicities are split
    weight_remap: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def dim_x(self) -> int:
        return self.x_ir.dim

    @property
    def dim_y(self) -> int:
        return self.y_ir.dim

    @property
    def dim_z(self) -> int:
        return self.z_ir.dim

    def to_dict(self) -> dict:
        return problem_to_dict(self.x_ir, self.y_ir, self.z_ir, self.instructions)

    def same_problem(self, other: "ValidatedProblem") -> bool:
        return (str(self.x_ir), str(self.y_ir), str(self.z_ir), self.instructions) == (
            str(other.x_ir), str(other.y_ir), str(other.z_ir), other.instructions)


def check(x_ir, y_ir, z_ir, instrs) -> list[Violation]:
    """All violations of the problem; empty when it is valid. Never raises."""
    out: list[Violation] = []
    irs = []
    for name, ir in (("x", x_ir), ("y", y_ir), ("z", z_ir)):
        if isinstance(ir, str):
            try:
                ir = parse_irreps(ir)
            except ValueError as e:
                out.append(Violation(None, "parse", f"{name}: {e}"))
                ir = None
        irs.append(ir)
    if any(ir is None for ir in irs):
        return out
    xi, yi, zi = irs
    for n, item in enumerate(instrs):
        try:
            ins = Instruction.coerce(item)
            segs = (int(ins.x_seg), int(ins.y_seg), int(ins.z_seg))
        except (TypeError, ValueError):
            out.append(Violation(n, "malformed", f"cannot read instruction {item!r}"))
            continue
        if ins.kind not in KINDS:
            out.append(Violation(n, "kind", f"unknown kernel kind {ins.kind!r}"))
            continue
        bad = False
        for name, s, ir in zip("xyz", segs, (xi, yi, zi)):
            if not 1 <= s <= len(ir):
                out.append(Violation(n, "range", f"{name}_seg={s} outside 1..{len(ir)}"))
                bad = True
        if bad:
            continue
        bx, by, bz = xi[segs[0] - 1], yi[segs[1] - 1], zi[segs[2] - 1]
        if by.mul != 1:
            out.append(Violation(n, "unsupported", f"y segment multiplicity {by.mul} != 1 is not supported"))
        if ins.kind == "B" and bx.mul != bz.mul:
            out.append(Violation(n, "multiplicity", f"kind B needs mult(x)=mult(z), got {bx.mul} and {bz.mul}"))
        if not triangle_ok(bx.ir.l, by.ir.l, bz.ir.l):
            out.append(Violation(n, "triangle", f"l=({bx.ir.l},{by.ir.l},{bz.ir.l}) violates the triangle rule"))
        if bx.ir.p * by.ir.p != bz.ir.p:
            out.append(Violation(n, "parity", f"{bx.ir} x {by.ir} cannot produce {bz.ir}"))
    return out


def validate(x_ir, y_ir, z_ir, instrs) -> ValidatedProblem:
    """Resolve a problem; raises :class:`InvalidProblem` listing every violation."""
    violations = check(x_ir, y_ir, z_ir, instrs)
    if violations:
        raise InvalidProblem(violations)
    xi, yi, zi = (ir if isinstance(ir, Irreps) else parse_irreps(ir) for ir in (x_ir, y_ir, z_ir))
    instructions = tuple(Instruction.coerce(i) for i in instrs)
    xo, yo, zo = xi.offsets, yi.offsets, zi.offsets
    resolved = []
    w = 0
    for n, ins in enumerate(instructions):
        bx, by, bz = xi[ins.x_seg - 1], yi[ins.y_seg - 1], zi[ins.z_seg - 1]
        r = ResolvedInstruction(
            index=n, kind=ins.kind, l1=bx.ir.l, l2=by.ir.l, l3=bz.ir.l,
            x_offset=xo[ins.x_seg - 1], x_lanes=bx.mul,
            y_offset=yo[ins.y_seg - 1],
            z_offset=zo[ins.z_seg - 1], z_lanes=bz.mul,
            w_offset=w, w_row_stride=bx.mul if ins.kind == "C" else 1,
            block=cg_block(bx.ir.l, by.ir.l, bz.ir.l),
        )
        resolved.append(r)
        w += r.w_count
    return ValidatedProblem(xi, yi, zi, instructions, tuple(resolved), w)


def problem_dims(p: ValidatedProblem) -> tuple[int, int, int, int]:
    return p.dim_x, p.dim_y, p.dim_z, p.total_weights


def split_resolved(p: ValidatedProblem, lane_width: int = 32) -> ValidatedProblem:
    """Chunk every subkernel so that ``b, b' <= lane_width``.

    Chunks start at multiples of ``lane_width`` from the segment start, so two
    chunks of the same segment are either identical or disjoint.  The chunks
    read weights straight from the original compressed layout;
    ``weight_remap[q] = original position`` lists them in chunk order.
    """
    if lane_width < 1:
        raise ValueError("lane_width must be positive")
    out = []
    for r in p.resolved:
        if r.kind == "B":
            for t0 in range(0, r.z_lanes, lane_width):
                n = min(lane_width, r.z_lanes - t0)
                out.append(replace(
                    r, x_offset=r.x_offset + t0 * r.n1, x_lanes=n,
                    z_offset=r.z_offset + t0 * r.n3, z_lanes=n, w_offset=r.w_offset + t0,
                ))
        else:
            for r0 in range(0, r.z_lanes, lane_width):
                nr = min(lane_width, r.z_lanes - r0)
                for c0 in range(0, r.x_lanes, lane_width):
                    nc = min(lane_width, r.x_lanes - c0)
                    out.append(replace(
                        r, x_offset=r.x_offset + c0 * r.n1, x_lanes=nc,
                        z_offset=r.z_offset + r0 * r.n3, z_lanes=nr,
                        w_offset=r.w_offset + r0 * r.w_row_stride + c0,
                    ))
    remap = np.concatenate([s.weight_indices() for s in out]) if out else np.zeros(0, dtype=np.int64)
    return replace(p, resolved=tuple(out), lane_width=lane_width, weight_remap=remap)


# -- JSON problem files ---------------------------------------------------

def problem_to_dict(x_ir, y_ir, z_ir, instrs) -> dict:
    return {
        "x": str(x_ir), "y": str(y_ir), "z": str(z_ir),
        "instructions": [[i.x_seg, i.y_seg, i.z_seg, i.kind] for i in map(Instruction.coerce, instrs)],
    }


def problem_from_dict(d: dict) -> ValidatedProblem:
    missing = [k for k in ("x", "y", "z", "instructions") if k not in d]
    if missing:
        raise InvalidProblem([Violation(None, "schema", f"missing key {k!r}") for k in missing])
    return validate(d["x"], d["y"], d["z"], d["instructions"])


def load_problem(path) -> ValidatedProblem:
    return problem_from_dict(json.loads(Path(path).read_text()))


def save_problem(p: ValidatedProblem, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n")


EXAMPLE_PROBLEM = {
    "x": "32x2e + 32x1e",
    "y": "1x3e + 1x1e",
    "z": "32x5e + 16x2e + 32x3e",
    "instructions": [[1, 1, 1, "B"], [1, 2, 2, "C"], [1, 2, 3, "C"]],
}
