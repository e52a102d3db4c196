"""Compile-time scheduling of subkernels under a per-worker scratch budget.

A schedule is a list of phases.  Each phase names the ranges it loads from
global memory, the ``z`` ranges accumulated in scratch and the ranges it
stores back, plus the subkernels it runs.  Three strategies:

``single_phase``
    everything fits; one phase.
``stream_z``
    ``x`` and ``y`` stay resident; groups of ``z`` segments (with the weights
    of the subkernels writing them) are streamed through successive phases.
``greedy``
    walk the subkernels in order, keeping as many ranges resident as fit;
    when the next subkernel does not fit, start a new phase and evict the
    ranges whose next use is farthest away (Belady).  Evicted ``z`` ranges
    are stored and reloaded if used again.

Ranges are ``(buffer, offset, length)`` in words, with buffer one of
``x y w z``.  Weight ranges use positions in the split weight order
(``ValidatedProblem.weight_remap``).  Only ranges some subkernel reads are
ever loaded.  ``z`` ranges no subkernel writes are zero-filled and counted as
stores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .kernelgen import flop_count, gen_forward
from .tpspec import ResolvedInstruction, ValidatedProblem, split_resolved

DEFAULT_BUDGET_WORDS = 4096


class BudgetError(ValueError):
    def __init__(self, subkernel: int, instr: ResolvedInstruction, need: int, budget: int):
        self.subkernel = subkernel
        self.need = need
        self.budget = budget
        super().__init__(
            f"budget of {budget} words is too small for subkernel {subkernel} "
            f"(instruction {instr.index}, {instr.kind} ({instr.l1},{instr.l2},{instr.l3}), "
            f"b={instr.z_lanes}, b'={instr.x_lanes}) which needs {need} words")


Range = tuple  # (buffer, offset, length)


@dataclass(frozen=True)
class Phase:
    loads: tuple[Range, ...]
    z_ranges: tuple[Range, ...]  # z ranges accumulated in scratch this phase
    stores: tuple[Range, ...]  # z ranges written back when the phase ends
    subkernels: tuple[int, ...]  # indices into Schedule.problem.resolved
    resident_words: int  # words carried over from earlier phases
    scratch_words: int  # peak scratch occupancy
    evicts: tuple[Range, ...] = ()  # x/y/w ranges dropped when the phase ends

    def to_dict(self) -> dict:
        return {
            "loads": [list(r) for r in self.loads],
            "z_ranges": [list(r) for r in self.z_ranges],
            "stores": [list(r) for r in self.stores],
            "subkernels": list(self.subkernels),
            "resident_words": self.resident_words,
            "scratch_words": self.scratch_words,
            "evicts": [list(r) for r in self.evicts],
        }


@dataclass(frozen=True)
class TrafficReport:
    loads_words: int
    stores_words: int
    flops: int
    word_bytes: int = 8

    @property
    def arithmetic_intensity(self) -> float:
        words = self.loads_words + self.stores_words
        return self.flops / (self.word_bytes * words) if words else 0.0

    def to_dict(self) -> dict:
        return {"loads_words": self.loads_words, "stores_words": self.stores_words,
                "flops": self.flops, "word_bytes": self.word_bytes,
                "arithmetic_intensity": self.arithmetic_intensity}


@dataclass(frozen=True)
class Schedule:
    problem: ValidatedProblem  # the multiplicity-split problem the phases refer to
    source: ValidatedProblem  # problem before splitting
    phases: tuple[Phase, ...]
    strategy: str
    budget_words: int
    zero_fill: tuple[Range, ...] = ()
    traffic: Optional[TrafficReport] = field(default=None, compare=False)

    def order(self) -> list[int]:
        return [k for ph in self.phases for k in ph.subkernels]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget_words": self.budget_words,
            "lane_width": self.problem.lane_width,
            "problem": self.source.to_dict(),
            "subkernels": [
                {"instruction": r.index, "kind": r.kind, "l": [r.l1, r.l2, r.l3],
                 "x": [r.x_offset, r.x_words], "y": [r.y_offset, r.n2],
                 "z": [r.z_offset, r.z_words], "b": r.z_lanes, "b_prime": r.x_lanes}
                for r in self.problem.resolved
            ],
            "phases": [ph.to_dict() for ph in self.phases],
            "zero_fill": [list(r) for r in self.zero_fill],
            "traffic": self.traffic.to_dict() if self.traffic else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def split_multiplicities(p: ValidatedProblem, lane_width: int = 32) -> ValidatedProblem:
    return split_resolved(p, lane_width)


def _w_ranges(p: ValidatedProblem) -> list[Range]:
    out, pos = [], 0
    for r in p.resolved:
        out.append(("w", pos, r.w_count))
        pos += r.w_count
    return out


def _needs(p: ValidatedProblem) -> list[dict]:
    wr = _w_ranges(p)
    return [
        {"x": ("x", r.x_offset, r.x_words), "y": ("y", r.y_offset, r.n2),
         "w": wr[n], "z": ("z", r.z_offset, r.z_words), "temp": r.temp_words}
        for n, r in enumerate(p.resolved)
    ]


def working_set(r: ResolvedInstruction) -> int:
    return r.x_words + r.n2 + r.w_count + r.z_words + r.temp_words


def _dedup(ranges):
    seen, out = set(), []
    for rg in ranges:
        if rg not in seen:
            seen.add(rg)
            out.append(rg)
    return out


def _zero_fill(p: ValidatedProblem) -> tuple[Range, ...]:
    written = set()
    for r in p.resolved:
        written.update(range(r.z_offset, r.z_offset + r.z_words))
    out = []
    start = None
    for pos in range(p.dim_z + 1):
        free = pos < p.dim_z and pos not in written
        if free and start is None:
            start = pos
        elif not free and start is not None:
            out.append(("z", start, pos - start))
            start = None
    return tuple(out)


def _z_grouped_order(p: ValidatedProblem) -> list[int]:
    """Subkernel order with every z range's writers contiguous (first-writer order)."""
    groups: dict[Range, list[int]] = {}
    for n, r in enumerate(p.resolved):
        groups.setdefault(("z", r.z_offset, r.z_words), []).append(n)
    return [n for members in groups.values() for n in members]


def _words(ranges) -> int:
    return sum(r[2] for r in ranges)


def build_schedule(p: ValidatedProblem, budget_words: int = DEFAULT_BUDGET_WORDS,
                   lane_width: int = 32, group_z: bool = True,
                   strategy: Optional[str] = None) -> Schedule:
    """Split multiplicities (if not done) and schedule under ``budget_words``.

    ``strategy`` forces a strategy; by default the first applicable one of
    single_phase, stream_z, greedy is used.  With ``group_z=False``
    stream_z puts exactly one z range per phase.
    """
    source = p
    if p.lane_width is None:
        p = split_resolved(p, lane_width)
    needs = _needs(p)
    for n, r in enumerate(p.resolved):
        ws = working_set(r)
        if ws > budget_words:
            raise BudgetError(n, r, ws, budget_words)

    order = _z_grouped_order(p)
    xs = _dedup(needs[n]["x"] for n in order)
    ys = _dedup(needs[n]["y"] for n in order)
    ws_ = [needs[n]["w"] for n in order]
    zs = _dedup(needs[n]["z"] for n in order)
    max_temp = max((r.temp_words for r in p.resolved), default=0)
    everything = _words(xs) + _words(ys) + _words(ws_) + _words(zs) + max_temp

    if strategy is None:
        if everything <= budget_words:
            strategy = "single_phase"
        elif _words(xs) + _words(ys) + _stream_min(p, needs, order) <= budget_words:
            strategy = "stream_z"
        else:
            strategy = "greedy"

    if strategy == "single_phase":
        if everything > budget_words:
            raise ValueError("single_phase schedule does not fit the budget")
        phases = (Phase(tuple(xs + ys + ws_), tuple(zs), tuple(zs), tuple(order), 0, everything),)
    elif strategy == "stream_z":
        if _words(xs) + _words(ys) + _stream_min(p, needs, order) > budget_words:
            raise ValueError("stream_z schedule does not fit the budget")
        phases = _stream_z(p, needs, order, xs, ys, budget_words, group_z)
    elif strategy == "greedy":
        phases = _greedy(p, needs, order, budget_words)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    s = Schedule(p, source, tuple(phases), strategy, budget_words, _zero_fill(p))
    return Schedule(s.problem, s.source, s.phases, s.strategy, s.budget_words, s.zero_fill, traffic_report(s))


def _z_groups(needs, order):
    groups: dict[Range, list[int]] = {}
    for n in order:
        groups.setdefault(needs[n]["z"], []).append(n)
    return list(groups.items())


def _group_cost(needs, members, z):
    return z[2] + sum(needs[n]["w"][2] for n in members) + max(needs[n]["temp"] for n in members)


def _stream_min(p, needs, order) -> int:
    return max((_group_cost(needs, m, z) for z, m in _z_groups(needs, order)), default=0)


def _stream_z(p, needs, order, xs, ys, budget, group_z) -> list[Phase]:
    resident = _words(xs) + _words(ys)
    room = budget - resident
    phases: list[Phase] = []
    cur_z: list[Range] = []
    cur_members: list[int] = []
    cur_w = cur_temp = 0

    def flush(first):
        ws = [needs[n]["w"] for n in cur_members]
        loads = (xs + ys if first else []) + ws
        zw = _words(cur_z)
        phases.append(Phase(tuple(loads), tuple(cur_z), tuple(cur_z), tuple(cur_members),
                            0 if first else resident, resident + zw + cur_w + cur_temp, tuple(ws)))

    for z, members in _z_groups(needs, order):
        w = sum(needs[n]["w"][2] for n in members)
        temp = max(needs[n]["temp"] for n in members)
        fits = _words(cur_z) + z[2] + cur_w + w + max(cur_temp, temp) <= room
        if cur_z and (not group_z or not fits):
            flush(not phases)
            cur_z, cur_members, cur_w, cur_temp = [], [], 0, 0
        cur_z.append(z)
        cur_members.extend(members)
        cur_w += w
        cur_temp = max(cur_temp, temp)
    if cur_z or not phases:
        flush(not phases)
    return phases


def _greedy(p, needs, order, budget) -> list[Phase]:
    # next-use table over the ordered subkernel stream
    positions: dict[Range, list[int]] = {}
    for pos, n in enumerate(order):
        for key in ("x", "y", "w", "z"):
            positions.setdefault(needs[n][key], []).append(pos)

    def next_use(rg, pos):
        for q in positions[rg]:
            if q >= pos:
                return q
        return float("inf")

    resident: dict[Range, None] = {}  # insertion-ordered set
    stored_once: set[Range] = set()  # z ranges with a partial sum in global memory
    phases: list[Phase] = []
    cur = {"loads": [], "z": [], "subs": [], "temp": 0, "start_resident": 0}

    def used():
        return _words(resident)

    def close(stores, evicts=()):
        zr = _dedup(cur["z"])
        phases.append(Phase(tuple(cur["loads"]), tuple(zr), tuple(stores), tuple(cur["subs"]),
                            cur["start_resident"], cur["peak"], tuple(evicts)))

    cur["peak"] = 0
    for pos, n in enumerate(order):
        need = [needs[n][k] for k in ("x", "y", "w", "z")]
        temp = needs[n]["temp"]
        missing = [rg for rg in _dedup(need) if rg not in resident]
        fits = used() + _words(missing) + max(cur["temp"], temp) <= budget
        if not fits:
            # end the phase: evict farthest-next-use ranges until this subkernel fits
            evicted_z, evicted = [], []
            candidates = sorted((rg for rg in resident if rg not in need),
                                key=lambda rg: (-next_use(rg, pos), order_key(rg)))
            for rg in candidates:
                if used() + _words(missing) + temp <= budget:
                    break
                del resident[rg]
                if rg[0] == "z":
                    evicted_z.append(rg)
                else:
                    evicted.append(rg)
            close(evicted_z, evicted)
            stored_once.update(evicted_z)
            cur = {"loads": [], "z": [], "subs": [], "temp": 0, "start_resident": used(), "peak": 0}
        for rg in missing:
            resident[rg] = None
            if rg[0] != "z" or rg in stored_once:
                cur["loads"].append(rg)
        # z ranges still resident from the previous phase keep accumulating here
        cur["z"].append(needs[n]["z"])
        cur["subs"].append(n)
        cur["temp"] = max(cur["temp"], temp)
        cur["peak"] = max(cur["peak"], used() + cur["temp"])
    final = [rg for rg in resident if rg[0] == "z"]
    if cur["subs"] or not phases:
        close(final)
    return phases


def order_key(rg):
    return ("xywz".index(rg[0]), rg[1])


def traffic_report(s: Schedule, word_bytes: int = 8) -> TrafficReport:
    loads = sum(_words(ph.loads) for ph in s.phases)
    stores = sum(_words(ph.stores) for ph in s.phases) + _words(s.zero_fill)
    flops = sum(flop_count(gen_forward(r, r.block, s.problem.lane_width)) for r in s.problem.resolved)
    return TrafficReport(loads, stores, flops, word_bytes)


def naive_traffic(p: ValidatedProblem, lane_width: int = 32) -> TrafficReport:
    """Per-subkernel strategy: load x/y/W and store z for every subkernel."""
    if p.lane_width is None:
        p = split_resolved(p, lane_width)
    loads = sum(r.x_words + r.n2 + r.w_count for r in p.resolved)
    stores = sum(r.z_words for r in p.resolved) + _words(_zero_fill(p))
    flops = sum(flop_count(gen_forward(r, r.block, p.lane_width)) for r in p.resolved)
    return TrafficReport(loads, stores, flops)


class ScheduleError(AssertionError):
    pass


def check_schedule(s: Schedule) -> None:
    """Replay the schedule and verify its invariants; raises :class:`ScheduleError`."""
    p = s.problem
    needs = _needs(p)
    seen = sorted(s.order())
    if seen != list(range(len(p.resolved))):
        raise ScheduleError(f"subkernels run {seen}, expected each of 0..{len(p.resolved) - 1} once")
    resident: set = set()
    dirty: set = set()  # z ranges holding unstored partial sums
    stored: set = set()
    z_phases: dict[Range, list[int]] = {}
    for ph_i, ph in enumerate(s.phases):
        resident.update(ph.loads)
        for z in ph.z_ranges:
            if z not in resident:
                if z in stored:
                    raise ScheduleError(f"phase {ph_i}: z range {z} accumulated without reloading its partial sum")
                resident.add(z)
        if _words(resident) > s.budget_words:
            raise ScheduleError(f"phase {ph_i}: {_words(resident)} resident words exceed budget {s.budget_words}")
        if ph.scratch_words > s.budget_words:
            raise ScheduleError(f"phase {ph_i}: scratch {ph.scratch_words} exceeds budget {s.budget_words}")
        for n in ph.subkernels:
            for key in ("x", "y", "w", "z"):
                if needs[n][key] not in resident:
                    raise ScheduleError(f"phase {ph_i}: subkernel {n} reads {needs[n][key]} which is not resident")
            dirty.add(needs[n]["z"])
            z_phases.setdefault(needs[n]["z"], []).append(ph_i)
        for z in ph.stores:
            dirty.discard(z)
            stored.add(z)
            resident.discard(z)
        resident.difference_update(ph.evicts)
    if dirty:
        raise ScheduleError(f"z ranges never stored: {sorted(dirty)}")
    for z, ph_list in z_phases.items():
        if sorted(set(ph_list)) != list(range(min(ph_list), max(ph_list) + 1)):
            raise ScheduleError(f"z range {z} is written by non-contiguous phases {sorted(set(ph_list))}")
