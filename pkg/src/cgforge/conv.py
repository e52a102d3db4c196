"""Tensor product fused with graph convolution.

For a graph with edges ``e = (s, t)`` sorted by ``s`` (CSR order)::

    z[s] = sum over edges (s, t, e) of TP(x[t], y[e], W[e])

Deterministic mode walks the edge list in fixed-size warps (contiguous edge
ranges whose boundaries depend only on the edge count).  Each warp keeps a
running accumulator per node row and flushes it when the row changes; the
first row a warp touches goes to a fixup buffer instead, because an earlier
warp may hold part of the same row.  Fixups are applied after all warps, in
ascending (phase, warp) order.  Worker threads only decide *who* runs a warp,
so the output is bitwise independent of the worker count.

Atomic mode adds every edge's contribution straight into the shared node row
under a striped lock.  The result depends on thread interleaving.

The backward pass needs ``g_x`` summed per neighbour ``t``; it walks the edges
in the CSR order of the transposed graph (via :func:`transpose_permutation`)
and reuses the same warp/fixup reduction.
"""
from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import engine
from .scheduler import Schedule
from .tpspec import ValidatedProblem

EDGE_BLOCK = 512  # edges per warp
N_LOCKS = 64


# -- geometry -------------------------------------------------------------------

class XYZParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class Geometry:
    positions: np.ndarray  # (s, 3)
    species: tuple[str, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.species) != pos.shape[0]:
            raise ValueError(f"{pos.shape[0]} positions but {len(self.species)} species labels")
        if not np.isfinite(pos).all():
            raise ValueError("non-finite coordinate")
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]


def parse_xyz(text: str) -> Geometry:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise XYZParseError(1, "missing atom count")
    try:
        count = int(lines[0].split()[0])
    except ValueError:
        raise XYZParseError(1, f"malformed atom count {lines[0].strip()!r}") from None
    if count < 0:
        raise XYZParseError(1, f"negative atom count {count}")
    body = lines[2:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != count:
        raise XYZParseError(1, f"count line says {count} atoms, file has {len(body)} rows")
    species, pos = [], []
    for n, line in enumerate(body, start=3):
        parts = line.split()
        if len(parts) < 4:
            raise XYZParseError(n, f"expected 'El x y z', got {line.strip()!r}")
        try:
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise XYZParseError(n, f"non-numeric coordinate in {line.strip()!r}") from None
        if not np.isfinite(xyz).all():
            raise XYZParseError(n, "non-finite coordinate")
        species.append(parts[0])
        pos.append(xyz)
    return Geometry(np.array(pos, dtype=float).reshape(-1, 3), tuple(species))


def load_xyz(path) -> Geometry:
    return parse_xyz(Path(path).read_text())


def format_xyz(geo: Geometry, comment: str = "") -> str:
    rows = [f"{el} {x:.8f} {y:.8f} {z:.8f}" for el, (x, y, z) in zip(geo.species, geo.positions)]
    return "\n".join([str(len(geo)), comment] + rows) + "\n"


def carbon_lattice(cells: int = 5, a: float = 3.567, jitter: float = 0.05, seed: int = 0) -> Geometry:
    """Diamond-cubic block of ``8 * cells**3`` carbon atoms with small seeded displacements.

    The displacement breaks the shell degeneracy of the perfect lattice so a
    cutoff can hit an edge-count target exactly.
    """
    basis = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
                      [.25, .25, .25], [.25, .75, .75], [.75, .25, .75], [.75, .75, .25]])
    grid = np.stack(np.meshgrid(*[np.arange(cells)] * 3, indexing="ij"), -1).reshape(-1, 1, 3)
    pos = ((grid + basis[None]) * a).reshape(-1, 3)
    pos = pos + np.random.default_rng(seed).normal(scale=jitter, size=pos.shape)
    return Geometry(pos, ("C",) * len(pos))


def cutoff_for_edges(geo: Geometry, target_edges: int) -> float:
    """Cutoff giving ``target_edges`` directed edges (nearest achievable even count)."""
    n = len(geo)
    if n < 2 or target_edges <= 0:
        return 1e-9
    from scipy.spatial.distance import pdist

    d = np.sort(pdist(geo.positions))
    k = min(max(target_edges // 2, 1), len(d))
    upper = d[k] if k < len(d) else d[-1] + 1.0
    return float(0.5 * (d[k - 1] + upper))


# -- graphs -------------------------------------------------------------------------

class UnsortedEdgesError(ValueError):
    pass


@dataclass(frozen=True)
class GraphCSR:
    """Directed edges ``(rows[e], cols[e])``.  Aggregation happens at ``rows``."""

    node_count: int
    rows: np.ndarray
    cols: np.ndarray
    row_ptr: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        if rows.shape != cols.shape:
            raise ValueError("rows and cols differ in length")
        if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= self.node_count):
            raise ValueError("edge endpoint outside 0..node_count-1")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "row_ptr", np.searchsorted(rows, np.arange(self.node_count + 1))
                           if self.is_sorted() else None)

    @property
    def edge_count(self) -> int:
        return self.rows.size

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.rows, self.cols], axis=1)

    def is_sorted(self) -> bool:
        """Strictly increasing in ``(row, col)``."""
        r, c = self.rows, self.cols
        if r.size < 2:
            return True
        return bool(np.all((r[1:] > r[:-1]) | ((r[1:] == r[:-1]) & (c[1:] > c[:-1]))))

    def has_self_loops(self) -> bool:
        return bool(np.any(self.rows == self.cols))

    @classmethod
    def from_edges(cls, node_count: int, edges, allow_self_loops: bool = False) -> "GraphCSR":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if not allow_self_loops and np.any(e[:, 0] == e[:, 1]):
            raise ValueError("self-loop in edge list")
        order = np.lexsort((e[:, 1], e[:, 0]))
        e = e[order]
        if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise ValueError("duplicate edge")
        return cls(node_count, e[:, 0], e[:, 1])

    def transpose(self) -> "GraphCSR":
        order = np.lexsort((self.rows, self.cols))
        return GraphCSR(self.node_count, self.cols[order], self.rows[order])

    def to_dict(self) -> dict:
        return {"nodes": int(self.node_count), "edges": self.edges.tolist()}


def dump_graph(g: GraphCSR, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict()) + "\n")


def load_graph(path) -> GraphCSR:
    d = json.loads(Path(path).read_text())
    e = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2)
    return GraphCSR(int(d["nodes"]), e[:, 0], e[:, 1])


def radius_graph(geo: Geometry, r_cut: float) -> GraphCSR:
    """All ordered pairs ``(i, j)``, ``i != j``, with ``|r_i - r_j| <= r_cut``, CSR-sorted."""
    if not r_cut > 0:
        raise ValueError("r_cut must be positive")
    n = len(geo)
    if n < 2:
        return GraphCSR(n, np.zeros(0, np.int64), np.zeros(0, np.int64))
    pairs = cKDTree(geo.positions).query_pairs(r_cut, output_type="ndarray")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((cols, rows))
    return GraphCSR(n, rows[order], cols[order])


def lattice_graph(cells: int = 5, target_edges: int = 158_000, seed: int = 0) -> tuple[Geometry, GraphCSR]:
    geo = carbon_lattice(cells, seed=seed)
    return geo, radius_graph(geo, cutoff_for_edges(geo, target_edges))


def transpose_permutation(g: GraphCSR) -> np.ndarray:
    """``perm[e]`` = position of edge ``e`` in the CSR order of the transposed graph."""
    order = np.lexsort((g.rows, g.cols))
    perm = np.empty_like(order)
    perm[order] = np.arange(order.size)
    return perm


# -- counters -------------------------------------------------------------------------

@dataclass
class ConvCounters:
    node_reads: int = 0  # node-feature words read (x, or g_z in the backward)
    edge_reads: int = 0  # edge-feature words read (y, W)
    node_store_ops: int = 0  # row-segment writes into the node output
    node_store_words: int = 0
    fixup_slots: int = 0
    dup_words: int = 0  # words of duplicated node features materialized (unfused only)
    per_phase_store_ops: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **kw):
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)


# -- shared helpers -------------------------------------------------------------------

def _check_inputs(p: ValidatedProblem, g: GraphCSR, node_x, edge_y, edge_w):
    dt = np.result_type(node_x, edge_y, edge_w)
    dt = np.float32 if dt == np.float32 else np.float64
    x = np.ascontiguousarray(node_x, dtype=dt)
    y = np.ascontiguousarray(edge_y, dtype=dt)
    w = np.ascontiguousarray(edge_w, dtype=dt)
    want = ((x, (g.node_count, p.dim_x), "node_x"), (y, (g.edge_count, p.dim_y), "edge_y"),
            (w, (g.edge_count, p.total_weights), "edge_w"))
    for a, shape, name in want:
        if a.shape != shape:
            raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    return x, y, w, dt


def _warps(n_edges):
    return [(e0, min(n_edges, e0 + EDGE_BLOCK)) for e0 in range(0, n_edges, EDGE_BLOCK)]


def _run(fn, items, workers):
    workers = engine.default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _phase_x_columns(s: Schedule) -> list[np.ndarray]:
    """Node-feature columns each phase reads."""
    out = []
    for ph in s.phases:
        cols = set()
        for k in ph.subkernels:
            r = s.problem.resolved[k]
            cols.update(range(r.x_offset, r.x_offset + r.x_words))
        out.append(np.array(sorted(cols), dtype=np.int64))
    return out


def _runs(keys):
    """Start indices of runs of equal keys, plus the end."""
    if keys.size == 0:
        return np.zeros(1, np.int64)
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    return np.r_[starts, keys.size]


def _reduce_warp(keys, contrib, out, cols, fixups, counters, phase_ops):
    """Flush per-row partial sums of one warp; the first row goes to ``fixups``."""
    b = _runs(keys)
    sums = np.add.reduceat(contrib, b[:-1], axis=0) if keys.size else contrib[:0]
    for n in range(len(b) - 1):
        row = keys[b[n]]
        if n == 0:
            fixups.append((row, sums[0]))
        else:
            out[row, cols] += sums[n]
            phase_ops[0] += 1
    return sums


def _apply_fixups(out, slots, counters: Optional[ConvCounters]):
    """``slots`` in (phase, warp) order: ``(cols, [(row, partial), ...])``."""
    ops = words = 0
    for cols, entries in slots:
        for row, part in entries:
            out[row, cols] += part
            ops += 1
            words += part.size
    if counters is not None:
        counters.add(fixup_slots=ops, node_store_ops=ops, node_store_words=words)


# -- forward ----------------------------------------------------------------------------

def conv_forward(p: ValidatedProblem, s: Optional[Schedule], g: GraphCSR, node_x, edge_y, edge_w,
                 mode: str = "deterministic", *, workers=None, counters: Optional[ConvCounters] = None):
    """``(|V|, dim_z)`` node outputs.  ``mode`` is ``deterministic`` or ``atomic``."""
    if mode not in ("deterministic", "atomic"):
        raise ValueError(f"unknown mode {mode!r}")
    s, prog = engine.prepare(p, s)
    x, y, w, dt = _check_inputs(p, g, node_x, edge_y, edge_w)
    if mode == "deterministic" and not g.is_sorted():
        raise UnsortedEdgesError("deterministic mode needs edges sorted by (row, col)")
    z = np.zeros((g.node_count, p.dim_z), dt)
    xcols = _phase_x_columns(s)
    warps = _warps(g.edge_count)
    locks = [threading.Lock() for _ in range(N_LOCKS)]
    fixup_slots = []

    for n, ph in enumerate(s.phases):
        zcols = [np.arange(rg[1], rg[1] + rg[2]) for rg in ph.z_ranges]
        allz = np.concatenate(zcols) if zcols else np.zeros(0, np.int64)
        xc = xcols[n]
        ph_words = sum(rg[2] for rg in ph.loads if rg[0] in "yw")

        def warp(e0, e1):
            t = g.cols[e0:e1]
            xg = np.zeros((e1 - e0, p.dim_x), dt)
            xg[:, xc] = x[np.ix_(t, xc)]
            parts = engine.phase_forward(prog, n, xg, y[e0:e1], w[e0:e1])
            contrib = np.concatenate([parts[(rg[1], rg[2])] for rg in ph.z_ranges], axis=1) \
                if ph.z_ranges else np.zeros((e1 - e0, 0), dt)
            ops = [0]
            fix = []
            if mode == "deterministic":
                _reduce_warp(g.rows[e0:e1], contrib, z, allz, fix, counters, ops)
            else:
                for i, row in enumerate(g.rows[e0:e1]):
                    with locks[row % N_LOCKS]:
                        z[row, allz] += contrib[i]
                ops[0] = e1 - e0
            if counters is not None:
                counters.add(node_reads=(e1 - e0) * xc.size, edge_reads=(e1 - e0) * ph_words,
                             node_store_ops=ops[0], node_store_words=ops[0] * allz.size)
            return ops[0], fix

        results = _run(warp, warps, workers)
        fixup_slots.append((allz, [f for _, fix in results for f in fix]))
        if counters is not None:
            counters.per_phase_store_ops.append(sum(o for o, _ in results) + len(fixup_slots[-1][1]))
    _apply_fixups(z, fixup_slots, counters)
    return z


def conv_forward_unfused(p: ValidatedProblem, s: Optional[Schedule], g: GraphCSR, node_x, edge_y, edge_w,
                         *, workers=None, counters: Optional[ConvCounters] = None):
    """Reference: duplicate node features per edge, batched TP, scatter-sum by row."""
    x, y, w, dt = _check_inputs(p, g, node_x, edge_y, edge_w)
    xe = x[g.cols]
    ze = engine.tp_forward(p, s, (xe, y, w), workers=workers)
    z = np.zeros((g.node_count, p.dim_z), dt)
    np.add.at(z, g.rows, ze)
    if counters is not None:
        E = g.edge_count
        counters.add(node_reads=E * p.dim_x, dup_words=E * p.dim_x,
                     edge_reads=E * (p.dim_y + p.total_weights),
                     node_store_ops=E, node_store_words=E * p.dim_z)
        counters.per_phase_store_ops.append(E)
    return z


# -- backward ---------------------------------------------------------------------------

def conv_backward(p: ValidatedProblem, s: Optional[Schedule], g: GraphCSR, perm, node_x, edge_y, edge_w,
                  g_node_z, mode: str = "deterministic", *, workers=None,
                  counters: Optional[ConvCounters] = None):
    """``(g_node_x, g_edge_y, g_edge_w)``.

    Deterministic mode walks the edges in transposed-CSR order given by
    ``perm`` so that ``g_node_x`` can be reduced per neighbour with the same
    warp/fixup scheme as the forward pass.
    """
    if mode not in ("deterministic", "atomic"):
        raise ValueError(f"unknown mode {mode!r}")
    s, prog = engine.prepare(p, s)
    x, y, w, dt = _check_inputs(p, g, node_x, edge_y, edge_w)
    gz = np.ascontiguousarray(g_node_z, dtype=dt)
    if gz.shape != (g.node_count, p.dim_z):
        raise ValueError(f"g_node_z has shape {gz.shape}, expected {(g.node_count, p.dim_z)}")
    E = g.edge_count
    if mode == "deterministic":
        if not g.is_sorted():
            raise UnsortedEdgesError("deterministic mode needs edges sorted by (row, col)")
        perm = np.asarray(perm, dtype=np.int64)
        if perm.shape != (E,) or not np.array_equal(np.sort(perm), np.arange(E)):
            raise ValueError("perm is not a permutation of the edge indices")
        order = np.empty(E, np.int64)
        order[perm] = np.arange(E)
        if E and not np.all(np.diff(g.cols[order]) >= 0):
            raise ValueError("perm does not put the edges in transposed CSR order")
    else:
        order = np.arange(E)

    gx = np.zeros((g.node_count, p.dim_x), dt)
    gy = np.zeros((E, p.dim_y), dt)
    gw = np.zeros((E, p.total_weights), dt)
    allx = np.arange(p.dim_x)
    locks = [threading.Lock() for _ in range(N_LOCKS)]

    def warp(q0, q1):
        idx = order[q0:q1]
        t, srow = g.cols[idx], g.rows[idx]
        nb = q1 - q0
        gxe = np.zeros((nb, p.dim_x), dt)
        gye = np.zeros((nb, p.dim_y), dt)
        gwe = np.zeros((nb, p.total_weights), dt)
        engine.backward_rows(prog, x[t], y[idx], w[idx], gz[srow], gxe, gye, gwe)
        gy[idx] = gye
        gw[idx] = gwe
        ops = [0]
        fix = []
        if mode == "deterministic":
            _reduce_warp(t, gxe, gx, allx, fix, counters, ops)
        else:
            for i, node in enumerate(t):
                with locks[node % N_LOCKS]:
                    gx[node] += gxe[i]
            ops[0] = nb
        if counters is not None:
            counters.add(node_reads=nb * (p.dim_x + p.dim_z), edge_reads=nb * (p.dim_y + p.total_weights),
                         node_store_ops=ops[0], node_store_words=ops[0] * p.dim_x)
        return fix

    results = _run(warp, _warps(E), workers)
    _apply_fixups(gx, [(allx, [f for fix in results for f in fix])], counters)
    return gx, gy, gw


def conv_backward_unfused(p: ValidatedProblem, s: Optional[Schedule], g: GraphCSR, node_x, edge_y, edge_w,
                          g_node_z, *, workers=None):
    """Reference gradients by composing gather, batched backward and scatter."""
    x, y, w, dt = _check_inputs(p, g, node_x, edge_y, edge_w)
    gz = np.asarray(g_node_z, dtype=dt)
    gxe, gy, gw = engine.tp_backward(p, s, (x[g.cols], y, w), gz[g.rows], workers=workers)
    gx = np.zeros((g.node_count, p.dim_x), dt)
    np.add.at(gx, g.cols, gxe)
    return gx, gy, gw
