"""Correctness suites shared by ``cgforge verify`` and the demos.

Each suite returns a :class:`SuiteResult` with the worst relative error it saw
and the tolerance it was held to.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine, oracle
from .cg import CGBlock
from .irreps import Rotation, rep_matrix
from .scheduler import BudgetError, build_schedule, split_multiplicities, working_set
from .tpspec import ValidatedProblem


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status} {self.name:<18} max_err={self.max_error:.3e} tol={self.tolerance:.0e}{extra}"


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.abs(b).max() if b.size else 0.0
    diff = np.abs(a - b).max() if a.size else 0.0
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def unit_rms(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Standard normal entries rescaled to unit root-mean-square."""
    a = rng.standard_normal(shape)
    if a.size:
        rms = np.sqrt(np.mean(a * a))
        if rms > 0:
            a /= rms
    return a.astype(dtype)


def random_batch(p: ValidatedProblem, rows: int, rng: np.random.Generator, dtype=np.float64):
    return (unit_rms(rng, (rows, p.dim_x), dtype), unit_rms(rng, (rows, p.dim_y), dtype),
            unit_rms(rng, (rows, p.total_weights), dtype))


def reference_forward(p: ValidatedProblem, x, y, w):
    try:
        return oracle.dense_forward(p, x, y, w)
    except MemoryError:
        return oracle.loop_forward(p, x, y, w)


def corrupt_cg(p: ValidatedProblem, factor: float = 1.1) -> ValidatedProblem:
    """Copy of ``p`` whose first CG block has one coefficient scaled (negative control)."""
    r = p.resolved[0]
    i, j, k, v = r.block.entries[0]
    blk = CGBlock(r.block.l1, r.block.l2, r.block.l3, ((i, j, k, v * factor),) + r.block.entries[1:])
    resolved = tuple(replace(q, block=blk) if (q.l1, q.l2, q.l3) == (r.l1, r.l2, r.l3) else q
                     for q in p.resolved)
    return replace(p, resolved=resolved)


def _schedules(p: ValidatedProblem):
    """Single-phase plus tighter-budget schedules that are feasible for ``p``."""
    sp = split_multiplicities(p)
    floor = max((working_set(r) for r in sp.resolved), default=1)
    out = [build_schedule(p, 10**9)]
    for budget in (p.dim_x + p.dim_y + floor, floor):
        for strategy in ("stream_z", "greedy"):
            try:
                out.append(build_schedule(p, max(budget, floor), strategy=strategy))
            except (BudgetError, ValueError):
                pass
    return out


def suite_oracle(p, rows, rng, dtype=np.float64) -> SuiteResult:
    x, y, w = random_batch(p, rows, rng)
    ref = reference_forward(p, x, y, w)
    z = engine.tp_forward(p, None, (x.astype(dtype), y.astype(dtype), w.astype(dtype)))
    tol = 1e-13 if dtype == np.float64 else 1e-4
    return SuiteResult("oracle", rel_err(z, ref), tol)


def suite_equivariance(p, rows, rng, trials=4) -> SuiteResult:
    worst = 0.0
    for n in range(trials):
        g = Rotation.random(rng, improper=bool(n % 2))
        x, y, w = random_batch(p, rows, rng)
        Dx, Dy, Dz = (rep_matrix(ir, g) for ir in (p.x_ir, p.y_ir, p.z_ir))
        lhs = engine.tp_forward(p, None, (x @ Dx.T, y @ Dy.T, w))
        rhs = engine.tp_forward(p, None, (x, y, w)) @ Dz.T
        worst = max(worst, rel_err(lhs, rhs))
    return SuiteResult("equivariance", worst, 1e-10)


def suite_gradient(p, rows, rng, h=1e-5, probes=6) -> list[SuiteResult]:
    x, y, w = random_batch(p, rows, rng)
    gz = unit_rms(rng, (rows, p.dim_z))
    gx, gy, gw = engine.tp_backward(p, None, (x, y, w), gz)
    try:
        ref = oracle.dense_backward(p, x, y, w, gz)
        analytic = max(rel_err(a, b) for a, b in zip((gx, gy, gw), ref))
    except MemoryError:
        analytic = 0.0
    flat = np.concatenate([x.ravel(), y.ravel(), w.ravel()])
    nx, ny = x.size, y.size

    def loss(v):
        xx = v[:nx].reshape(x.shape)
        yy = v[nx:nx + ny].reshape(y.shape)
        ww = v[nx + ny:].reshape(w.shape)
        return np.sum(gz * engine.tp_forward(p, None, (xx, yy, ww)))

    dirs = unit_rms(rng, (probes, flat.size))
    fd = oracle.fd_gradient(loss, flat, h, dirs)[0]
    an = dirs @ np.concatenate([gx.ravel(), gy.ravel(), gw.ravel()])
    return [SuiteResult("gradient_fd", rel_err(an, fd), 1e-6),
            SuiteResult("gradient_dense", analytic, 1e-12)]


def suite_double_backward(p, rows, rng, h=1e-5) -> list[SuiteResult]:
    x, y, w = random_batch(p, rows, rng)
    gz = unit_rms(rng, (rows, p.dim_z))
    da, db, dC = random_batch(p, rows, rng)
    fused = engine.tp_double_backward(p, None, (x, y, w), gz, da, db, dC)
    seven = engine.tp_double_backward(p, None, (x, y, w), gz, da, db, dC, fused=False)
    agree = max(rel_err(a, b) for a, b in zip(fused, seven))

    # L = <da, a> + <db, b> + <dC, C> with (a, b, C) = backward(x, y, W, gz)
    def L(x_, y_, w_, gz_):
        a, b, c = engine.tp_backward(p, None, (x_, y_, w_), gz_)
        return np.sum(da * a) + np.sum(db * b) + np.sum(dC * c)

    worst = 0.0
    for n, (arr, grad) in enumerate(zip((x, y, w, gz), fused)):
        e = unit_rms(rng, arr.shape)
        args = [x, y, w, gz]

        def f(t, n=n, e=e):
            a = list(args)
            a[n] = arr + t[0] * e
            return L(*a)

        fd = oracle.fd_gradient(f, np.zeros(1), h)[0, 0]
        worst = max(worst, rel_err(np.sum(grad * e), fd))
    return [SuiteResult("double_bwd_fused", agree, 1e-13),
            SuiteResult("double_bwd_fd", worst, 1e-5)]


def suite_schedules(p, rows, rng) -> SuiteResult:
    x, y, w = random_batch(p, rows, rng)
    scheds = _schedules(p)
    outs = [engine.tp_forward(p, s, (x, y, w)) for s in scheds]
    worst = max((rel_err(o, outs[0]) for o in outs[1:]), default=0.0)
    names = ",".join(sorted({s.strategy for s in scheds}))
    return SuiteResult("schedules", worst, 1e-13, f"{len(scheds)} schedules: {names}")


def suite_determinism(p, rows, rng) -> SuiteResult:
    rows = max(rows, 2 * engine.ROW_BLOCK + 7)  # span several row blocks
    x, y, w = random_batch(p, rows, rng)
    gz = unit_rms(rng, (rows, p.dim_z))
    worst = 0.0
    base_f = engine.tp_forward(p, None, (x, y, w), workers=1)
    base_b = engine.tp_backward(p, None, (x, y, w), gz, workers=1)
    for k in (2, 8):
        f = engine.tp_forward(p, None, (x, y, w), workers=k)
        b = engine.tp_backward(p, None, (x, y, w), gz, workers=k)
        same = np.array_equal(f, base_f) and all(np.array_equal(u, v) for u, v in zip(b, base_b))
        worst = max(worst, 0.0 if same else 1.0)
    return SuiteResult("determinism", worst, 0.0, "bitwise, workers 1/2/8")


def run_all(p: ValidatedProblem, rows: int = 8, seed: int = 0, dtype=np.float64, engine_problem=None):
    """Every suite.  ``engine_problem`` (e.g. a corrupted copy) replaces ``p`` for the engine."""
    q = engine_problem or p
    rng = np.random.default_rng(seed)
    results = [suite_oracle(q, rows, rng, dtype)]
    results.append(suite_equivariance(q, rows, rng))
    results += suite_gradient(q, rows, rng)
    results += suite_double_backward(q, rows, rng)
    results.append(suite_schedules(q, rows, rng))
    results.append(suite_determinism(q, rows, rng))
    return results

