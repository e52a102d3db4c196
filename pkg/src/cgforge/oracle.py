"""Independent reference implementations.

Nothing here shares code with the kernel generator or the engine beyond the
problem description and the CG blocks.  Kept deliberately plain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tpspec import ValidatedProblem

MAX_DENSE_ENTRIES = 10**7


@dataclass(frozen=True)
class DenseTP:
    """Materialized coefficient tensor and weight-expansion map.

    ``P`` has shape ``(dim_x, dim_y, K)`` where ``K`` indexes the pre-weight
    outputs ``Z'`` of every instruction (``b' * (2l3+1)`` each).  The expanded
    weight matrix of one batch row is ``Wexp[w_rows, w_cols] = w[w_src]`` with
    shape ``(K, dim_z)``; every other entry is an explicit zero.
    """

    P: np.ndarray
    w_rows: np.ndarray
    w_cols: np.ndarray
    w_src: np.ndarray
    dim_z: int

    @property
    def K(self) -> int:
        return self.P.shape[2]

    @classmethod
    def build(cls, p: ValidatedProblem) -> "DenseTP":
        K = sum(r.x_lanes * r.n3 for r in p.resolved)
        if p.dim_x * p.dim_y * max(K, 1) > MAX_DENSE_ENTRIES:
            raise MemoryError(
                f"dense oracle refused: {p.dim_x}x{p.dim_y}x{K} exceeds {MAX_DENSE_ENTRIES} entries")
        P = np.zeros((p.dim_x, p.dim_y, K))
        rows, cols, src = [], [], []
        k0 = 0
        for r in p.resolved:
            n1, n3 = r.n1, r.n3
            for t in range(r.x_lanes):
                for i, j, k, v in r.block.entries:
                    P[r.x_offset + t * n1 + i, r.y_offset + j, k0 + t * n3 + k] = v
            for k in range(n3):
                if r.kind == "B":
                    for t in range(r.z_lanes):
                        rows.append(k0 + t * n3 + k)
                        cols.append(r.z_offset + t * n3 + k)
                        src.append(r.w_offset + t)
                else:
                    for row in range(r.z_lanes):
                        for c in range(r.x_lanes):
                            rows.append(k0 + c * n3 + k)
                            cols.append(r.z_offset + row * n3 + k)
                            src.append(r.w_offset + row * r.w_row_stride + c)
            k0 += r.x_lanes * n3
        as_int = lambda a: np.asarray(a, dtype=np.int64)
        return cls(P, as_int(rows), as_int(cols), as_int(src), p.dim_z)

    def expand_weights(self, w: np.ndarray) -> np.ndarray:
        W = np.zeros((self.K, self.dim_z), dtype=w.dtype)
        W[self.w_rows, self.w_cols] = w[self.w_src]
        return W

    def flops_per_row(self) -> int:
        """Multiply-adds of the dense evaluation: outer product, contraction, weights."""
        nx, ny, K = self.P.shape
        return nx * ny + 2 * nx * ny * K + 2 * K * self.dim_z


def _rows(a):
    a = np.asarray(a)
    return a[None, :] if a.ndim == 1 else a


def dense_forward(p: ValidatedProblem, x, y, w, dense: DenseTP | None = None) -> np.ndarray:
    """``einsum("ijk,i,j,kl->l", P, x, y, Wexp)`` row by row."""
    d = dense or DenseTP.build(p)
    x, y, w = _rows(x), _rows(y), _rows(w)
    _check(p, x, y, w)
    P2 = d.P.reshape(p.dim_x * p.dim_y, d.K)
    out = np.zeros((x.shape[0], p.dim_z), dtype=np.result_type(x, y, w))
    for b in range(x.shape[0]):
        u = np.outer(x[b], y[b]).reshape(-1)
        out[b] = (u @ P2) @ d.expand_weights(w[b])
    return out


def dense_backward(p: ValidatedProblem, x, y, w, gz, dense: DenseTP | None = None):
    """Analytic gradients ``(gx, gy, gw)`` of ``<gz, TP(x, y, w)>``."""
    d = dense or DenseTP.build(p)
    x, y, w, gz = _rows(x), _rows(y), _rows(w), _rows(gz)
    _check(p, x, y, w)
    gx = np.zeros_like(x, dtype=float)
    gy = np.zeros_like(y, dtype=float)
    gw = np.zeros_like(w, dtype=float)
    for b in range(x.shape[0]):
        Wexp = d.expand_weights(w[b])
        gzp = Wexp @ gz[b]  # gradient wrt the pre-weight outputs
        gx[b] = np.einsum("ijk,j,k->i", d.P, y[b], gzp)
        gy[b] = np.einsum("ijk,i,k->j", d.P, x[b], gzp)
        t = np.einsum("ijk,i,j->k", d.P, x[b], y[b])
        gw[b] = np.bincount(d.w_src, weights=t[d.w_rows] * gz[b][d.w_cols], minlength=p.total_weights)
    return gx, gy, gw


def loop_forward(p: ValidatedProblem, x, y, w) -> np.ndarray:
    """Second reference: explicit loops over instructions, lanes and coefficients."""
    x, y, w = _rows(x), _rows(y), _rows(w)
    _check(p, x, y, w)
    out = np.zeros((x.shape[0], p.dim_z))
    for b in range(x.shape[0]):
        for r in p.resolved:
            zp = np.zeros((r.x_lanes, r.n3))
            for t in range(r.x_lanes):
                for i, j, k, v in r.block.entries:
                    zp[t, k] += v * x[b, r.x_offset + t * r.n1 + i] * y[b, r.y_offset + j]
            for row in range(r.z_lanes):
                for k in range(r.n3):
                    if r.kind == "B":
                        acc = w[b, r.w_offset + row] * zp[row, k]
                    else:
                        acc = 0.0
                        for c in range(r.x_lanes):
                            acc += w[b, r.w_offset + row * r.w_row_stride + c] * zp[c, k]
                    out[b, r.z_offset + row * r.n3 + k] += acc
    return out


def fd_gradient(f, point, h: float = 1e-5, directions=None) -> np.ndarray:
    """Central differences ``(f(p + h e) - f(p - h e)) / 2h``.

    ``directions`` defaults to the coordinate axes, giving the full Jacobian
    with one column per direction.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    if directions is None:
        directions = np.eye(point.size).reshape((point.size,) + point.shape)
    cols = []
    for e in directions:
        fp = np.asarray(f(point + h * e), dtype=float)
        fm = np.asarray(f(point - h * e), dtype=float)
        cols.append(((fp - fm) / (2 * h)).reshape(-1))
    return np.stack(cols, axis=1)


def _check(p, x, y, w):
    if x.shape[1] != p.dim_x or y.shape[1] != p.dim_y or w.shape[1] != p.total_weights:
        raise ValueError(
            f"shape mismatch: x{x.shape} y{y.shape} w{w.shape} for dims "
            f"({p.dim_x}, {p.dim_y}, {p.total_weights})")
    if not (x.shape[0] == y.shape[0] == w.shape[0]):
        raise ValueError("x, y and w must have the same number of rows")
