"""Real Clebsch-Gordan coefficient blocks.

``cg_block(l1, l2, l3)`` returns the sparse real tensor ``P`` of shape
``(2l1+1, 2l2+1, 2l3+1)`` such that ``z[k] = sum_ij P[i,j,k] x[i] y[j]`` is
equivariant when ``x, y, z`` transform with the real Wigner matrices of
:mod:`cgforge.irreps`.  Normalization: the ``2l3+1`` slices ``P[:, :, k]`` are
orthonormal.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from fractions import Fraction
from math import factorial, sqrt
from typing import Iterable

import numpy as np

from .irreps import real_basis_matrix

ZERO_TOL = 1e-12


class TriangleError(ValueError):
    def __init__(self, l1: int, l2: int, l3: int):
        self.ls = (l1, l2, l3)
        super().__init__(f"triangle rule violated for ({l1}, {l2}, {l3}): need |l1-l2| <= l3 <= l1+l2")


def triangle_ok(l1: int, l2: int, l3: int) -> bool:
    return min(l1, l2, l3) >= 0 and abs(l1 - l2) <= l3 <= l1 + l2


def complex_cg(l1: int, l2: int, l3: int, m1: int, m2: int, m3: int) -> float:
    """``<l1 m1 l2 m2 | l3 m3>`` (Condon-Shortley), evaluated exactly by Racah's formula."""
    if not triangle_ok(l1, l2, l3):
        raise TriangleError(l1, l2, l3)
    if abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        raise ValueError(f"|m| exceeds l in ({l1},{m1}), ({l2},{m2}), ({l3},{m3})")
    if m1 + m2 != m3:
        return 0.0
    f = factorial
    pref = Fraction(
        (2 * l3 + 1) * f(l3 + l1 - l2) * f(l3 - l1 + l2) * f(l1 + l2 - l3),
        f(l1 + l2 + l3 + 1),
    ) * (f(l3 + m3) * f(l3 - m3) * f(l1 - m1) * f(l1 + m1) * f(l2 - m2) * f(l2 + m2))
    total = Fraction(0)
    kmin = max(0, l2 - l3 - m1, l1 - l3 + m2)
    kmax = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    for k in range(kmin, kmax + 1):
        den = (
            f(k) * f(l1 + l2 - l3 - k) * f(l1 - m1 - k) * f(l2 + m2 - k)
            * f(l3 - l2 + m1 + k) * f(l3 - l1 - m2 + k)
        )
        total += Fraction((-1) ** k, den)
    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * sqrt(pref * total * total)


def complex_cg_tensor(l1: int, l2: int, l3: int) -> np.ndarray:
    C = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                C[m1 + l1, m2 + l2, m3 + l3] = complex_cg(l1, l2, l3, m1, m2, m3)
    return C


@dataclass(frozen=True)
class CGBlock:
    """Nonzero coefficients of one ``(l1, l2, l3)`` block, sorted by ``(k, i, j)``."""

    l1: int
    l2: int
    l3: int
    entries: tuple[tuple[int, int, int, float], ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2 * self.l1 + 1, 2 * self.l2 + 1, 2 * self.l3 + 1)

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def dense(self) -> np.ndarray:
        P = np.zeros(self.shape)
        for i, j, k, v in self.entries:
            P[i, j, k] = v
        return P

    def to_json(self) -> str:
        return json.dumps(
            {"l1": self.l1, "l2": self.l2, "l3": self.l3,
             "entries": [[i, j, k, v] for i, j, k, v in self.entries]}
        )

    @classmethod
    def from_json(cls, text: str) -> "CGBlock":
        d = json.loads(text)
        return cls(d["l1"], d["l2"], d["l3"],
                   tuple((int(i), int(j), int(k), float(v)) for i, j, k, v in d["entries"]))


def _real_block(l1: int, l2: int, l3: int) -> CGBlock:
    C = complex_cg_tensor(l1, l2, l3)
    U1, U2, U3 = (real_basis_matrix(l) for l in (l1, l2, l3))
    # z_real = U3 C^T (U1^dag x_real (x) U2^dag y_real)
    P = np.einsum("ia,jb,kc,abc->ijk", U1.conj(), U2.conj(), U3, C)

    order = sorted(np.ndindex(*P.shape), key=lambda t: (t[2], t[0], t[1]))
    mags = np.abs(P)
    peak = mags.max()
    lead = next(t for t in order if mags[t] >= peak * (1 - 1e-9))
    P = P * (abs(P[lead]) / P[lead])
    if np.abs(P.imag).max() > ZERO_TOL:
        raise ArithmeticError(f"CG block ({l1},{l2},{l3}) is not real after phase fixing")
    P = P.real
    P[np.abs(P) <= ZERO_TOL] = 0.0
    norms = np.sqrt((P * P).sum(axis=(0, 1)))
    P = P / norms[None, None, :]

    entries = tuple(
        (int(i), int(j), int(k), float(P[i, j, k])) for i, j, k in order if P[i, j, k] != 0.0
    )
    return CGBlock(l1, l2, l3, entries)


_memo: dict[tuple[int, int, int], CGBlock] = {}
_memo_lock = threading.Lock()


def cg_block(l1: int, l2: int, l3: int) -> CGBlock:
    if not triangle_ok(l1, l2, l3):
        raise TriangleError(l1, l2, l3)
    key = (l1, l2, l3)
    blk = _memo.get(key)
    if blk is None:
        blk = _real_block(l1, l2, l3)
        with _memo_lock:
            blk = _memo.setdefault(key, blk)
    return blk


def block_sparsity(b: CGBlock) -> float:
    n1, n2, n3 = b.shape
    return 1.0 - b.nnz / (n1 * n2 * n3)


def iter_triples(lmax: int) -> Iterable[tuple[int, int, int]]:
    for l1 in range(lmax + 1):
        for l2 in range(lmax + 1):
            for l3 in range(abs(l1 - l2), min(l1 + l2, lmax) + 1):
                yield l1, l2, l3
