"""O(3) irreps: parsing, dimensions and real Wigner-D representation matrices.

Conventions used throughout the package:

* Rotations are intrinsic ZYZ Euler angles, ``R = Rz(alpha) @ Ry(beta) @ Rz(gamma)``.
  An improper rotation is ``-R`` (inversion composed with ``R``).
* The complex Wigner matrix is ``D[m', m] = exp(-i m' alpha) d[m', m](beta) exp(-i m gamma)``
  with rows/columns ordered ``m = -l .. l``.
* Real components are ordered ``m = -l .. l`` as well, and are related to the
  complex (Condon-Shortley) components by :func:`real_basis_matrix`.
* Under inversion a block of parity ``e`` is unchanged and a block of parity
  ``o`` changes sign, independently of ``l``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from math import factorial
from typing import Iterator, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation as _SciRotation

LMAX_EXACT = 12

# exact integer factorials up to 4*LMAX_EXACT+1, converted to float once
_FACT_INT = [factorial(n) for n in range(4 * LMAX_EXACT + 2)]
_FACT = np.array([float(f) for f in _FACT_INT])


class IrrepsParseError(ValueError):
    """Raised for a malformed irreps string; ``token`` is the offending piece."""

    def __init__(self, token: str, reason: str):
        self.token = token
        self.reason = reason
        super().__init__(f"invalid irreps token {token!r}: {reason}")


@dataclass(frozen=True, order=True)
class Irrep:
    l: int
    p: int  # +1 even, -1 odd

    def __post_init__(self):
        if not isinstance(self.l, (int, np.integer)) or self.l < 0:
            raise ValueError(f"l must be a non-negative integer, got {self.l!r}")
        if self.p not in (1, -1):
            raise ValueError(f"parity must be +1 or -1, got {self.p!r}")

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    @property
    def parity(self) -> str:
        return "e" if self.p == 1 else "o"

    def __mul__(self, other: "Irrep") -> Iterator["Irrep"]:
        """Irreps appearing in the product ``self x other``."""
        p = self.p * other.p
        for l in range(abs(self.l - other.l), self.l + other.l + 1):
            yield Irrep(l, p)

    def __str__(self):
        return f"{self.l}{self.parity}"


@dataclass(frozen=True)
class MulIrrep:
    mul: int
    ir: Irrep

    @property
    def dim(self) -> int:
        return self.mul * self.ir.dim

    def __str__(self):
        return f"{self.mul}x{self.ir}"


_TOKEN = re.compile(r"^(\d+)x(-?\d+)([eo])$")


class Irreps(tuple):
    """Ordered list of ``(mul, Irrep)`` blocks; also the segmentation of a feature vector.

    >>> Irreps.parse("3x1e + 1x2o").dim
    14
    >>> str(Irreps.parse("32x2e+32x1e"))
    '32x2e + 32x1e'
    """

    def __new__(cls, blocks: Union[str, Sequence] = ()):
        if isinstance(blocks, str):
            return parse_irreps(blocks)
        items = []
        for b in blocks:
            if isinstance(b, MulIrrep):
                items.append(b)
            else:
                mul, l, p = b
                if isinstance(p, str):
                    p = {"e": 1, "o": -1}[p]
                if mul <= 0:
                    raise ValueError(f"multiplicity must be positive, got {mul}")
                items.append(MulIrrep(int(mul), Irrep(int(l), int(p))))
        return super().__new__(cls, items)

    @classmethod
    def parse(cls, text: str) -> "Irreps":
        return parse_irreps(text)

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self)

    @property
    def offsets(self) -> list[int]:
        """Start offset of every segment; one extra trailing entry equal to ``dim``."""
        out = [0]
        for b in self:
            out.append(out[-1] + b.dim)
        return out

    @property
    def lmax(self) -> int:
        return max((b.ir.l for b in self), default=0)

    def __str__(self):
        return " + ".join(str(b) for b in self)

    def __repr__(self):
        return f"Irreps({str(self)!r})"


def parse_irreps(text: str) -> Irreps:
    """Parse ``"<mul>x<l><e|o> + ..."``.

    Blocks keep their textual order and are never merged. The empty string
    parses to the empty representation.
    """
    if not text.strip():
        return tuple.__new__(Irreps, ())
    blocks = []
    for raw in text.split("+"):
        token = raw.strip()
        m = _TOKEN.match(token)
        if m is None:
            raise IrrepsParseError(token, "expected <mult>x<l><e|o>")
        mul, l, p = int(m.group(1)), int(m.group(2)), m.group(3)
        if mul == 0:
            raise IrrepsParseError(token, "multiplicity must be positive")
        if l < 0:
            raise IrrepsParseError(token, "l must be non-negative")
        blocks.append(MulIrrep(mul, Irrep(l, 1 if p == "e" else -1)))
    return tuple.__new__(Irreps, blocks)


def irreps_dim(ir: Irreps) -> int:
    return sum(b.mul * (2 * b.ir.l + 1) for b in ir)


@dataclass(frozen=True)
class Rotation:
    """Element of O(3) as intrinsic ZYZ Euler angles plus an inversion flag."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    improper: bool = False

    def matrix(self) -> np.ndarray:
        R = _SciRotation.from_euler("ZYZ", [self.alpha, self.beta, self.gamma]).as_matrix()
        return -R if self.improper else R

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "Rotation":
        R = np.asarray(R, dtype=float)
        improper = bool(np.linalg.det(R) < 0)
        if improper:
            R = -R
        return cls(*_zyz_angles(R), improper)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return compose(self, other)

    def inverse(self) -> "Rotation":
        return Rotation.from_matrix(self.matrix().T)

    @classmethod
    def random(cls, rng: np.random.Generator, improper: bool | None = None) -> "Rotation":
        R = _SciRotation.random(random_state=rng).as_matrix()
        if improper is None:
            improper = bool(rng.integers(2))
        g = cls.from_matrix(R)
        return cls(g.alpha, g.beta, g.gamma, improper)


def _zyz_angles(R: np.ndarray) -> tuple[float, float, float]:
    """Angles with ``R = Rz(a) Ry(b) Rz(g)``.

    ``a`` comes from the third column; ``b`` and ``g`` are then read off
    ``Rz(-a) R = Ry(b) Rz(g)``, which stays accurate for ``b`` near 0 or pi.
    """
    a = float(np.arctan2(R[1, 2], R[0, 2])) if np.hypot(R[0, 2], R[1, 2]) > 0 else 0.0
    c, s = np.cos(a), np.sin(a)
    M = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    b = float(np.arctan2(M[0, 2], M[2, 2]))
    g = float(np.arctan2(M[1, 0], M[1, 1]))
    return a, b, g


def compose(g1: Rotation, g2: Rotation) -> Rotation:
    """Group product ``g1 * g2`` (apply ``g2`` first)."""
    return Rotation.from_matrix(g1.matrix() @ g2.matrix())


def real_basis_matrix(l: int) -> np.ndarray:
    """Unitary ``U`` with ``real = U @ complex`` for degree-``l`` components.

    Row ``m`` (ordered ``-l..l``) is

    * ``m < 0``: ``i/sqrt2 * (Y_m - (-1)^m Y_{-m})``
    * ``m = 0``: ``Y_0``
    * ``m > 0``: ``1/sqrt2 * (Y_{-m} + (-1)^m Y_m)``
    """
    n = 2 * l + 1
    U = np.zeros((n, n), dtype=complex)
    s = 1 / np.sqrt(2)
    for m in range(-l, l + 1):
        r = m + l
        if m < 0:
            U[r, m + l] = 1j * s
            U[r, -m + l] = -1j * s * (-1) ** m
        elif m == 0:
            U[r, l] = 1.0
        else:
            U[r, -m + l] = s
            U[r, m + l] = s * (-1) ** m
    return U


def wigner_small_d(l: int, beta: float) -> np.ndarray:
    """Wigner small-d matrix ``d[m', m](beta)`` via the explicit factorial sum."""
    if l > LMAX_EXACT:
        raise ValueError(f"l={l} exceeds supported maximum {LMAX_EXACT}")
    n = 2 * l + 1
    c, s = np.cos(beta / 2), np.sin(beta / 2)
    d = np.zeros((n, n))
    F = _FACT
    for mp in range(-l, l + 1):
        for m in range(-l, l + 1):
            pref = np.sqrt(F[l + mp] * F[l - mp] * F[l + m] * F[l - m])
            total = 0.0
            for k in range(max(0, m - mp), min(l + m, l - mp) + 1):
                den = F[l + m - k] * F[k] * F[mp - m + k] * F[l - mp - k]
                total += (
                    (-1) ** (mp - m + k)
                    * c ** (2 * l + m - mp - 2 * k)
                    * s ** (mp - m + 2 * k)
                    / den
                )
            d[mp + l, m + l] = pref * total
    return d


def wigner_D_complex(l: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    m = np.arange(-l, l + 1)
    return np.exp(-1j * m * alpha)[:, None] * wigner_small_d(l, beta) * np.exp(-1j * m * gamma)[None, :]


def wigner_D(l: int, g: Rotation) -> np.ndarray:
    """Real Wigner-D for the proper part of ``g``."""
    U = real_basis_matrix(l)
    D = U @ wigner_D_complex(l, g.alpha, g.beta, g.gamma) @ U.conj().T
    residue = np.abs(D.imag).max()
    if residue > 1e-12:
        raise ArithmeticError(f"real Wigner-D has imaginary residue {residue:.3g} at l={l}")
    return np.ascontiguousarray(D.real)


def rep_matrix(ir: Irreps, g: Rotation) -> np.ndarray:
    """Block-diagonal representation matrix of ``g`` acting on an ``ir``-shaped vector."""
    n = irreps_dim(ir)
    out = np.zeros((n, n))
    cache: dict[int, np.ndarray] = {}
    pos = 0
    for b in ir:
        l = b.ir.l
        if l not in cache:
            cache[l] = wigner_D(l, g)
        D = cache[l]
        if g.improper and b.ir.p == -1:
            D = -D
        d = 2 * l + 1
        for _ in range(b.mul):
            out[pos:pos + d, pos:pos + d] = D
            pos += d
    return out
