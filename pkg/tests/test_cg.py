import threading
from math import sqrt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sympy.physics.quantum.cg import CG as SymCG

from cgforge.cg import (
    CGBlock, TriangleError, block_sparsity, cg_block, complex_cg, complex_cg_tensor, iter_triples,
)
from cgforge.irreps import Rotation, real_basis_matrix, wigner_D

TRIPLES = list(iter_triples(4))


def sympy_cg(l1, l2, l3, m1, m2, m3):
    return float(SymCG(l1, m1, l2, m2, l3, m3).doit())


# -- complex coefficients --------------------------------------------------------

def test_complex_scalar():
    assert complex_cg(0, 0, 0, 0, 0, 0) == 1.0


def test_complex_selection_rule():
    assert complex_cg(1, 1, 1, 1, 0, 0) == 0.0


def test_complex_stretched_state():
    assert complex_cg(1, 1, 2, 1, 1, 2) == 1.0


@pytest.mark.parametrize("args", [(1, 1, 3, 0, 0, 0), (1, 1, 1, 2, 0, 2), (0, 0, 0, 1, 0, 1)])
def test_complex_preconditions(args):
    with pytest.raises(ValueError):
        complex_cg(*args)


@settings(max_examples=60)
@given(st.sampled_from(TRIPLES), st.data())
def test_complex_matches_sympy(triple, data):
    l1, l2, l3 = triple
    m1 = data.draw(st.integers(-l1, l1))
    m2 = data.draw(st.integers(-l2, l2))
    m3 = m1 + m2
    if abs(m3) > l3:
        m3 = data.draw(st.integers(-l3, l3))
    assert complex_cg(l1, l2, l3, m1, m2, m3) == pytest.approx(sympy_cg(l1, l2, l3, m1, m2, m3), abs=1e-14)


def test_complex_tensor_unitary_columns():
    # sum over m1, m2 of <l1 m1 l2 m2 | l3 m3><l1 m1 l2 m2 | l3 m3'> = delta
    for l1, l2, l3 in TRIPLES:
        C = complex_cg_tensor(l1, l2, l3).reshape(-1, 2 * l3 + 1)
        assert np.abs(C.T @ C - np.eye(2 * l3 + 1)).max() < 1e-13


# -- real blocks ---------------------------------------------------------------------

def test_block_000():
    assert cg_block(0, 0, 0).entries == ((0, 0, 0, 1.0),)


def test_block_110():
    b = cg_block(1, 1, 0)
    assert [(i, j, k) for i, j, k, _ in b.entries] == [(0, 0, 0), (1, 1, 0), (2, 2, 0)]
    # overall sign is fixed by the phase convention; all three entries share it
    assert all(v == pytest.approx(1 / sqrt(3), abs=1e-15) for *_, v in b.entries)


def test_block_111_is_levi_civita():
    P = cg_block(1, 1, 1).dense()
    assert cg_block(1, 1, 1).nnz == 6
    nz = P[P != 0]
    assert np.allclose(np.abs(nz), 1 / sqrt(2), atol=1e-15)
    assert np.allclose(P, -P.transpose(1, 0, 2), atol=1e-15)


def test_block_shape_235():
    assert cg_block(2, 3, 5).shape == (5, 7, 11)


def test_triangle_error_is_distinct():
    with pytest.raises(TriangleError):
        cg_block(0, 0, 1)
    with pytest.raises(TriangleError):
        cg_block(1, 3, 1)


@pytest.mark.parametrize("triple", TRIPLES)
def test_block_invariants(triple):
    b = cg_block(*triple)
    n1, n2, n3 = b.shape
    keys = [(k, i, j) for i, j, k, _ in b.entries]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)
    assert all(0 <= i < n1 and 0 <= j < n2 and 0 <= k < n3 and v != 0 for i, j, k, v in b.entries)
    assert all(abs(v) > 1e-12 for *_, v in b.entries)
    P = b.dense().reshape(-1, n3)
    assert np.abs(P.T @ P - np.eye(n3)).max() <= 1e-12


@pytest.mark.parametrize("triple", TRIPLES)
def test_largest_entry_positive(triple):
    vals = np.array([v for *_, v in cg_block(*triple).entries])
    first_max = vals[np.flatnonzero(np.abs(vals) >= np.abs(vals).max() * (1 - 1e-9))[0]]
    assert first_max > 0


@settings(max_examples=40)
@given(st.sampled_from(TRIPLES), st.integers(0, 2**32 - 1))
def test_block_equivariance(triple, seed):
    l1, l2, l3 = triple
    g = Rotation.random(np.random.default_rng(seed), improper=False)
    D1, D2, D3 = (wigner_D(l, g) for l in triple)
    P = cg_block(*triple).dense()
    # P(D1 x, D2 y) = D3 P(x, y) for all x, y
    lhs = np.einsum("ai,bj,abk->ijk", D1, D2, P)
    rhs = np.einsum("ijc,kc->ijk", P, D3)
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_real_block_against_independent_basis_change():
    # rebuild (2,1,2) from sympy coefficients and the basis matrices, up to the global sign
    l1, l2, l3 = 2, 1, 2
    C = np.zeros((5, 3, 5))
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            if abs(m1 + m2) <= l3:
                C[m1 + l1, m2 + l2, m1 + m2 + l3] = sympy_cg(l1, l2, l3, m1, m2, m1 + m2)
    U1, U2, U3 = (real_basis_matrix(l) for l in (l1, l2, l3))
    P = np.einsum("ia,jb,kc,abc->ijk", U1.conj(), U2.conj(), U3, C)
    P = P / P.flat[np.argmax(np.abs(P))] * np.abs(P).max()
    P = P.real / np.sqrt((P.real ** 2).sum(axis=(0, 1)))[None, None, :]
    mine = cg_block(l1, l2, l3).dense()
    assert min(np.abs(mine - P).max(), np.abs(mine + P).max()) < 1e-12


def test_sparsity_values():
    assert block_sparsity(cg_block(0, 0, 0)) == 0.0
    assert block_sparsity(cg_block(1, 1, 1)) == pytest.approx(1 - 6 / 27)
    assert block_sparsity(cg_block(4, 4, 4)) > block_sparsity(cg_block(2, 2, 2))


def test_json_round_trip():
    b = cg_block(2, 2, 2)
    assert CGBlock.from_json(b.to_json()) == b


def test_deterministic_and_thread_safe():
    ref = {t: cg_block(*t).entries for t in TRIPLES[:20]}
    seen = []

    def work():
        seen.append({t: cg_block(*t).entries for t in TRIPLES[:20]})

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(s == ref for s in seen)
