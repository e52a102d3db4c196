import numpy as np
import pytest
from hypothesis import given

from cgforge.oracle import DenseTP, dense_backward, dense_forward, fd_gradient, loop_forward
from cgforge.tpspec import validate
from cgforge.verify import random_batch
from problems import problems


def test_scalar_product(scalar_problem):
    z = dense_forward(scalar_problem, [[2.0]], [[3.0]], [[0.5]])
    assert z.tolist() == [[3.0]]


@given(problems())
def test_dense_and_loop_agree(p):
    x, y, w = random_batch(p, 2, np.random.default_rng(0))
    a, b = dense_forward(p, x, y, w), loop_forward(p, x, y, w)
    assert np.abs(a - b).max() <= 1e-14 * np.abs(b).max()


def test_expanded_weight_count(example_problem):
    d = DenseTP.build(example_problem)
    # every weight appears once per output slot it scales
    assert len(d.w_src) == 32 * 11 + 16 * 32 * 5 + 32 * 32 * 7
    assert d.K == 32 * 11 + 32 * 5 + 32 * 7


def test_dense_refuses_huge_problems():
    p = validate("64x4e + 64x4o", "1x4e + 1x3o", "64x4e + 64x4o", [(1, 1, 1, "C"), (2, 2, 1, "C"), (2, 1, 2, "C")])
    with pytest.raises(MemoryError):
        DenseTP.build(p)


def test_fd_exact_on_quadratics():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    f = lambda v: 0.5 * v @ A @ v
    g = fd_gradient(f, np.array([1.0, -2.0]), h=1e-3)
    assert np.allclose(g[0], A @ np.array([1.0, -2.0]), atol=1e-10)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_gradient(lambda v: v, np.zeros(1), h=0)


@given(problems(max_mul=4))
def test_dense_backward_matches_fd(p):
    rng = np.random.default_rng(1)
    x, y, w = random_batch(p, 1, rng)
    gz = rng.standard_normal((1, p.dim_z))
    gx, gy, gw = dense_backward(p, x, y, w, gz)
    flat = np.concatenate([x.ravel(), y.ravel(), w.ravel()])
    nx, ny = x.size, y.size

    def loss(v):
        return np.sum(gz * loop_forward(p, v[:nx][None], v[nx:nx + ny][None], v[nx + ny:][None]))

    dirs = rng.standard_normal((4, flat.size))
    fd = fd_gradient(loss, flat, 1e-5, dirs)[0]
    an = dirs @ np.concatenate([gx.ravel(), gy.ravel(), gw.ravel()])
    assert np.abs(an - fd).max() <= 1e-7 * max(1.0, np.abs(fd).max())


def test_shape_mismatch(example_problem):
    with pytest.raises(ValueError):
        dense_forward(example_problem, np.zeros((1, 3)), np.zeros((1, 10)), np.zeros((1, 1568)))


def test_fd_identity_and_square():
    J = fd_gradient(lambda v: v, np.zeros(3), h=1e-5)
    assert np.allclose(J, np.eye(3), atol=1e-12)
    assert fd_gradient(lambda v: v ** 2, np.array([3.0]), h=1e-5)[0, 0] == pytest.approx(6.0, abs=1e-5)


def test_dense_linearity(example_problem):
    rng = np.random.default_rng(5)
    x1, y, w = random_batch(example_problem, 2, rng)
    x2 = rng.standard_normal(x1.shape)
    a = dense_forward(example_problem, x1 + x2, y, w)
    b = dense_forward(example_problem, x1, y, w) + dense_forward(example_problem, x2, y, w)
    assert np.abs(a - b).max() <= 1e-13 * np.abs(b).max()
