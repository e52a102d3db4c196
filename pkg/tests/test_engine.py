import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgforge import engine
from cgforge.engine import Batch, Counters, load_array, save_array, tp_backward, tp_double_backward, tp_forward
from cgforge.irreps import Rotation, rep_matrix
from cgforge.oracle import dense_backward, dense_forward
from cgforge.scheduler import build_schedule
from cgforge.tpspec import validate
from cgforge.verify import _schedules, random_batch, rel_err, unit_rms
from problems import problems


@pytest.fixture
def wide_problem():
    return validate("64x2e + 64x1o + 32x3e", "1x1o + 1x2e", "64x2o + 64x3o + 32x1o + 32x1e",
                    [(1, 1, 1, "B"), (1, 1, 2, "B"), (2, 2, 3, "C"), (3, 2, 4, "C"), (2, 1, 4, "C")])


def test_scalar(scalar_problem):
    assert tp_forward(scalar_problem, None, ([[2.0]], [[3.0]], [[0.5]])).tolist() == [[3.0]]
    gx, gy, gw = tp_backward(scalar_problem, None, ([[2.0]], [[3.0]], [[0.5]]), [[1.0]])
    assert (gx.item(), gy.item(), gw.item()) == (1.5, 1.0, 6.0)


def test_example_against_dense(example_problem, rng):
    x, y, w = random_batch(example_problem, 16, rng)
    assert rel_err(tp_forward(example_problem, None, (x, y, w)), dense_forward(example_problem, x, y, w)) <= 1e-13


@given(problems(), st.integers(1, 5))
def test_forward_matches_oracle(p, rows):
    x, y, w = random_batch(p, rows, np.random.default_rng(rows))
    assert rel_err(tp_forward(p, None, (x, y, w)), dense_forward(p, x, y, w)) <= 1e-13


@given(problems())
def test_backward_matches_oracle(p):
    rng = np.random.default_rng(2)
    x, y, w = random_batch(p, 3, rng)
    gz = unit_rms(rng, (3, p.dim_z))
    for a, b in zip(tp_backward(p, None, (x, y, w), gz), dense_backward(p, x, y, w, gz)):
        assert rel_err(a, b) <= 1e-12


@settings(max_examples=15)
@given(problems(), st.booleans())
def test_equivariance(p, improper):
    rng = np.random.default_rng(3)
    g = Rotation.random(rng, improper=improper)
    x, y, w = random_batch(p, 4, rng)
    Dx, Dy, Dz = (rep_matrix(ir, g) for ir in (p.x_ir, p.y_ir, p.z_ir))
    lhs = tp_forward(p, None, (x @ Dx.T, y @ Dy.T, w))
    rhs = tp_forward(p, None, (x, y, w)) @ Dz.T
    assert rel_err(lhs, rhs) <= 1e-10


def test_schedules_agree(wide_problem, rng):
    x, y, w = random_batch(wide_problem, 9, rng)
    scheds = _schedules(wide_problem)
    assert {s.strategy for s in scheds} >= {"single_phase", "greedy"}
    ref = tp_forward(wide_problem, scheds[0], (x, y, w))
    gz = unit_rms(rng, ref.shape)
    gref = tp_backward(wide_problem, scheds[0], (x, y, w), gz)
    for s in scheds[1:]:
        assert rel_err(tp_forward(wide_problem, s, (x, y, w)), ref) <= 1e-13
        for a, b in zip(tp_backward(wide_problem, s, (x, y, w), gz), gref):
            assert rel_err(a, b) <= 1e-13


def test_stream_z_schedule(example_problem, rng):
    x, y, w = random_batch(example_problem, 5, rng)
    s = build_schedule(example_problem, 1642, group_z=False)
    assert len(s.phases) == 3
    assert rel_err(tp_forward(example_problem, s, (x, y, w)), dense_forward(example_problem, x, y, w)) <= 1e-13


def test_worker_count_is_bitwise_invariant(wide_problem, rng):
    rows = 3 * engine.ROW_BLOCK + 11
    x, y, w = random_batch(wide_problem, rows, rng)
    gz = unit_rms(rng, (rows, wide_problem.dim_z))
    z1 = tp_forward(wide_problem, None, (x, y, w), workers=1)
    g1 = tp_backward(wide_problem, None, (x, y, w), gz, workers=1)
    for k in (2, 8):
        assert np.array_equal(tp_forward(wide_problem, None, (x, y, w), workers=k), z1)
        assert all(np.array_equal(a, b) for a, b in zip(tp_backward(wide_problem, None, (x, y, w), gz, workers=k), g1))


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("CGFORGE_WORKERS", "3")
    assert engine.default_workers() == 3
    with pytest.raises(ValueError):
        tp_forward(validate("1x0e", "1x0e", "1x0e", [(1, 1, 1, "B")]), None, ([[1.0]], [[1.0]], [[1.0]]), workers=0)


def test_fp32(example_problem, rng):
    x, y, w = random_batch(example_problem, 8, rng)
    z = tp_forward(example_problem, None, (x.astype(np.float32), y.astype(np.float32), w.astype(np.float32)))
    assert z.dtype == np.float32
    assert rel_err(z, dense_forward(example_problem, x, y, w)) <= 1e-4


def test_counters(example_problem, rng):
    x, y, w = random_batch(example_problem, 7, rng)
    s = build_schedule(example_problem)
    c = Counters()
    tp_forward(example_problem, s, (x, y, w), counters=c, instrumented=True)
    assert c.flops == 7 * s.traffic.flops
    assert c.loads == 7 * s.traffic.loads_words
    assert c.stores == 7 * s.traffic.stores_words


def test_instrumented_results_identical(example_problem, rng):
    x, y, w = random_batch(example_problem, 6, rng)
    assert np.array_equal(tp_forward(example_problem, None, (x, y, w)),
                          tp_forward(example_problem, None, (x, y, w), instrumented=True))


def test_empty_batch_and_no_instructions(example_problem):
    z = tp_forward(example_problem, None, (np.zeros((0, 256)), np.zeros((0, 10)), np.zeros((0, 1568))))
    assert z.shape == (0, 656)
    p = validate("2x1o", "1x0e", "3x2e", [])
    assert np.array_equal(tp_forward(p, None, (np.ones((2, 6)), np.ones((2, 1)), np.ones((2, 0)))), np.zeros((2, 15)))


def test_unused_output_segments_are_zero(rng):
    p = validate("4x1o", "1x1o", "4x0e + 4x1e + 2x2e", [(1, 1, 1, "B")])
    x, y, w = random_batch(p, 3, rng)
    z = tp_forward(p, None, (x, y, w))
    assert np.all(z[:, 4:] == 0) and np.any(z[:, :4] != 0)


def test_shape_errors(example_problem):
    with pytest.raises(ValueError):
        tp_forward(example_problem, None, (np.zeros((2, 256)), np.zeros((2, 10)), np.zeros((2, 5))))
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 256)), np.zeros((3, 10)), np.zeros((2, 1568))).check(example_problem)
    with pytest.raises(ValueError):
        tp_backward(example_problem, None, (np.zeros((2, 256)), np.zeros((2, 10)), np.zeros((2, 1568))),
                    np.zeros((2, 3)))


def test_schedule_from_other_problem_rejected(example_problem, scalar_problem):
    with pytest.raises(ValueError):
        tp_forward(example_problem, build_schedule(scalar_problem), ([[0.0] * 256], [[0.0] * 10], [[0.0] * 1568]))


@settings(max_examples=10)
@given(problems(max_mul=6))
def test_double_backward_fused_matches_seven(p):
    rng = np.random.default_rng(4)
    x, y, w = random_batch(p, 5, rng)
    gz = unit_rms(rng, (5, p.dim_z))
    da, db, dC = random_batch(p, 5, rng)
    f = tp_double_backward(p, None, (x, y, w), gz, da, db, dC)
    u = tp_double_backward(p, None, (x, y, w), gz, da, db, dC, fused=False)
    for a, b in zip(f, u):
        assert rel_err(a, b) <= 1e-13


def test_double_backward_against_finite_differences(example_problem, rng):
    p = example_problem
    x, y, w = random_batch(p, 2, rng)
    gz = unit_rms(rng, (2, p.dim_z))
    da, db, dC = random_batch(p, 2, rng)
    grads = tp_double_backward(p, None, (x, y, w), gz, da, db, dC)

    def L(args):
        a, b, c = tp_backward(p, None, args[:3], args[3])
        return np.sum(da * a) + np.sum(db * b) + np.sum(dC * c)

    base = [x, y, w, gz]
    for n, g in enumerate(grads):
        e = unit_rms(rng, base[n].shape)
        h = 1e-5
        plus = list(base); plus[n] = base[n] + h * e
        minus = list(base); minus[n] = base[n] - h * e
        fd = (L(plus) - L(minus)) / (2 * h)
        assert abs(np.sum(g * e) - fd) <= 1e-5 * max(1.0, abs(fd))


def test_double_backward_is_bilinear_in_upstream(example_problem, rng):
    # all four outputs vanish when every upstream gradient is zero
    p = example_problem
    x, y, w = random_batch(p, 2, rng)
    zeros = [np.zeros_like(a) for a in (x, y, w)]
    out = tp_double_backward(p, None, (x, y, w), unit_rms(rng, (2, p.dim_z)), *zeros)
    assert all(not np.any(a) for a in out)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_array_round_trip(tmp_path, rng, dtype):
    a = rng.standard_normal((3, 7)).astype(dtype)
    save_array(tmp_path / "a.bin", a)
    b = load_array(tmp_path / "a.bin")
    assert b.dtype == dtype and np.array_equal(a, b)
    assert (tmp_path / "a.bin").stat().st_size == a.nbytes


def test_array_size_mismatch(tmp_path):
    save_array(tmp_path / "a.bin", np.zeros((2, 2)))
    (tmp_path / "a.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_array(tmp_path / "a.bin")


def test_zero_inputs_give_zero(example_problem, rng):
    x, y, w = random_batch(example_problem, 3, rng)
    assert not np.any(tp_forward(example_problem, None, (np.zeros_like(x), y, w)))
    assert all(not np.any(g) for g in tp_backward(example_problem, None, (x, y, w), np.zeros((3, 656))))


@given(problems(), st.floats(0.01, 3) | st.floats(-3, -0.01))
def test_multilinearity(p, alpha):
    rng = np.random.default_rng(6)
    x, y, w = random_batch(p, 2, rng)
    x2 = unit_rms(rng, x.shape)
    z = tp_forward(p, None, (x, y, w))
    assert rel_err(tp_forward(p, None, (alpha * x, y, w)), alpha * z) <= 1e-13
    assert rel_err(tp_forward(p, None, (x + x2, y, w)), z + tp_forward(p, None, (x2, y, w))) <= 1e-13


def test_scalar_double_backward_by_hand(scalar_problem):
    # L = da*W*y*gz + db*W*x*gz + dC*x*y*gz, differentiated symbolically
    x, y, W, gz, da, db, dC = 2.0, 3.0, 0.5, 1.0, 1.0, 2.0, 3.0
    out = tp_double_backward(scalar_problem, None, ([[x]], [[y]], [[W]]), [[gz]], [[da]], [[db]], [[dC]])
    want = (db * W * gz + dC * y * gz, da * W * gz + dC * x * gz, da * y * gz + db * x * gz,
            da * W * y + db * W * x + dC * x * y)
    assert tuple(a.item() for a in out) == want == (10.0, 6.5, 7.0, 21.5)


def test_double_backward_dw_on_111(rng):
    p = validate("4x1o", "1x1o", "4x1e", [(1, 1, 1, "B")])
    x, y, w = random_batch(p, 3, rng)
    gz = unit_rms(rng, (3, p.dim_z))
    da = unit_rms(rng, x.shape)
    zeros_y, zeros_w = np.zeros_like(y), np.zeros_like(w)
    dW = tp_double_backward(p, None, (x, y, w), gz, da, zeros_y, zeros_w)[2]
    e = unit_rms(rng, w.shape)
    h = 1e-5
    f = lambda t: np.sum(da * tp_backward(p, None, (x, y, w + t * e), gz)[0])
    fd = (f(h) - f(-h)) / (2 * h)
    assert abs(np.sum(dW * e) - fd) <= 1e-5 * max(1.0, abs(fd))
