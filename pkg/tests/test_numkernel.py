import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melmo import numkernel as nk
from melmo.numkernel import NumericError, Tape, TapeError, Tensor


def t64(values, trainable=False, name=None):
    return Tensor(np.asarray(values, dtype=np.float64), trainable=trainable,
                  name=name)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = nk.matmul(None, t64(np.eye(2)), t64([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_hand_checked():
    out = nk.matmul(None, t64([[1, 2]]), t64([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_dimension_mismatch():
    with pytest.raises(NumericError):
        nk.matmul(None, t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    a = t64(rng.standard_normal((5, 7)), trainable=True, name="a")
    b = t64(rng.standard_normal((7, 3)), trainable=True, name="b")

    def fn(tape):
        return nk.sum_all(tape, nk.matmul(tape, a, b))

    report = nk.grad_check(fn, [a, b], step=1e-5, tol=1e-6)
    assert report.passed, report.errors


def test_matmul_associativity_with_identity():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((4, 4)))
    eye = t64(np.eye(4))
    left = nk.matmul(None, nk.matmul(None, a, eye), a)
    right = nk.matmul(None, a, nk.matmul(None, eye, a))
    np.testing.assert_allclose(left.data, right.data, atol=1e-12)


# ---------------------------------------------------------------------------
# sigmoid / tanh / clip
# ---------------------------------------------------------------------------

def test_sigmoid_values():
    assert nk.sigmoid(None, t64([0.0])).data[0] == 0.5
    assert abs(nk.sigmoid(None, t64([50.0])).data[0] - 1.0) < 1e-15
    assert abs(nk.sigmoid(None, t64([-50.0])).data[0]) < 1e-15


def test_sigmoid_derivative_against_central_difference():
    x = t64([1.0], trainable=True, name="x")
    report = nk.grad_check(lambda tape: nk.sum_all(tape, nk.sigmoid(tape, x)),
                           [x], step=1e-5, tol=1e-8)
    assert report.passed, report.errors


def test_tanh_zero_and_odd_symmetry():
    assert nk.tanh(None, t64([0.0])).data[0] == 0.0
    x = np.linspace(-3, 3, 13)
    pos = nk.tanh(None, t64(x)).data
    neg = nk.tanh(None, t64(-x)).data
    np.testing.assert_array_equal(pos, -neg)


def test_tanh_derivative_against_central_difference():
    x = t64([0.3], trainable=True, name="x")
    report = nk.grad_check(lambda tape: nk.sum_all(tape, nk.tanh(tape, x)),
                           [x], step=1e-5, tol=1e-8)
    assert report.passed, report.errors


def test_clip_examples():
    assert nk.clip(None, t64([5.0]), 3.0).data[0] == 3.0
    assert nk.clip(None, t64([-5.0]), 3.0).data[0] == -3.0
    assert nk.clip(None, t64([1.2]), 3.0).data[0] == 1.2
    out = nk.clip(None, t64([-4.0, -1.0, 0.0, 2.0, 9.0]), 3.0)
    np.testing.assert_array_equal(out.data, [-3.0, -1.0, 0.0, 2.0, 3.0])


def test_clip_rejects_nonpositive_bound():
    with pytest.raises(NumericError):
        nk.clip(None, t64([1.0]), 0.0)
    with pytest.raises(NumericError):
        nk.clip(None, t64([1.0]), -2.0)


def test_clip_gradient_zero_outside_passthrough_inside():
    x = t64([-4.0, -1.0, 2.0, 9.0, 3.0], trainable=True)
    tape = Tape()
    loss = nk.sum_all(tape, nk.clip(tape, x, 3.0))
    grads = nk.backward(tape, loss)
    # exact boundary |x| == c passes gradient through
    np.testing.assert_array_equal(grads[x], [0.0, 1.0, 1.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_collapses_to_beta():
    x = t64([[5.0, 5.0, 5.0, 5.0]])
    gamma = t64([1.0] * 4)
    beta = t64([0.0] * 4)
    out = nk.layer_norm(None, x, gamma, beta, eps=1e-5)
    np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-9)


def test_layer_norm_unit_variance_fixed_point():
    x = t64([[1.0, -1.0]])
    out = nk.layer_norm(None, x, t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_output_is_normalized():
    rng = np.random.default_rng(2)
    x = t64(rng.standard_normal((6, 16)) * 10.0)
    out = nk.layer_norm(None, x, t64(np.ones(16)), t64(np.zeros(16)), eps=1e-5)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_shape_mismatch():
    with pytest.raises(NumericError):
        nk.layer_norm(None, t64(np.ones((3, 8))), t64(np.ones(4)),
                      t64(np.zeros(8)))


def test_layer_norm_all_gradients_match_central_differences():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((3, 8)), trainable=True, name="x")
    gamma = t64(rng.uniform(0.5, 1.5, 8), trainable=True, name="gamma")
    beta = t64(rng.uniform(-0.5, 0.5, 8), trainable=True, name="beta")
    # weight rows so the loss is not invariant to row-internal shifts
    w = t64(rng.standard_normal((3, 8)))

    def fn(tape):
        y = nk.layer_norm(tape, x, gamma, beta)
        return nk.sum_all(tape, nk.mul(tape, y, w))

    report = nk.grad_check(fn, [x, gamma, beta], step=1e-5, tol=1e-6)
    assert report.passed, report.errors


# ---------------------------------------------------------------------------
# softmax_xent
# ---------------------------------------------------------------------------

def test_softmax_xent_uniform_logits_equal_log_v():
    logits = t64(np.zeros((3, 10)))
    loss, nll = nk.softmax_xent(None, logits, [0, 4, 9])
    assert abs(loss.item() - np.log(10)) < 1e-12
    np.testing.assert_allclose(nll.data, np.log(10), atol=1e-12)


def test_softmax_xent_dominant_logit_near_zero_loss():
    logits = np.zeros((2, 6))
    logits[0, 2] = 50.0
    logits[1, 5] = 50.0
    loss, _ = nk.softmax_xent(None, t64(logits), [2, 5])
    assert loss.item() < 1e-15


def test_softmax_xent_out_of_range_target():
    with pytest.raises(NumericError):
        nk.softmax_xent(None, t64(np.zeros((2, 5))), [1, 5])


def test_softmax_xent_gradient_matches_central_differences():
    rng = np.random.default_rng(4)
    logits = t64(rng.standard_normal((4, 11)), trainable=True, name="logits")
    targets = rng.integers(0, 11, size=4)

    def fn(tape):
        return nk.softmax_xent(tape, logits, targets)[0]

    report = nk.grad_check(fn, [logits], step=1e-5, tol=1e-6)
    assert report.passed, report.errors


# ---------------------------------------------------------------------------
# tape backward
# ---------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3), trainable=True)
    tape = Tape()
    loss = nk.sum_all(tape, x)
    grads = nk.backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))


def test_unreachable_leaf_gets_zero_gradient():
    x = t64([1.0, 2.0], trainable=True)
    w = t64([5.0], trainable=True)
    tape = Tape()
    loss = nk.sum_all(tape, x)
    grads = nk.backward(tape, loss, leaves=[x, w])
    np.testing.assert_array_equal(grads[w], [0.0])


def test_backward_requires_scalar_loss_from_this_tape():
    x = t64([1.0, 2.0], trainable=True)
    tape = Tape()
    vec = nk.mul(tape, x, x)
    with pytest.raises(TapeError):
        nk.backward(tape, vec)
    other = nk.sum_all(Tape(), x)
    with pytest.raises(TapeError):
        nk.backward(tape, other)


def test_composite_chain_gradients_match_central_differences():
    rng = np.random.default_rng(5)
    x = t64(rng.standard_normal((3, 6)), trainable=True, name="x")
    w = t64(rng.standard_normal((6, 5)), trainable=True, name="w")
    gamma = t64(rng.uniform(0.5, 1.5, 5), trainable=True, name="gamma")
    beta = t64(rng.uniform(-0.5, 0.5, 5), trainable=True, name="beta")
    mixer = t64(rng.standard_normal((3, 5)))

    def fn(tape):
        y = nk.layer_norm(tape, nk.tanh(tape, nk.matmul(tape, x, w)),
                          gamma, beta)
        return nk.sum_all(tape, nk.mul(tape, y, mixer))

    report = nk.grad_check(fn, [x, w, gamma, beta], step=1e-5, tol=1e-5)
    assert report.passed, report.errors


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((4, 4)), trainable=True)
    w = t64(rng.standard_normal((4, 4)), trainable=True)
    alpha, beta = 1.7, -0.6

    def losses(tape):
        l1 = nk.sum_all(tape, nk.tanh(tape, nk.matmul(tape, x, w)))
        l2 = nk.sum_all(tape, nk.sigmoid(tape, nk.matmul(tape, w, x)))
        return l1, l2

    tape = Tape()
    l1, l2 = losses(tape)
    g1 = nk.backward(tape, l1, leaves=[x, w])
    g2 = nk.backward(tape, l2, leaves=[x, w])

    tape2 = Tape()
    m1, m2 = losses(tape2)
    combined = nk.add(tape2, nk.scale(tape2, m1, alpha), nk.scale(tape2, m2, beta))
    gc = nk.backward(tape2, combined, leaves=[x, w])
    for leaf in (x, w):
        np.testing.assert_allclose(gc[leaf], alpha * g1[leaf] + beta * g2[leaf],
                                   atol=1e-10)


def test_primitive_gradients_across_seeds():
    # every primitive, tape vs central differences, >= 10 seeds
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = t64(rng.standard_normal((3, 5)) * 2, trainable=True, name="x")
        y = t64(rng.standard_normal((3, 5)), trainable=True, name="y")
        w = t64(rng.standard_normal((5, 4)), trainable=True, name="w")
        gamma = t64(rng.uniform(0.5, 1.5, 4), trainable=True, name="g")
        beta = t64(rng.uniform(-0.5, 0.5, 4), trainable=True, name="b")

        def fn(tape):
            s = nk.add(tape, nk.mul(tape, x, y), nk.sigmoid(tape, x))
            s = nk.sub(tape, s, nk.tanh(tape, y))
            z = nk.matmul(tape, nk.clip(tape, s, 2.5), w)
            z = nk.layer_norm(tape, z, gamma, beta)
            first = nk.narrow0(tape, z, 0, 2)
            cols = nk.slice_last(tape, first, 1, 3)
            both = nk.concat(tape, [cols, cols], axis=-1)
            return nk.sum_all(tape, nk.mul(tape, both, both))

        report = nk.grad_check(fn, [x, y, w, gamma, beta], step=1e-5, tol=1e-4)
        assert report.passed, (seed, report.errors)


def test_grad_check_linear_function_is_exact():
    a = np.array([1.5, -2.0, 0.25])
    x = t64([0.3, 0.7, -1.1], trainable=True, name="x")
    coeff = t64(a)

    def fn(tape):
        return nk.sum_all(tape, nk.mul(tape, coeff, x))

    report = nk.grad_check(fn, [x], step=1e-5, tol=1e-9)
    assert report.worst < 1e-9


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), trainable=True)
    with pytest.raises(NumericError):
        nk.grad_check(lambda tape: nk.sum_all(tape, x), [x])


def test_nonfinite_result_aborts_naming_the_op():
    big = t64([1e308])
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError, match="mul"):
            nk.mul(None, big, big)
        with pytest.raises(NumericError, match="add"):
            nk.add(None, big, big)


def test_tensor_constructor_rejects_nonfinite():
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))
    with pytest.raises(NumericError):
        Tensor(np.array([np.inf]))


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@given(st.lists(st.floats(-30, 30), min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_sigmoid_range_and_tanh_bounds(values):
    x = t64(values)
    s = nk.sigmoid(None, x).data
    assert np.all(s >= 0.0) and np.all(s <= 1.0)
    th = nk.tanh(None, x).data
    assert np.all(np.abs(th) <= 1.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30),
       st.floats(0.1, 10.0))
@settings(max_examples=60, deadline=None)
def test_clip_is_idempotent_and_bounded(values, c):
    x = t64(values)
    once = nk.clip(None, x, c)
    twice = nk.clip(None, once, c)
    np.testing.assert_array_equal(once.data, twice.data)
    assert np.all(np.abs(once.data) <= c)
