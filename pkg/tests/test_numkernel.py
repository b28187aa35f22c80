from __future__ import annotations

import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmoe import numkernel as nk
from hmoe.errors import DimensionError, NumericError
from hmoe.numkernel import Param, Tape, Tensor, finite_diff_check

finite = st.floats(-20, 20, allow_nan=False)


def vec(n_min=1, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# --- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = nk.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_hand_value():
    assert nk.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zero():
    out = nk.matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 5)))
    assert out.shape == (2, 5) and not out.data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nk.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_backward_formulas():
    rng = np.random.default_rng(1)
    a, b = Param(rng.normal(size=(3, 4)), "a"), Param(rng.normal(size=(4, 2)), "b")
    g = rng.normal(size=(3, 2))
    with Tape() as tape:
        out = nk.matmul(a, b)
    tape.backward(out, seed=g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


def test_matmul_batched_lhs_matches_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 5, 4)), rng.normal(size=(4, 2))
    out = nk.matmul(a, b).data
    for i in range(3):
        np.testing.assert_allclose(out[i], a[i] @ b, rtol=1e-13)


# --- softmax / logsumexp --------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(nk.softmax(np.zeros(4)).data, np.full(4, 0.25), atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(nk.softmax(np.array([math.log(2), 0.0, 0.0])).data, [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_large_logits_no_overflow():
    y = nk.softmax(np.array([1000.0, 0.0])).data
    assert np.isfinite(y).all() and y[0] == 1.0 and 0.0 <= y[1] < 1e-300


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nk.softmax(np.array([0.0, np.inf]))


@given(vec(), st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(x, c):
    y = nk.softmax(x).data
    assert (y > 0).all() or x.max() - x.min() > 700
    assert abs(y.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(nk.softmax(x + c).data, y, atol=1e-12)


def test_logsumexp_examples():
    assert nk.logsumexp(np.zeros(4)).item() == pytest.approx(math.log(4), abs=1e-15)
    assert nk.logsumexp(np.array([5.0, 5.0])).item() == pytest.approx(5 + math.log(2), abs=1e-14)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_logsumexp_single_element_is_identity(c):
    assert nk.logsumexp(np.array([c])).item() == c


def test_logsumexp_empty():
    with pytest.raises(DimensionError):
        nk.logsumexp(np.zeros(0))


# --- cross entropy --------------------------------------------------------------


def test_cross_entropy_uniform():
    assert nk.cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_confident():
    # -log softmax([10,-10])[0] = log(1 + e^-20)
    assert nk.cross_entropy(np.array([[10.0, -10.0]]), [0]).item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert nk.cross_entropy(np.array([[10.0, -10.0]]), [0]).item() == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_hand_value():
    assert nk.cross_entropy(np.array([[0.0, math.log(3)]]), [1]).item() == pytest.approx(-math.log(0.75), abs=1e-14)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nk.cross_entropy(np.zeros((2, 4)), [0, 4])


# --- tape ----------------------------------------------------------------------


def test_tape_rejects_second_replay():
    w = Param(np.ones(3), "w")
    with Tape() as tape:
        loss = nk.sum(nk.mul(w, w))
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)
    tape.reset()
    w.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * np.ones(3))


def test_tape_replays_in_reverse_order():
    order = []
    x = Param(np.array([1.0]), "x")
    with Tape() as tape:
        a = nk._result(x.data * 2, (x,), lambda g: (order.append("a") or g * 2,))
        b = nk._result(a.data * 3, (a,), lambda g: (order.append("b") or g * 3,))
    tape.backward(b)
    assert order == ["b", "a"]
    assert x.grad.tolist() == [6.0]


def test_zero_grad_is_zero():
    w = Param(np.arange(3.0), "w")
    with Tape() as tape:
        loss = nk.sum(w)
    tape.backward(loss)
    w.zero_grad()
    assert w.grad.shape == w.shape and not w.grad.any()


def test_non_finite_forward_is_an_error_under_checking_tape():
    w = Param(np.array([1e308, 1e308]), "w")
    with pytest.raises(NumericError), Tape(), np.errstate(over="ignore"):
        nk.mul(w, 10.0)


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_backward_is_linear_in_losses(u, v):
    w = Param(np.linspace(-1, 1, 6).reshape(3, 2), "w")

    def grad_of(make):
        w.zero_grad()
        with Tape() as tape:
            loss = make()
        tape.backward(loss)
        return w.grad.copy()

    f1 = lambda: nk.sum(nk.mul(nk.mul(w, w), u))  # noqa: E731
    f2 = lambda: nk.sum(nk.mul(nk.gelu(w), v))  # noqa: E731
    both = grad_of(lambda: nk.add(f1(), f2()))
    np.testing.assert_allclose(both, grad_of(f1) + grad_of(f2), rtol=0, atol=1e-12 * (1 + np.abs(both).max()))


# --- finite differences ---------------------------------------------------------


def test_finite_diff_quadratic():
    w = Param(np.array([1.0, 2.0]), "w")
    rep = finite_diff_check(lambda: nk.sum(nk.mul(w, w)), [w], tolerance=1e-9)
    assert rep.passed and rep.max_rel_error < 1e-9
    assert w.grad.tolist() == [2.0, 4.0]


def test_finite_diff_flags_selection_changes_as_skipped():
    # argmax flips when w[0] crosses w[1]; at a near tie the probe changes the signature
    w = Param(np.array([1.0, 1.0 + 1e-7]), "w")

    def f():
        return nk.sum(nk.mul(w, w)), int(w.data.argmax())

    rep = finite_diff_check(f, [w], eps=1e-5)
    assert len(rep.skipped) == 2 and rep.n_checked == 0 and not rep.passed


def test_finite_diff_zero_tolerance_fails():
    w = Param(np.array([0.3, -0.7]), "w")
    rep = finite_diff_check(lambda: nk.sum(nk.gelu(w)), [w], tolerance=0.0)
    assert not rep.passed and rep.failures


def test_finite_diff_eps_range():
    w = Param(np.ones(1), "w")
    with pytest.raises(ValueError):
        finite_diff_check(lambda: nk.sum(w), [w], eps=1e-3)


def test_finite_diff_non_finite_loss():
    w = Param(np.ones(1), "w")
    with pytest.raises(NumericError):
        finite_diff_check(lambda: Tensor(np.array(np.nan)), [w])


OPS = {
    "matmul": lambda a, b: nk.matmul(a, b),
    "add_broadcast": lambda a, b: nk.add(a, nk.sum(b, axis=1)),
    "mul": lambda a, b: nk.mul(a, nk.reshape(b, (3, 4))),
    "softmax": lambda a, b: nk.mul(nk.softmax(a, axis=0), nk.reshape(b, (3, 4))),
    "logsumexp": lambda a, b: nk.logsumexp(nk.matmul(a, b), axis=-1),
    "relu": lambda a, b: nk.relu(nk.matmul(a, b)),
    "gelu": lambda a, b: nk.gelu(nk.matmul(a, b)),
    "mean": lambda a, b: nk.mean(nk.mul(a, a), axis=0),
    "gather": lambda a, b: nk.gather(b, [0, 3, 3, 1]),
    "take": lambda a, b: nk.take(a, [0, 2, 2], [1, 3, 3]),
    "scatter_rows": lambda a, b: nk.scatter_rows(a, [2, 0, 2], 4),
    "concat": lambda a, b: nk.concat([a, nk.reshape(b, (3, 4))]),
    "attention": lambda a, b: nk.attention(
        nk.reshape(a, (1, 3, 4)), nk.reshape(b, (1, 3, 4)), nk.reshape(nk.matmul(a, b), (1, 3, 3))
    ),
    "attention_causal": lambda a, b: nk.attention(
        nk.reshape(a, (1, 3, 4)), nk.reshape(b, (1, 3, 4)), nk.reshape(a, (1, 3, 4)), causal=True
    ),
    "cross_entropy": lambda a, b: nk.cross_entropy(a, [1, 0, 3]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_operator_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = Param(rng.normal(size=(3, 4)), "a")
    b = Param(rng.normal(size=(4, 3)), "b")
    weights = {}

    def f():
        out = OPS[name](a, b)
        if out.shape not in weights:
            weights[out.shape] = np.random.default_rng(7).normal(size=out.shape)
        return nk.sum(nk.mul(out, weights[out.shape]))

    rep = finite_diff_check(f, [a, b], eps=1e-6)
    assert rep.passed, rep.failures[:3]
    assert rep.max_rel_error < 1e-5


def test_gelu_matches_reference_formula():
    x = np.linspace(-6, 6, 101)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(nk.gelu(x).data, ref, rtol=1e-14, atol=1e-15)


def test_activation_switch():
    assert nk.activation("relu") is nk.relu and nk.activation("gelu") is nk.gelu
    with pytest.raises(ValueError):
        nk.activation("tanh")
