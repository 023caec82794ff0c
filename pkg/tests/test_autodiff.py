"""Tape mechanics and finite-difference checks for every primitive op."""

import numpy as np
import pytest

import panonav.autodiff as ad
from panonav.gradcheck import OP_TOL, check_ops


def _leaf(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_every_op_passes_finite_differences():
    results = check_ops()
    bad = [(n, e) for n, e, tol, ok in results if not ok]
    assert not bad, f"ops failing gradient check: {bad}"
    assert len(results) >= 30  # the suite actually covers the op set
    assert max(e for _, e, _, _ in results) < OP_TOL


def test_constant_tensors_stay_off_the_tape():
    x = ad.Tensor(np.ones(3))           # requires_grad defaults off
    w = _leaf(np.arange(3.0))
    with ad.Tape() as tape:
        y = ad.tsum(ad.mul(x, w))
        tape.backward(y)
    assert x.grad is None
    assert np.allclose(w.grad, np.ones(3))


def test_backward_accumulates_over_reuse():
    x = _leaf(2.0)
    with ad.Tape() as tape:
        y = ad.add(ad.mul(x, x), x)     # x^2 + x -> dy/dx = 2x + 1
        tape.backward(y)
    assert x.grad == pytest.approx(5.0)


def test_ops_work_without_a_tape():
    a = ad.Tensor(np.full((2, 2), 3.0))
    b = ad.Tensor(np.full((2, 2), 4.0))
    out = ad.matmul(a, b)
    assert np.allclose(out.data, 24.0)
    assert out.grad is None


def test_broadcast_gradients_reduce_correctly():
    a = _leaf(np.ones((3, 1)))
    b = _leaf(np.ones((1, 4)))
    with ad.Tape() as tape:
        tape.backward(ad.tsum(ad.mul(a, b)))
    assert a.grad.shape == (3, 1) and np.allclose(a.grad, 4.0)
    assert b.grad.shape == (1, 4) and np.allclose(b.grad, 3.0)


def test_scale_grad_leaves_values_alone():
    x = _leaf(np.arange(4.0))
    with ad.Tape() as tape:
        y = ad.scale_grad(x, 0.25)
        assert np.array_equal(y.data, x.data)
        tape.backward(ad.tsum(y))
    assert np.allclose(x.grad, 0.25)


def test_maxpool_routes_gradient_to_the_argmax():
    x = _leaf(np.array([[[[1.0, 5.0], [2.0, 0.0]]]]))
    with ad.Tape() as tape:
        y = ad.maxpool2d(x, 2)
        assert y.data.squeeze() == 5.0
        tape.backward(ad.tsum(y))
    expect = np.zeros((1, 1, 2, 2))
    expect[0, 0, 0, 1] = 1.0
    assert np.array_equal(x.grad, expect)


def test_gather_rows_scatters_gradient():
    x = _leaf(np.arange(12.0).reshape(4, 3))
    idx = np.array([1, 1, 3])
    with ad.Tape() as tape:
        y = ad.gather_rows(x, idx)
        tape.backward(ad.tsum(y))
    counts = np.zeros((4, 1)) + np.array([[0], [2], [0], [1]])
    assert np.array_equal(x.grad, np.broadcast_to(counts, (4, 3)))


def test_concat_narrow_round_trip():
    a = _leaf(np.ones((2, 3)))
    b = _leaf(np.full((2, 5), 2.0))
    with ad.Tape() as tape:
        c = ad.concat([a, b], axis=1)
        left = ad.narrow(c, 1, 0, 3)
        tape.backward(ad.tsum(ad.mul(left, left)))
    assert np.allclose(a.grad, 2.0)
    assert np.allclose(b.grad, 0.0)


def test_clamp_blocks_gradient_outside_range():
    x = _leaf(np.array([-2.0, 0.5, 2.0]))
    with ad.Tape() as tape:
        tape.backward(ad.tsum(ad.clamp(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


def test_directional_check_on_a_composite():
    rng = np.random.default_rng(7)
    w = _leaf(rng.standard_normal((4, 4)))
    x = ad.Tensor(rng.standard_normal((4,)))

    def fn():
        h = ad.tanh(ad.matmul(ad.reshape(x, (1, 4)), w))
        return ad.tsum(ad.square(h))

    err = ad.grad_check_directional(fn, [w], n_dirs=4, eps=1e-5)
    assert err < 1e-7
