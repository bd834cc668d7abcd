"""Autodiff engine: forward values, gradients, counters, error paths."""

import numpy as np
import pytest

from hmba.tensor import (
    Tensor, ShapeMismatchError, NonFiniteError, GradError,
    no_grad, count_multiply_adds, backward, finite_diff_check,
    matmul, phi1, concat, stack, softmax, log_softmax,
)

RNG = np.random.default_rng(20240817)


def t(shape, scale=1.0, grad=True):
    return Tensor(scale * RNG.standard_normal(shape), requires_grad=grad)


class TestForwardValues:
    def test_add_matches_numpy(self):
        a, b = t((3, 4)), t((3, 4))
        np.testing.assert_array_equal((a + b).data, a.data + b.data)

    def test_broadcast_add(self):
        a, b = t((3, 1, 5)), t((4, 5))
        np.testing.assert_array_equal((a + b).data, a.data + b.data)

    def test_scalar_operand_wraps(self):
        a = t((2, 3))
        np.testing.assert_allclose((2.0 * a).data, 2.0 * a.data)
        np.testing.assert_allclose((1.0 - a).data, 1.0 - a.data)
        np.testing.assert_allclose((1.0 / (a + 10.0)).data,
                                   1.0 / (a.data + 10.0))

    def test_matmul_matches_numpy(self):
        a, b = t((2, 3, 4)), t((4, 5))
        np.testing.assert_allclose((matmul(a, b)).data, a.data @ b.data)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeMismatchError):
            matmul(t((2, 3)), t((4, 5)))

    def test_unary_values(self):
        x = t((6,), scale=0.7)
        np.testing.assert_allclose(x.exp().data, np.exp(x.data))
        np.testing.assert_allclose(x.sigmoid().data,
                                   1.0 / (1.0 + np.exp(-x.data)))
        np.testing.assert_allclose(x.softplus().data,
                                   np.log1p(np.exp(x.data)))
        np.testing.assert_allclose(x.silu().data,
                                   x.data / (1.0 + np.exp(-x.data)))

    def test_softplus_large_input_is_stable(self):
        x = Tensor(np.array([800.0, -800.0]))
        out = x.softplus().data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(800.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_softmax_rows_sum_to_one(self):
        s = softmax(t((4, 7)), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s > 0).all()

    def test_softmax_shift_invariance(self):
        x = t((3, 5))
        shifted = Tensor(x.data + 1000.0)
        np.testing.assert_allclose(softmax(x, axis=-1).data,
                                   softmax(shifted, axis=-1).data, atol=1e-12)

    def test_log_softmax_consistency(self):
        x = t((3, 5))
        np.testing.assert_allclose(log_softmax(x, axis=-1).data,
                                   np.log(softmax(x, axis=-1).data),
                                   atol=1e-12)

    def test_reductions(self):
        x = t((3, 4, 5))
        np.testing.assert_allclose(x.sum(axis=1).data, x.data.sum(axis=1))
        np.testing.assert_allclose(x.mean(axis=(0, 2), keepdims=True).data,
                                   x.data.mean(axis=(0, 2), keepdims=True))

    def test_movement_ops(self):
        x = t((2, 3, 4))
        np.testing.assert_array_equal(x.permute(2, 0, 1).data,
                                      np.transpose(x.data, (2, 0, 1)))
        np.testing.assert_array_equal(x.moveaxis(0, -1).data,
                                      np.moveaxis(x.data, 0, -1))
        np.testing.assert_array_equal(x.flip0().data, x.data[::-1])
        np.testing.assert_array_equal(x.narrow(1, 1, 2).data, x.data[:, 1:3])
        np.testing.assert_array_equal(x.reshape(6, 4).data,
                                      x.data.reshape(6, 4))

    def test_shift0_pads_with_zeros(self):
        x = t((4, 2))
        out = x.shift0(1).data
        assert (out[0] == 0).all()
        np.testing.assert_array_equal(out[1:], x.data[:-1])

    def test_index_rows(self):
        x = t((5, 3))
        idx = np.array([4, 0, 2])
        np.testing.assert_array_equal(x.index_rows(idx).data, x.data[idx])

    def test_concat_stack(self):
        a, b = t((2, 3)), t((4, 3))
        np.testing.assert_array_equal(concat([a, b], axis=0).data,
                                      np.concatenate([a.data, b.data]))
        c, d = t((2, 3)), t((2, 3))
        np.testing.assert_array_equal(stack([c, d], axis=0).data,
                                      np.stack([c.data, d.data]))

    def test_phi1_values(self):
        z = np.array([-2.0, -1e-8, 0.0, 1e-8, 1.5])
        out = phi1(Tensor(z)).data
        expect = np.where(np.abs(z) < 1e-6, 1.0 + 0.5 * z,
                          np.expm1(np.where(np.abs(z) < 1e-6, 1.0, z))
                          / np.where(np.abs(z) < 1e-6, 1.0, z))
        np.testing.assert_allclose(out, expect, rtol=1e-15)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.inf]))

    def test_nonfinite_result_rejected(self):
        x = Tensor(np.array([800.0]))
        with pytest.raises(NonFiniteError):
            x.exp()


class TestGradients:
    @pytest.mark.parametrize("fn,shape,scale", [
        (lambda x: (x * x).sum(), (3, 4), 1.0),
        (lambda x: (x + 2.0 * x).mean(), (5,), 1.0),
        (lambda x: x.exp().sum(), (4,), 0.5),
        (lambda x: (x + 5.0).log().sum(), (4,), 0.5),
        (lambda x: x.sigmoid().sum(), (6,), 1.0),
        (lambda x: x.softplus().sum(), (6,), 1.0),
        (lambda x: x.silu().sum(), (6,), 1.0),
        (lambda x: softmax(x, axis=-1).narrow(-1, 0, 1).sum(), (3, 5), 1.0),
        (lambda x: log_softmax(x, axis=-1).narrow(-1, 1, 2).sum(), (3, 5), 1.0),
        (lambda x: phi1(x - 2.0).sum(), (5,), 0.5),
        (lambda x: x.permute(1, 0).reshape(*(12,)).narrow(0, 2, 6).sum(),
         (3, 4), 1.0),
        (lambda x: x.flip0().shift0(2).sum(axis=0).mean(), (5, 3), 1.0),
        (lambda x: x.moveaxis(0, 1).broadcast_to((4, 2, 5)).sum(),
         (2, 1, 5), 1.0),
        (lambda x: (x / (x * x + 1.0)).sum(), (4,), 1.0),
        (lambda x: (-x).mean(axis=0).sum(), (3, 4), 1.0),
    ])
    def test_elementwise_and_movement(self, fn, shape, scale):
        x = Tensor(scale * RNG.standard_normal(shape), requires_grad=True)
        assert finite_diff_check(fn, x) < 1e-7

    def test_matmul_grads_both_sides(self):
        a = t((3, 4))
        b = t((4, 2))
        w = RNG.standard_normal((3, 2))
        assert finite_diff_check(
            lambda x: (matmul(x, b) * Tensor(w)).sum(), a) < 1e-7
        assert finite_diff_check(
            lambda x: (matmul(a, x) * Tensor(w)).sum(), b) < 1e-7

    def test_batched_matmul_grad(self):
        a = t((2, 3, 4))
        b = t((2, 4, 2))
        w = RNG.standard_normal((2, 3, 2))
        assert finite_diff_check(
            lambda x: (matmul(x, b) * Tensor(w)).sum(), a) < 1e-7
        assert finite_diff_check(
            lambda x: (matmul(a, x) * Tensor(w)).sum(), b) < 1e-7

    def test_broadcast_grad_unbroadcasts(self):
        a = t((3, 1))
        b = t((3, 4))
        loss = (a * b).sum()
        backward(loss)
        np.testing.assert_allclose(a.grad, b.data.sum(axis=1, keepdims=True))

    def test_concat_stack_grads(self):
        a, b = t((2, 3)), t((4, 3))
        w = RNG.standard_normal((6, 3))
        assert finite_diff_check(
            lambda x: (concat([x, b], axis=0) * Tensor(w)).sum(), a) < 1e-7
        assert finite_diff_check(
            lambda x: (concat([a, x], axis=0) * Tensor(w)).sum(), b) < 1e-7

    def test_index_rows_grad_accumulates_duplicates(self):
        x = t((4, 2))
        idx = np.array([1, 1, 3])
        loss = x.index_rows(idx).sum()
        backward(loss)
        expect = np.zeros((4, 2))
        np.testing.assert_array_equal(
            x.grad, expect + np.array([[0], [2], [0], [1]]))

    def test_reused_node_accumulates(self):
        x = t((3,))
        y = x * 2.0
        loss = (y * y).sum() + y.sum()
        backward(loss)
        np.testing.assert_allclose(x.grad, 8.0 * x.data + 2.0)

    def test_grad_accumulates_across_backward_calls(self):
        x = t((3,))
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_allclose(x.grad, 2.0)

    def test_zero_grad(self):
        x = t((3,))
        backward(x.sum())
        x.zero_grad()
        assert x.grad is None

    def test_backward_needs_scalar(self):
        with pytest.raises(GradError):
            backward(t((3,)))

    def test_no_grad_suppresses_graph(self):
        x = t((3,))
        with no_grad():
            y = (x * x).sum()
        assert y._parents == ()
        assert not y.requires_grad
        backward(y)          # nothing reachable: a silent no-op
        assert x.grad is None

    def test_detach_blocks_flow(self):
        x = t((3,))
        loss = (x.detach() * x).sum()
        backward(loss)
        np.testing.assert_allclose(x.grad, x.data)


class TestCounter:
    def test_matmul_count(self):
        a, b = t((7, 3, 4), grad=False), t((4, 5), grad=False)
        with count_multiply_adds() as c:
            matmul(a, b)
        assert c.total == 7 * 3 * 4 * 5

    def test_elementwise_and_reduction_counts(self):
        x = t((3, 4), grad=False)
        with count_multiply_adds() as c:
            (x * x).sum()
        assert c.total == 12 + 12

    def test_movement_is_free(self):
        x = t((3, 4), grad=False)
        with count_multiply_adds() as c:
            x.permute(1, 0).reshape(12).narrow(0, 0, 6)
        assert c.total == 0

    def test_nested_counters_are_independent(self):
        x = t((4,), grad=False)
        with count_multiply_adds() as outer:
            x + x
            with count_multiply_adds() as inner:
                x * x
            x + x
        assert inner.total == 4
        assert outer.total == 8
