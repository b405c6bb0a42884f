import math

import numpy as np
import pytest

from mscada.tensor import (
    IGNORE_LABEL,
    InvalidLabelError,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    gradient_check,
    masked_weighted_cross_entropy,
    matmul,
    mul,
    no_grad,
    reduce_max_with_index,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    slice_,
    softmax,
    transpose,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(matmul(eye, b).data, b.data)

    def test_1x2_by_2x1(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_central_difference(self):
        a = Tensor(rng(1).standard_normal((4, 5)))
        b_const = rng(2).standard_normal((5, 3))
        err = gradient_check(lambda t: reduce_sum(matmul(t, Tensor(b_const))), a)
        assert err < 1e-6


class TestConv2d:
    def test_zero_input(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(rng(0).standard_normal((3, 2, 3, 3)))
        assert np.all(conv2d(x, w).data == 0.0)

    def test_ones_kernel_hand_values(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w).data[0, 0]
        assert y[1, 1] == 9.0
        for r, c in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y[r, c] == 4.0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel mismatch"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))

    def test_gradient_input_and_kernel(self):
        x0 = rng(3).standard_normal((2, 3, 5, 5))
        w0 = rng(4).standard_normal((2, 3, 3, 3))
        b0 = rng(5).standard_normal(2)
        err_x = gradient_check(
            lambda t: reduce_sum(mul(conv2d(t, Tensor(w0), Tensor(b0)), 0.1)), Tensor(x0))
        err_w = gradient_check(
            lambda t: reduce_sum(mul(conv2d(Tensor(x0), t, Tensor(b0)), 0.1)), Tensor(w0))
        assert err_x < 1e-5
        assert err_w < 1e-5


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = softmax(Tensor([[0.0, 0.0, 0.0]]), axis=1)
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_stable_on_huge_logit(self):
        out = softmax(Tensor([[1000.0, 0.0]]), axis=1).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_sums_to_one_tightly(self):
        x = Tensor(rng(6).standard_normal((5, 7)) * 50.0)
        s = softmax(x, axis=1).data.sum(axis=1)
        assert np.abs(s - 1.0).max() < 1e-12

    def test_no_nan_on_finite_inputs(self):
        x = Tensor(np.array([[1e300, -1e300, 0.0], [-745.0, 745.0, 0.0]]))
        assert np.isfinite(softmax(x, axis=1).data).all()

    def test_gradient(self):
        x = Tensor(rng(7).standard_normal((2, 4)))
        coef = rng(70).standard_normal((2, 4))
        err = gradient_check(lambda t: reduce_sum(mul(softmax(t, axis=1), Tensor(coef))), x)
        assert err < 1e-6


class TestCrossEntropy:
    def test_peaked_logits_near_zero_loss(self):
        labels = rng(8).integers(0, 3, size=(2, 4, 4))
        logits = np.full((2, 3, 4, 4), -50.0)
        np.put_along_axis(logits, labels[:, None], 50.0, axis=1)
        loss = masked_weighted_cross_entropy(Tensor(logits), labels, np.ones((2, 4, 4)))
        assert loss.item() < 1e-3

    def test_all_ignored_zero_loss_and_grad(self):
        logits = Tensor(rng(9).standard_normal((1, 3, 2, 2)), requires_grad=True)
        labels = np.full((1, 2, 2), IGNORE_LABEL)
        loss = masked_weighted_cross_entropy(logits, labels, np.ones((1, 2, 2)))
        loss.backward()
        assert loss.item() == 0.0
        assert np.all(logits.grad == 0.0)

    def test_two_pixel_weighted_hand_value(self):
        # pixel 0: logits [2, 0], label 0, weight 1; pixel 1: [0.5, 1.5], label 1, weight 0.5
        logits = np.array([[[[2.0, 0.5]], [[0.0, 1.5]]]])
        labels = np.array([[[0, 1]]])
        weights = np.array([[[1.0, 0.5]]])
        nll0 = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
        nll1 = -math.log(math.exp(1.5) / (math.exp(1.5) + math.exp(0.5)))
        expected = (1.0 * nll0 + 0.5 * nll1) / 2.0
        loss = masked_weighted_cross_entropy(Tensor(logits), labels, weights)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_invalid_label_raises(self):
        with pytest.raises(InvalidLabelError, match="7"):
            masked_weighted_cross_entropy(
                Tensor(np.zeros((1, 3, 1, 1))), np.array([[[7]]]), np.ones((1, 1, 1)))

    def test_ignored_pixels_do_not_leak(self):
        # Perturbing logits at ignored pixels changes neither the loss nor the
        # gradient at the remaining pixels, bitwise.
        base = rng(10).standard_normal((1, 4, 3, 3))
        labels = rng(11).integers(0, 4, size=(1, 3, 3))
        labels[0, 0, :] = IGNORE_LABEL
        weights = rng(12).uniform(0.1, 1.0, size=(1, 3, 3))

        def run(arr):
            t = Tensor(arr, requires_grad=True)
            loss = masked_weighted_cross_entropy(t, labels, weights)
            loss.backward()
            return loss.item(), t.grad

        loss_a, grad_a = run(base)
        perturbed = base.copy()
        perturbed[0, :, 0, :] += rng(13).standard_normal((4, 3)) * 100.0
        loss_b, grad_b = run(perturbed)
        assert loss_a == loss_b
        valid = labels != IGNORE_LABEL
        assert np.array_equal(grad_a[0][:, valid[0]], grad_b[0][:, valid[0]])
        assert np.all(grad_b[0][:, ~valid[0]] == 0.0)

    def test_gradient(self):
        labels = rng(14).integers(0, 3, size=(2, 3, 3))
        labels[0, 0, 0] = IGNORE_LABEL
        weights = rng(15).uniform(0.2, 1.0, size=(2, 3, 3))
        x = Tensor(rng(16).standard_normal((2, 3, 3, 3)))
        err = gradient_check(
            lambda t: masked_weighted_cross_entropy(t, labels, weights), x)
        assert err < 1e-6


class TestElementwise:
    def test_relu(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_concat_shapes(self):
        out = concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_reduce_max_tie_breaks_low(self):
        out, idx = reduce_max_with_index(Tensor([0.5, 0.5]), axis=0)
        assert out.item() == 0.5
        assert idx == 0

    def test_reduce_max_deterministic_on_ties(self):
        x = np.zeros((4, 6))
        x[:, 2] = 1.0
        x[:, 4] = 1.0
        _, idx = reduce_max_with_index(Tensor(x), axis=1)
        assert np.all(idx == 2)

    def test_slice_and_reshape_roundtrip(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        y = reshape(slice_(x, (slice(0, 1),)), (3, 4))
        assert np.array_equal(y.data, x.data[0])

    def test_transpose_gradient(self):
        x = Tensor(rng(17).standard_normal((3, 4, 2)))
        err = gradient_check(
            lambda t: reduce_sum(mul(transpose(t, (2, 0, 1)), 0.3)), x)
        assert err < 1e-8

    def test_add_broadcast_gradient(self):
        a = Tensor(rng(18).standard_normal((2, 3, 4)))
        b = rng(19).standard_normal((3, 1))
        err = gradient_check(lambda t: reduce_sum(mul(add(t, Tensor(b)), 0.5)), a)
        assert err < 1e-8

    def test_add_same_tensor_twice(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = reduce_sum(add(x, x))
        y.backward()
        assert np.array_equal(x.grad, np.array([2.0, 2.0]))

    def test_shared_gradient_buffers_do_not_alias(self):
        # a + b feeds two consumers; accumulation into one parent must not
        # corrupt the other's gradient.
        a = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        b = Tensor(np.array([2.0, 2.0]), requires_grad=True)
        s = add(a, b)
        y = add(reduce_sum(s), reduce_sum(mul(s, 3.0)))
        y.backward()
        assert np.array_equal(a.grad, np.array([4.0, 4.0]))
        assert np.array_equal(b.grad, np.array([4.0, 4.0]))


class TestGradientCheck:
    def test_sum_is_exact(self):
        err = gradient_check(lambda t: reduce_sum(t), Tensor(rng(20).standard_normal((3, 3))))
        assert err < 1e-10

    def test_softmax_weighted_sum(self):
        x = Tensor(rng(21).standard_normal((3, 3)))
        err = gradient_check(lambda t: reduce_sum(mul(softmax(t, axis=1), t)), x)
        assert err < 1e-5

    def test_rejects_nonscalar(self):
        with pytest.raises(ValueError, match="scalar"):
            gradient_check(lambda t: mul(t, 2.0), Tensor(np.zeros((2, 2))))

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError, match="outside"):
            gradient_check(lambda t: reduce_sum(t), Tensor(np.zeros(2)), h=1e-2)

    @pytest.mark.parametrize("seed", range(20))
    def test_op_suite_across_seeds(self, seed):
        # Every differentiable op chained together, 20 seeds, 1e-4 budget.
        r = rng(100 + seed)
        x = Tensor(r.standard_normal((2, 3, 4, 4)))
        w = r.standard_normal((4, 3, 3, 3))
        b = r.standard_normal(4)
        labels = r.integers(0, 4, size=(2, 4, 4))
        weights = r.uniform(0.1, 1.0, size=(2, 4, 4))
        proj = r.standard_normal((4, 2))

        def f(t):
            h = conv2d(t, Tensor(w), Tensor(b))
            h = relu(h)
            part = slice_(h, (slice(None), slice(0, 2)))
            h = concat([part, mul(part, 0.5)], axis=1)
            ce = masked_weighted_cross_entropy(h, labels, weights)
            m = reduce_mean(softmax(h, axis=1))
            flat = reshape(transpose(h, (0, 2, 3, 1)), (32, 4))
            mm = reduce_mean(matmul(flat, Tensor(proj)))
            mx, _ = reduce_max_with_index(reshape(h, (2, -1)), axis=1)
            return add(add(ce, m), add(mm, mul(reduce_sum(mx), 0.1)))

        assert gradient_check(f, x) < 1e-4


class TestNoGrad:
    def test_no_tape_inside_context(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = mul(x, 2.0)
        assert y._backward is None
        assert y._parents == ()

    def test_tape_freed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = reduce_sum(mul(x, 2.0))
        mid = y._parents
        y.backward()
        assert y._parents == ()
        assert all(p._backward is None for p in mid)
