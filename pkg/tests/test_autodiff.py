"""Gradient and forward checks for every autodiff op."""

import numpy as np
import pytest

import trajsim.autodiff as ad
from trajsim.autodiff import BatchNormState, Parameter, Tensor


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def check(f, params, h=1e-5, tol=1e-4, coords=64):
    err = ad.grad_check(f, params, h=h, max_coords=coords, rng=np.random.default_rng(7))
    assert err < tol, f"grad check failed: {err:.3e}"


def quadratic(t, seed=11):
    """Fixed random projection; keeps the loss sensitive to every entry."""
    w = Tensor(rand(t.shape, seed=seed))
    return ad.tsum(ad.mul(ad.mul(t, t), w)) + ad.tsum(ad.mul(t, w))


class TestForwardExamples:
    def test_softmax_uniform(self):
        out = ad.softmax_masked(Tensor(np.zeros(3)), np.ones(3, bool))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_respects_mask(self):
        out = ad.softmax_masked(Tensor(np.array([5.0, 1.0, 3.0])), np.array([True, True, False]))
        assert out.data[2] == 0.0
        np.testing.assert_allclose(out.data.sum(), 1.0)

    def test_conv1d_valid_length(self):
        x = Tensor(rand((2, 10, 3)))
        w = Tensor(rand((3, 3, 5), seed=1))
        assert ad.conv1d_valid(x, w).shape == (2, 8, 5)

    def test_leaky_relu_negative_side(self):
        out = ad.leaky_relu(Tensor(np.array([-1.0, 2.0])), 0.01)
        np.testing.assert_allclose(out.data, [-0.01, 2.0])

    def test_rms_norm_constant_vector(self):
        gain = Parameter("g", np.ones(5))
        out = ad.rms_norm(Tensor(np.full((2, 5), 3.0)), gain)
        np.testing.assert_allclose(out.data, 1.0, rtol=1e-6)

    def test_rms_norm_unit_rms(self):
        x = Tensor(rand((4, 16), seed=3))
        out = ad.rms_norm(x, Parameter("g", np.ones(16)))
        rms = np.sqrt((out.data ** 2).mean(axis=-1))
        np.testing.assert_allclose(rms, 1.0, atol=1e-6)

    def test_rms_norm_scale_invariance(self):
        x = rand((3, 8), seed=4)
        g = Parameter("g", np.ones(8))
        a = ad.rms_norm(Tensor(x), g).data
        b = ad.rms_norm(Tensor(2.0 * x), g).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_log2_sigmoid_matches_composition(self):
        x = Tensor(np.array([-3.0, 0.0, 2.5]))
        np.testing.assert_allclose(ad.log2_sigmoid(x).data,
                                   np.log2(1 / (1 + np.exp(-x.data))), atol=1e-12)

    def test_log2_sigmoid_large_negative_is_finite(self):
        out = ad.log2_sigmoid(Tensor(np.array([-1000.0])))
        np.testing.assert_allclose(out.data, [-1000.0 / np.log(2)], rtol=1e-12)


class TestBackwardBasics:
    def test_sum_gives_ones(self):
        p = Parameter("p", rand((3, 4)))
        ad.backward(ad.tsum(p))
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_sum_of_squares_gives_2p(self):
        p = Parameter("p", rand((5,)))
        ad.backward(ad.tsum(ad.mul(p, p)))
        np.testing.assert_allclose(p.grad, 2 * p.data, rtol=1e-12)

    def test_unused_parameter_gets_no_gradient(self):
        p = Parameter("p", rand((3,)))
        q = Parameter("q", rand((3,), seed=1))
        ad.backward(ad.tsum(p))
        assert q.grad is None

    def test_gradients_sum_over_use_sites(self):
        p = Parameter("p", rand((3,)))
        ad.backward(ad.tsum(ad.add(p, p)))
        np.testing.assert_array_equal(p.grad, 2 * np.ones(3))

    def test_backward_requires_scalar(self):
        p = Parameter("p", rand((3,)))
        with pytest.raises(ValueError):
            ad.backward(ad.mul(p, p))

    def test_idempotent_after_zeroing(self):
        p = Parameter("p", rand((4,)))
        ad.backward(ad.tsum(ad.mul(p, p)))
        first = p.grad.copy()
        p.zero_grad()
        ad.backward(ad.tsum(ad.mul(p, p)))
        np.testing.assert_array_equal(p.grad, first)


class TestGradChecks:
    def test_linear_map_is_exact(self):
        p = Parameter("p", rand((4, 4)))
        w = Tensor(rand((4, 4), seed=2))
        check(lambda: ad.tsum(ad.mul(p, w)), [p], tol=1e-10)

    def test_add_broadcast(self):
        a = Parameter("a", rand((3, 4)))
        b = Parameter("b", rand((4,), seed=1))
        check(lambda: quadratic(ad.add(a, b)), [a, b])

    def test_sub_and_scale(self):
        a = Parameter("a", rand((3, 4)))
        b = Parameter("b", rand((3, 4), seed=1))
        check(lambda: quadratic(ad.sub(ad.scale(a, 1.7), b)), [a, b])

    def test_mul_broadcast(self):
        a = Parameter("a", rand((2, 3, 4)))
        b = Parameter("b", rand((3, 4), seed=1))
        check(lambda: quadratic(ad.mul(a, b)), [a, b])

    def test_matmul_2d(self):
        a = Parameter("a", rand((3, 4)))
        b = Parameter("b", rand((4, 5), seed=1))
        check(lambda: quadratic(ad.matmul(a, b)), [a, b])

    def test_matmul_batched_times_2d(self):
        a = Parameter("a", rand((2, 3, 4)))
        b = Parameter("b", rand((4, 5), seed=1))
        check(lambda: quadratic(ad.matmul(a, b)), [a, b])

    def test_matmul_batched_4d(self):
        a = Parameter("a", rand((2, 2, 3, 4)))
        b = Parameter("b", rand((2, 2, 4, 3), seed=1))
        check(lambda: quadratic(ad.matmul(a, b)), [a, b])

    def test_concat_last(self):
        a = Parameter("a", rand((2, 3)))
        b = Parameter("b", rand((2, 5), seed=1))
        check(lambda: quadratic(ad.concat_last([a, b])), [a, b])

    def test_slice(self):
        a = Parameter("a", rand((4, 6)))
        check(lambda: quadratic(ad.tslice(a, (slice(1, 3), slice(None, 4)))), [a])

    def test_gather_with_repeats(self):
        a = Parameter("a", rand((6,)))
        idx = np.array([0, 2, 2, 5, 0])
        check(lambda: quadratic(ad.gather(a, idx)), [a])

    def test_reshape_transpose(self):
        a = Parameter("a", rand((2, 3, 4)))
        check(lambda: quadratic(ad.transpose_last(ad.reshape(a, (6, 4)))), [a])

    def test_exp(self):
        a = Parameter("a", rand((3, 3), scale=0.5))
        check(lambda: quadratic(ad.texp(a)), [a])

    def test_log2(self):
        a = Parameter("a", np.abs(rand((3, 3))) + 0.5)
        check(lambda: quadratic(ad.tlog2(a)), [a])

    def test_sigmoid(self):
        a = Parameter("a", rand((3, 4)))
        check(lambda: quadratic(ad.sigmoid(a)), [a])

    def test_log2_sigmoid(self):
        a = Parameter("a", rand((3, 4)))
        check(lambda: quadratic(ad.log2_sigmoid(a)), [a])

    def test_silu(self):
        a = Parameter("a", rand((3, 4)))
        check(lambda: quadratic(ad.silu(a)), [a])

    def test_leaky_relu_away_from_kink(self):
        # resample-style guard: keep pre-activations out of |x| < 1e-3
        vals = rand((4, 5), seed=5)
        vals = np.where(np.abs(vals) < 1e-3, 0.5, vals)
        a = Parameter("a", vals)
        check(lambda: quadratic(ad.leaky_relu(a, 0.01)), [a])

    def test_sqrt(self):
        a = Parameter("a", np.abs(rand((3, 4))) + 0.1)
        check(lambda: quadratic(ad.tsqrt(a)), [a])

    def test_sum_axis(self):
        a = Parameter("a", rand((2, 3, 4)))
        check(lambda: quadratic(ad.tsum(a, axis=1)), [a])

    def test_cast(self):
        a = Parameter("a", rand((3, 3)))
        check(lambda: quadratic(ad.cast(a, np.float64)), [a])

    def test_softmax_masked(self):
        a = Parameter("a", rand((2, 4, 5)))
        mask = np.ones((2, 1, 5), bool)
        mask[0, 0, 3:] = False
        check(lambda: quadratic(ad.softmax_masked(a, mask)), [a])

    def test_mean_valid(self):
        a = Parameter("a", rand((2, 5, 3)))
        mask = np.ones((2, 5), bool)
        mask[1, 3:] = False
        check(lambda: quadratic(ad.mean_valid(a, mask)), [a])

    def test_conv1d(self):
        x = Parameter("x", rand((2, 9, 3)))
        w = Parameter("w", rand((3, 3, 4), seed=1))
        b = Parameter("b", rand((4,), seed=2))
        check(lambda: quadratic(ad.conv1d_valid(x, w, b)), [x, w, b])

    def test_batch_norm_train(self):
        x = Parameter("x", rand((2, 6, 3)))
        g = Parameter("g", np.abs(rand((3,), seed=1)) + 0.5)
        b = Parameter("b", rand((3,), seed=2))
        mask = np.ones((2, 6), bool)
        mask[0, 4:] = False
        state = BatchNormState(3, dtype=np.float64)
        check(lambda: quadratic(ad.batch_norm_1d_masked(x, g, b, mask, state, True)),
              [x, g, b], h=1e-4)

    def test_batch_norm_eval(self):
        x = Parameter("x", rand((2, 6, 3)))
        g = Parameter("g", np.abs(rand((3,), seed=1)) + 0.5)
        b = Parameter("b", rand((3,), seed=2))
        mask = np.ones((2, 6), bool)
        state = BatchNormState(3, dtype=np.float64)
        state.running_mean = rand((3,), seed=3)
        state.running_var = np.abs(rand((3,), seed=4)) + 0.5
        check(lambda: quadratic(ad.batch_norm_1d_masked(x, g, b, mask, state, False)), [x, g, b])

    def test_rms_norm(self):
        x = Parameter("x", rand((2, 5, 6)))
        g = Parameter("g", np.abs(rand((6,), seed=1)) + 0.5)
        check(lambda: quadratic(ad.rms_norm(x, g)), [x, g])

    def test_rope(self):
        x = Parameter("x", rand((2, 5, 8)))
        check(lambda: quadratic(ad.rope_rotate(x, np.arange(5))), [x])

    def test_rope_softmax_composite(self):
        x = Parameter("x", rand((2, 5, 8)))
        mask = np.ones((2, 5, 5), bool)

        def f():
            r = ad.rope_rotate(x, np.arange(5))
            scores = ad.matmul(r, ad.transpose_last(r))
            return quadratic(ad.softmax_masked(scores, mask))

        check(f, [x], tol=1e-6)


class TestRope:
    def test_position_zero_is_identity(self):
        x = rand((1, 6, 8))
        out = ad.rope_rotate(Tensor(x), np.zeros(6))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_norm_preservation(self):
        x = rand((3, 7, 16), seed=2)
        out = ad.rope_rotate(Tensor(x), np.arange(7))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1),
                                   np.linalg.norm(x, axis=-1), atol=1e-6)

    @pytest.mark.parametrize("dim", [8, 16, 32])
    @pytest.mark.parametrize("shift", [1, 5, 17])
    def test_shift_invariance(self, dim, shift):
        rng = np.random.default_rng(dim * 100 + shift)
        q = rng.normal(size=(1, dim))
        k = rng.normal(size=(1, dim))

        def dot(i, j):
            rq = ad.rope_rotate(Tensor(q), np.array([i])).data[0]
            rk = ad.rope_rotate(Tensor(k), np.array([j])).data[0]
            return float(rq @ rk)

        assert abs(dot(3, 11) - dot(3 + shift, 11 + shift)) < 1e-9

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError):
            ad.rope_rotate(Tensor(rand((1, 2, 7))), np.arange(2))


class TestBatchNorm:
    def test_eval_identity_with_unit_stats(self):
        x = rand((2, 4, 3))
        g = Parameter("g", np.ones(3))
        b = Parameter("b", np.zeros(3))
        state = BatchNormState(3, dtype=np.float64)
        out = ad.batch_norm_1d_masked(Tensor(x), g, b, np.ones((2, 4), bool), state, False)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_train_statistics(self):
        x = rand((3, 8, 4), seed=9, scale=3.0)
        mask = np.ones((3, 8), bool)
        mask[2, 5:] = False
        g = Parameter("g", np.ones(4))
        b = Parameter("b", np.zeros(4))
        out = ad.batch_norm_1d_masked(Tensor(x), g, b, mask, BatchNormState(4, np.float64), True)
        valid = out.data[mask]
        np.testing.assert_allclose(valid.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(valid.var(axis=0), 1.0, atol=1e-5)

    def test_padding_does_not_change_statistics(self):
        x = rand((2, 5, 3), seed=10)
        mask = np.ones((2, 5), bool)
        g = Parameter("g", np.ones(3))
        b = Parameter("b", np.zeros(3))
        out1 = ad.batch_norm_1d_masked(Tensor(x), g, b, mask, BatchNormState(3, np.float64), True)
        padded = np.concatenate([x, np.full((2, 2, 3), 123.0)], axis=1)
        pmask = np.concatenate([mask, np.zeros((2, 2), bool)], axis=1)
        out2 = ad.batch_norm_1d_masked(Tensor(padded), g, b, pmask, BatchNormState(3, np.float64), True)
        np.testing.assert_allclose(out2.data[:, :5], out1.data, atol=1e-9)
        assert np.all(out2.data[:, 5:] == 0.0)

    def test_masked_positions_have_no_gradient_effect(self):
        # values and gradients at valid positions unchanged by padding
        x1 = Parameter("x1", rand((2, 5, 3), seed=11))
        g = Parameter("g", np.ones(3))
        b = Parameter("b", np.zeros(3))
        mask = np.ones((2, 5), bool)
        w = rand((2, 5, 3), seed=12)
        out1 = ad.batch_norm_1d_masked(x1, g, b, mask, BatchNormState(3, np.float64), False)
        ad.backward(ad.tsum(ad.mul(out1, Tensor(w))))

        padded = np.concatenate([x1.data, np.full((2, 3, 3), 9.0)], axis=1)
        x2 = Parameter("x2", padded)
        pmask = np.concatenate([mask, np.zeros((2, 3), bool)], axis=1)
        wp = np.concatenate([w, rand((2, 3, 3), seed=13)], axis=1)
        out2 = ad.batch_norm_1d_masked(x2, g, b, pmask, BatchNormState(3, np.float64), False)
        ad.backward(ad.tsum(ad.mul(out2, Tensor(wp))))
        np.testing.assert_allclose(x2.grad[:, :5], x1.grad, atol=1e-12)
        assert np.all(x2.grad[:, 5:] == 0.0)


def test_forward_determinism():
    x = Tensor(rand((2, 6, 8)))
    g = Parameter("g", np.ones(8))
    a = ad.rms_norm(x, g).data
    b = ad.rms_norm(x, g).data
    np.testing.assert_array_equal(a, b)
