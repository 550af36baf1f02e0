import itertools

import numpy as np
import pytest

from lobeseg import functional as F
from lobeseg import gradcheck as gc
from lobeseg.kernels import (
    MAX_COL_ELEMENTS,
    DimensionError,
    conv3d_fast,
    conv3d_naive,
    out_size,
    transposed_size,
)
from lobeseg.tensor import ContractError, Tensor, get_default_dtype, no_grad, precision


def direct_conv(x, w, b, stride, pad):
    """Seven nested loops over (n, co, od, oh, ow, ci, kd/kh/kw); independent of the package."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((n, cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd] = x
    od, oh, ow = [(s + 2 * pad - k) // stride + 1 for s in (d, h, wd)]
    y = np.zeros((n, cout, od, oh, ow))
    for b_, co, i, j, l in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        acc = 0.0 if b is None else b[co]
        for ci in range(cin):
            for a, bb, c in itertools.product(range(k), repeat=3):
                acc += xp[b_, ci, i * stride + a, j * stride + bb, l * stride + c] * w[co, ci, a, bb, c]
        y[b_, co, i, j, l] = acc
    return y


class TestTensorBasics:
    def test_default_precision_is_32_bit(self):
        assert get_default_dtype() == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float32

    def test_precision_context(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_sum_grad_is_ones(self, f64):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
        F.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_two_consumers_accumulate(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        F.sum(F.add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_diamond_graph(self, f64):
        x = Tensor([3.0], requires_grad=True)
        a = F.scale(x, 2.0)
        b = F.mul(x, x)
        F.sum(F.add(a, b)).backward()
        assert x.grad[0] == pytest.approx(2.0 + 2 * 3.0)

    def test_non_scalar_backward_is_contract_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            F.scale(x, 2.0).backward()

    def test_graph_released_after_backward(self, f64):
        x = Tensor([1.0], requires_grad=True)
        y = F.sum(F.scale(x, 3.0))
        y.backward()
        assert y._node is None

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = F.scale(x, 2.0)
        assert not y.requires_grad and y.is_leaf

    def test_deep_chain_does_not_recurse(self, f64):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = F.add(y, 1.0)
        F.sum(y).backward()
        assert x.grad[0] == 1.0

    def test_grad_shape_matches_data(self, f64, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
        F.sum(F.conv3d(x, w, None, 1, 1)).backward()
        assert x.grad.shape == x.shape and w.grad.shape == w.shape


class TestConv3d:
    def test_identity_kernel(self, f64, rng):
        x = rng.standard_normal((1, 1, 4, 4, 4))
        y = F.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(y.data, x)

    def test_constant_sum(self):
        y = F.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 2, 2, 2))), None, 1, 0)
        assert y.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(y.data, 8.0)

    def test_matches_direct_loops(self, f64, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        y = F.conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 0)
        np.testing.assert_allclose(y.data, direct_conv(x, w, b, 1, 0), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1), (3, 2, 3)])
    def test_shape_formula_and_oracle(self, f64, rng, stride, pad, k):
        x = rng.standard_normal((2, 2, 5, 6, 4))
        w = rng.standard_normal((2, 2, k, k, k))
        y = F.conv3d(Tensor(x), Tensor(w), None, stride, pad)
        exp = tuple((s + 2 * pad - k) // stride + 1 for s in x.shape[2:])
        assert y.shape[2:] == exp
        np.testing.assert_allclose(y.data, direct_conv(x, w, None, stride, pad), atol=1e-10, rtol=0)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4)))
        w = Tensor(np.zeros((3, 5, 3, 3, 3)))
        with pytest.raises(DimensionError) as err:
            F.conv3d(x, w)
        assert "(1, 2, 4, 4, 4)" in str(err.value) and "(3, 5, 3, 3, 3)" in str(err.value)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(DimensionError):
            F.conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))

    def test_naive_oracle_agrees_with_direct_loops(self, rng):
        x = rng.standard_normal((1, 2, 4, 3, 4))
        w = rng.standard_normal((2, 2, 2, 2, 2))
        np.testing.assert_allclose(conv3d_naive(x, w, None, 2, 1), direct_conv(x, w, None, 2, 1), atol=1e-12)

    def test_slab_chunking_is_exact(self, rng, monkeypatch):
        import lobeseg.kernels as K

        x = rng.standard_normal((1, 3, 8, 8, 8))
        w = rng.standard_normal((2, 3, 3, 3, 3))
        whole = conv3d_fast(x, w, 1, 1)
        monkeypatch.setattr(K, "MAX_COL_ELEMENTS", 3 * 27 * 64)
        chunked = K.conv3d_fast(x, w, 1, 1)
        assert MAX_COL_ELEMENTS > 3 * 27 * 64
        np.testing.assert_array_equal(whole, chunked)

    def test_out_size_helpers(self):
        assert out_size(32, 2, 2, 0) == 16
        assert transposed_size(2, 2, 2, 0) == 4


class TestConvTranspose3d:
    def test_kernel_replication(self):
        y = F.conv_transpose3d(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2, 2))), None, 2, 0)
        assert y.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(y.data, 2.5)

    def test_stride_two_shape(self):
        y = F.conv_transpose3d(Tensor(np.ones((1, 3, 2, 2, 2))), Tensor(np.ones((3, 4, 2, 2, 2))), None, 2, 0)
        assert y.shape == (1, 4, 4, 4, 4)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 0, 2), (2, 1, 3), (1, 1, 3)])
    def test_adjoint_identity(self, f64, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 5, 5, 5))
        w = rng.standard_normal((4, 3, k, k, k))
        y_shape = F.conv3d(Tensor(x), Tensor(w), None, stride, pad).shape
        y = rng.standard_normal(y_shape)
        lhs = np.sum(F.conv3d(Tensor(x), Tensor(w), None, stride, pad).data * y)
        # conv_transpose3d takes (Cin_of_transpose, Cout, k, k, k) = conv weight as is
        xt = F.conv_transpose3d(Tensor(y), Tensor(w), None, stride, pad).data
        if xt.shape != x.shape:  # output_padding-free transpose may trim the trailing edge
            xt = np.pad(xt, [(0, 0), (0, 0)] + [(0, a - b) for a, b in zip(x.shape[2:], xt.shape[2:])])
        rhs = np.sum(x * xt)
        assert lhs == pytest.approx(rhs, rel=1e-8, abs=1e-8)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv_transpose3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2, 2))), None, 2, 0)


class TestActivations:
    def test_prelu_definition(self):
        a = Tensor([0.25])
        x = Tensor(np.array([3.0, -2.0]).reshape(1, 1, 2))
        np.testing.assert_allclose(F.prelu(x, a).data.ravel(), [3.0, -0.5])

    def test_prelu_zero_slope_is_relu(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        np.testing.assert_array_equal(F.prelu(x, Tensor(np.zeros(3))).data, np.maximum(x.data, 0))

    def test_prelu_grad_for_negative_inputs_is_slope(self, f64):
        x = Tensor(-np.ones((1, 2, 3)), requires_grad=True)
        a = Tensor([0.1, 0.3])
        F.sum(F.prelu(x, a)).backward()
        np.testing.assert_allclose(x.grad[0, 0], 0.1)
        np.testing.assert_allclose(x.grad[0, 1], 0.3)

    def test_softmax_uniform(self):
        y = F.softmax_channels(Tensor(np.zeros((1, 2, 2, 2, 2))))
        np.testing.assert_allclose(y.data, 0.5)

    def test_softmax_closed_form(self, f64):
        x = np.zeros((1, 2, 1, 1, 1))
        x[0, 0] = np.log(3.0)
        y = F.softmax_channels(Tensor(x)).data.ravel()
        np.testing.assert_allclose(y, [0.75, 0.25], atol=1e-15)

    def test_softmax_shift_invariance_and_sum(self, f64, rng):
        x = rng.standard_normal((2, 4, 3, 3, 3)) * 5
        shift = rng.standard_normal((2, 1, 3, 3, 3)) * 100
        a = F.softmax_channels(Tensor(x)).data
        b = F.softmax_channels(Tensor(x + shift)).data
        assert np.max(np.abs(a - b)) <= 1e-12
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_no_overflow(self):
        y = F.softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1, 1)))
        assert np.all(np.isfinite(y.data))

    def test_sigmoid_bounds_extreme(self):
        y = F.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])


class TestBatchNorm:
    def test_train_mode_standardizes(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 3 + 5)
        st = F.BatchNormState.create(3, dtype=np.float64)
        y = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st, "train").data
        mean = y.mean(axis=(0, 2, 3, 4))
        var = y.var(axis=(0, 2, 3, 4))
        assert np.max(np.abs(mean)) <= 1e-6
        assert np.max(np.abs(var - 1)) <= 1e-4

    def test_algebraic_inversion(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 4, 4)) * 2 + 1
        st = F.BatchNormState.create(3, eps=0.0, dtype=np.float64)
        mu = x.mean(axis=(0, 2, 3, 4))
        sd = x.std(axis=(0, 2, 3, 4))
        y = F.batch_norm(Tensor(x), Tensor(sd), Tensor(mu), st, "train").data
        np.testing.assert_allclose(y, x, atol=1e-5)

    def test_running_stats_momentum(self, f64, rng):
        x = rng.standard_normal((2, 2, 3, 3, 3)) + 4
        st = F.BatchNormState.create(2, dtype=np.float64)
        F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, "train")
        m = x.mean(axis=(0, 2, 3, 4))
        v = x.var(axis=(0, 2, 3, 4), ddof=1)
        np.testing.assert_allclose(st.running_mean, 0.1 * m)
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * v)

    def test_eval_uses_running_stats_deterministically(self, f64, rng):
        st = F.BatchNormState.create(2, dtype=np.float64)
        st.running_mean[:] = [1.0, -1.0]
        st.running_var[:] = [4.0, 0.25]
        x = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        y1 = F.batch_norm(x, g, b, st, "eval").data
        y2 = F.batch_norm(x, g, b, st, "eval").data
        np.testing.assert_array_equal(y1, y2)
        exp = (x.data - np.array([1.0, -1.0]).reshape(1, 2, 1, 1, 1)) / np.sqrt(
            np.array([4.0, 0.25]).reshape(1, 2, 1, 1, 1) + 1e-5)
        np.testing.assert_allclose(y1, exp)

    def test_constant_channel_is_finite(self):
        st = F.BatchNormState.create(1)
        y = F.batch_norm(Tensor(np.full((1, 1, 2, 2, 2), 7.0)), Tensor([1.0]), Tensor([0.0]), st, "train")
        assert np.all(np.isfinite(y.data)) and np.all(y.data == 0)


class TestDropout:
    def test_p_zero_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_array_equal(F.dropout(x, 0.0, "train", 1).data, x.data)

    def test_eval_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_array_equal(F.dropout(x, 0.9, "eval", 1).data, x.data)

    def test_known_mask(self, f64, rng):
        x = rng.standard_normal((4, 5))
        m = F.dropout_mask(x.shape, 0.5, 42)
        np.testing.assert_array_equal(F.dropout(Tensor(x), 0.5, "train", 42).data, x * m * 2)

    def test_mask_reproducible_and_rate(self):
        m1 = F.dropout_mask((100, 100), 0.3, 5)
        m2 = F.dropout_mask((100, 100), 0.3, 5)
        np.testing.assert_array_equal(m1, m2)
        assert abs(1 - m1.mean() - 0.3) < 0.03

    @pytest.mark.parametrize("p", [1.0, 1.5])
    def test_invalid_p(self, p):
        with pytest.raises(ValueError):
            F.dropout(Tensor(np.ones(3)), p, "train", 0)


class TestGradcheckSuite:
    @pytest.mark.parametrize("op", list(gc.OPS))
    def test_op_passes(self, op):
        res = gc.run_op(op)
        assert res.seeds >= 5
        assert res.max_rel_error < 1e-4, f"{op}: {res.max_rel_error:.3e}"

    def test_checker_detects_wrong_gradient(self):
        # a deliberately broken backward must be flagged
        with precision(np.float64):
            x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)

            def bad():
                return Tensor._from_op(np.array(np.sum(x.data**2)), "bad", [x], lambda g: [g * x.data])

            err = gc.check_case([x], bad, np.random.default_rng(0))
        assert err > 0.4
