import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlpose import tensor as T
from vlpose.gradcheck import grad_check
from vlpose.tensor import ParamSet, ShapeError, Tensor


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = T.matmul(eye, eye)
        np.testing.assert_array_equal(out.data, np.eye(2, dtype=np.float32))

    def test_hand_computed(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_allclose(T.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_matches_finite_difference(self):
        a, b = rand((5, 7), 1), rand((7, 3), 2)
        report = grad_check(lambda xs: T.sum_all(T.matmul(xs[0], xs[1])), [Tensor(a), Tensor(b)])
        assert report.passed, str(report)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_stability_under_large_inputs(self):
        out = T.softmax_lastdim(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, seed, rows, cols):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
        out = T.softmax_lastdim(Tensor(x)).data
        assert ((out >= 0) & (out <= 1)).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_grad_matches_finite_difference(self):
        x = rand((4, 6), 3)
        report = grad_check(lambda xs: T.sum_all(T.mul(T.softmax_lastdim(xs[0]), rand((4, 6), 9))), [Tensor(x)])
        assert report.passed, str(report)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_population_variance(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_grad_matches_finite_difference(self):
        x, g, b = rand((3, 8), 4), rand((8,), 5) * 0.5 + 1.0, rand((8,), 6)
        probe = rand((3, 8), 10)
        report = grad_check(
            lambda xs: T.sum_all(T.mul(T.layer_norm(xs[0], xs[1], xs[2]), probe)),
            [Tensor(x), Tensor(g), Tensor(b)],
        )
        assert report.passed, str(report)


def deconv_scatter_oracle(x, w, stride=2, pad=1):
    """Direct scatter-accumulate transposed convolution."""
    c_in, h, wd = x.shape
    _, c_out, kh, kw = w.shape
    out_h = (h - 1) * stride - 2 * pad + kh
    out_w = (wd - 1) * stride - 2 * pad + kw
    out = np.zeros((c_out, out_h, out_w), dtype=np.float64)
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                for o in range(c_out):
                    for ki in range(kh):
                        for kj in range(kw):
                            oi, oj = i * stride + ki - pad, j * stride + kj - pad
                            if 0 <= oi < out_h and 0 <= oj < out_w:
                                out[o, oi, oj] += x[c, i, j] * w[c, o, ki, kj]
    return out


class TestDeconv2d:
    def test_all_ones_kernel_matches_scatter_oracle(self):
        x = np.arange(1, 5, dtype=np.float64).reshape(1, 2, 2)
        w = np.ones((1, 1, 4, 4))
        out = T.deconv2d(Tensor(x), Tensor(w)).data
        assert out.shape == (1, 4, 4)
        np.testing.assert_allclose(out, deconv_scatter_oracle(x, w), atol=1e-6)

    def test_random_matches_scatter_oracle(self):
        x, w = rand((3, 4, 5), 7), rand((3, 2, 4, 4), 8)
        np.testing.assert_allclose(T.deconv2d(Tensor(x), Tensor(w)).data,
                                   deconv_scatter_oracle(x, w), atol=1e-10)

    def test_zero_input_zero_bias(self):
        out = T.deconv2d(Tensor(np.zeros((2, 3, 3))), Tensor(rand((2, 4, 4, 4), 9)),
                         Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel mismatch"):
            T.deconv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 4, 4, 4))))

    @given(st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_output_exactly_doubles(self, h, w):
        out = T.deconv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((1, 2, 4, 4))))
        assert out.data.shape == (2, 2 * h, 2 * w)

    def test_grad_matches_finite_difference(self):
        x, w, b = rand((3, 4, 4), 11), rand((3, 5, 4, 4), 12) * 0.3, rand((5,), 13)
        probe = rand((5, 8, 8), 14)
        report = grad_check(
            lambda xs: T.sum_all(T.mul(T.deconv2d(xs[0], xs[1], xs[2]), probe)),
            [Tensor(x), Tensor(w), Tensor(b)],
        )
        assert report.passed, str(report)


class TestConv1x1:
    def test_identity_weight_permutes_channels(self):
        x = rand((3, 2, 2), 15)
        w = np.eye(3)[[2, 0, 1]]  # permutation matrix
        out = T.conv2d_1x1(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x[[2, 0, 1]], atol=1e-6)

    def test_zero_input_zero_bias(self):
        out = T.conv2d_1x1(Tensor(np.zeros((3, 4, 4))), Tensor(rand((5, 3), 16)), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_grad_matches_finite_difference(self):
        x, w, b = rand((3, 3, 2), 17), rand((4, 3), 18), rand((4,), 19)
        probe = rand((4, 3, 2), 20)
        report = grad_check(
            lambda xs: T.sum_all(T.mul(T.conv2d_1x1(xs[0], xs[1], xs[2]), probe)),
            [Tensor(x), Tensor(w), Tensor(b)],
        )
        assert report.passed, str(report)


class TestBatchNorm2d:
    def test_eval_mode_is_deterministic_affine(self):
        x = rand((3, 4, 4), 21)
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        mean, var = rand((3,), 22), np.abs(rand((3,), 23)) + 0.5
        out1 = T.batch_norm2d(Tensor(x), g, b, mean.copy(), var.copy(), training=False).data
        out2 = T.batch_norm2d(Tensor(x), g, b, mean.copy(), var.copy(), training=False).data
        assert np.array_equal(out1, out2)

    def test_training_updates_running_stats(self):
        x = rand((2, 5, 5), 24)
        mean, var = np.zeros(2), np.ones(2)
        T.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(1, 2)), atol=1e-6)

    @pytest.mark.parametrize("training", [True, False])
    def test_grad_matches_finite_difference(self, training):
        x, g, b = rand((2, 3, 3), 25), rand((2,), 26) * 0.2 + 1.0, rand((2,), 27)
        probe = rand((2, 3, 3), 28)
        mean, var = rand((2,), 29), np.abs(rand((2,), 30)) + 0.5

        def f(xs):
            return T.sum_all(T.mul(
                T.batch_norm2d(xs[0], xs[1], xs[2], mean.copy(), var.copy(), training=training), probe))

        report = grad_check(f, [Tensor(x), Tensor(g), Tensor(b)])
        assert report.passed, str(report)


class TestDropPath:
    def test_eval_mode_is_identity(self):
        x = Tensor(rand((3, 3), 31))
        assert T.drop_path(x, 0.5, training=False) is x

    def test_training_scales_or_drops(self):
        x = Tensor(rand((3, 3), 32))
        seen = set()
        for seed in range(40):
            out = T.drop_path(x, 0.5, training=True, rng=np.random.default_rng(seed))
            ratio = out.data / np.where(x.data == 0, 1, x.data)
            seen.add(round(float(ratio.reshape(-1)[0]), 6))
        assert seen == {0.0, 2.0}


class TestMiscOps:
    def test_relu_grad_is_exact_away_from_zero(self):
        x = rand((4, 4), 33)
        x[np.abs(x) < 0.2] = 0.5
        report = grad_check(lambda xs: T.sum_all(T.relu(xs[0])), [Tensor(x)], tol=1e-6)
        assert report.passed and report.max_rel_err < 1e-6, str(report)

    def test_add_broadcasting_grad(self):
        x, b = rand((3, 5), 34), rand((5,), 35)
        report = grad_check(
            lambda xs: T.sum_all(T.mul(T.add(xs[0], xs[1]), rand((3, 5), 36))),
            [Tensor(x), Tensor(b)],
        )
        assert report.passed, str(report)

    def test_concat_narrow_reshape_permute_grads(self):
        a, b = rand((2, 3), 37), rand((4, 3), 38)
        probe = rand((3, 4), 40)

        def f(xs):
            joined = T.concat([xs[0], xs[1]], axis=0)
            part = T.narrow(joined, 0, 1, 4)
            back = T.permute(T.reshape(part, (3, 4)), (1, 0))
            return T.sum_all(T.mul(back, probe.T))

        report = grad_check(f, [Tensor(a), Tensor(b)])
        assert report.passed, str(report)

    def test_power_and_sum_axis_grads(self):
        x = np.abs(rand((3, 4), 41)) + 0.5

        def f(xs):
            return T.sum_all(T.power(T.sum_axis(T.mul(xs[0], xs[0]), 1, keepdims=True), 0.5))

        report = grad_check(f, [Tensor(x)])
        assert report.passed, str(report)

    def test_forward_ops_stay_finite(self):
        x = Tensor(rand((3, 3), 42) * 100)
        for out in (T.relu(x), T.softmax_lastdim(x), T.mul(x, 3.0), T.add(x, x)):
            assert np.isfinite(out.data).all()

    def test_backward_frees_graph(self):
        x = Tensor(rand((2, 2), 43), requires_grad=True)
        y = T.sum_all(T.mul(x, x))
        y.backward()
        assert y._parents == () and y._backward is None
        assert x.grad is not None and x.grad.shape == (2, 2)


class TestParamSet:
    def test_name_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            ParamSet(params={"a": Tensor([1.0])}, trainable={"b": True})

    def test_apply_mask_sets_requires_grad(self):
        p = Tensor([1.0, 2.0])
        ps = ParamSet(params={"w": p}, trainable={"w": False})
        ps.apply_mask({"w": True})
        assert p.requires_grad and ps.trainable_names() == ["w"]

    def test_count_params_empty(self):
        assert T.count_params(ParamSet())["total"] == 0

    def test_count_params_matches_enumeration(self):
        ps = ParamSet(
            params={"enc.a.w": Tensor(np.zeros((3, 4))), "enc.b.w": Tensor(np.zeros(7)),
                    "dec.a.w": Tensor(np.zeros((2, 2)))},
            trainable={"enc.a.w": True, "enc.b.w": False, "dec.a.w": True},
        )
        counts = T.count_params(ps)
        assert counts == {"enc.a": 12, "enc.b": 7, "dec.a": 4, "total": 23}
        assert T.count_params(ps, "trainable")["total"] == 16
        assert T.count_params(ps, "frozen")["total"] == 7
