import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _cases import PRIMITIVE_CASES, check_gradients
from hybridtune import tensor as T
from hybridtune.errors import ConfigurationError, ContractError, DimensionError, LifecycleError, NumericError
from hybridtune.tensor import Graph, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestRegistry:
    def test_is_immutable(self):
        ops = T.core_op_set()
        with pytest.raises(TypeError):
            ops["matmul"] = None

    def test_every_primitive_has_a_gradient_case(self):
        assert set(T.OPS) == set(PRIMITIVE_CASES)

    def test_required_primitives_present(self):
        for name in ("matmul", "add", "mul", "layer_norm", "softmax", "gelu", "relu", "dropout",
                     "global_avg_pool", "adaptive_avg_pool"):
            assert name in T.OPS

    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_gradients_match_finite_differences(self, name):
        rng = np.random.default_rng(sum(map(ord, name)))
        for _ in range(20):
            fn, inputs = PRIMITIVE_CASES[name](rng)
            assert check_gradients(fn, inputs, rng) < 1e-5


class TestElementary:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_layer_norm_of_constant_is_zero(self):
        out = T.layer_norm(Tensor(np.full(7, 3.25)))
        assert np.abs(out.data).max() < 1e-6

    def test_gelu_fixed_point(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_shape_mismatch_names_operands(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            T.exp(Tensor([1.0, np.nan]))

    def test_dropout_identity_in_eval(self):
        x = np.arange(6.0)
        np.testing.assert_array_equal(T.dropout(Tensor(x), 0.5, training=False).data, x)

    def test_dropout_seeded_mask(self):
        x = Tensor(np.ones(1000))
        a = T.dropout(x, 0.3, training=True, seed=7).data
        b = T.dropout(x, 0.3, training=True, seed=7).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1.0 / 0.7}

    def test_dropout_training_needs_seed_source(self):
        with pytest.raises(ContractError):
            T.dropout(Tensor(np.ones(3)), 0.1, training=True)


class TestRfft2Filter:
    def test_identity(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
        out = T.rfft2_filter(Tensor(f), Tensor(np.ones(3))).data
        assert np.abs(out - f).max() <= 1e-6 * np.abs(f).max()

    def test_half_is_spatial_half(self):
        f = np.random.default_rng(1).normal(size=(1, 4, 7, 7))
        out = T.rfft2_filter(Tensor(f), Tensor(np.full(4, 0.5))).data
        np.testing.assert_allclose(out, 0.5 * f, atol=1e-6)

    def test_hand_case(self):
        out = T.rfft2_filter(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), Tensor([2.0])).data
        np.testing.assert_allclose(out[0, 0], [[2, 4], [6, 8]], atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.rfft2_filter(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones(2)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31))
    def test_channel_scaling_and_parseval(self, b, c, h, w, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(b, c, h, w))
        theta = rng.normal(size=c)
        out = T.rfft2_filter(Tensor(f), Tensor(theta)).data
        assert np.abs(out - theta[None, :, None, None] * f).max() <= 1e-6 * max(np.abs(f).max(), 1e-12)
        energy = (np.abs(np.fft.fft2(out)) ** 2).sum()
        expected = sum(theta[k] ** 2 * (np.abs(np.fft.fft2(f[:, k])) ** 2).sum() for k in range(c))
        assert abs(energy - expected) <= 1e-5 * max(expected, 1e-12)

    def test_theta_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(2, 3, 4, 6))
        theta = rng.normal(size=3)

        def loss(th):
            return float((T.rfft2_filter(Tensor(f), Tensor(th)).data ** 2).sum())

        t = leaf(theta)
        out = T.rfft2_filter(Tensor(f), t)
        (g,) = T.backward(T.tsum(T.mul(out, out)), wrt=[t])
        np.testing.assert_allclose(g, T.finite_diff_grad(loss, theta), rtol=1e-5, atol=1e-8)


def direct_conv(f, k):
    """Nested-loop zero-padded cross-correlation for one channel."""
    h, w = f.shape
    r = k.shape[0] // 2
    out = np.zeros_like(f)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        out[i, j] += k[di + r, dj + r] * f[y, x]
    return out


class TestConvolutions:
    def test_identity_kernel(self):
        f = np.random.default_rng(0).normal(size=(1, 2, 5, 5))
        k = np.zeros((2, 3, 3))
        k[:, 1, 1] = 1.0
        np.testing.assert_array_equal(T.depthwise_conv2d(Tensor(f), Tensor(k)).data, f)

    def test_uniform_kernel_on_constant(self):
        f = np.full((1, 1, 5, 5), 2.5)
        out = T.depthwise_conv2d(Tensor(f), Tensor(np.full((1, 3, 3), 1 / 9))).data[0, 0]
        np.testing.assert_allclose(out[1:-1, 1:-1], 2.5)
        np.testing.assert_allclose(out[0, 0], 2.5 * 4 / 9)
        np.testing.assert_allclose(out[0, 2], 2.5 * 6 / 9)

    def test_hand_kernel_vs_nested_loops(self):
        f = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.array([[[0.0, 1.0, 2.0], [-1.0, 0.5, 0.0], [3.0, 0.0, -2.0]]])
        expected = np.array([[-8.0, -0.5, 12.0], [-10.5, 6.0, 21.5], [14.0, 11.5, 2.0]])
        np.testing.assert_allclose(direct_conv(f[0, 0], k[0]), expected)
        np.testing.assert_allclose(T.depthwise_conv2d(Tensor(f), Tensor(k)).data[0, 0], expected)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([1, 3, 5, 7]), st.integers(1, 8), st.integers(0, 2**31))
    def test_depthwise_matches_direct(self, c, k, n, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(1, c, n, n + 1))
        kern = rng.normal(size=(c, k, k))
        out = T.depthwise_conv2d(Tensor(f), Tensor(kern)).data
        for ch in range(c):
            np.testing.assert_allclose(out[0, ch], direct_conv(f[0, ch], kern[ch]), atol=1e-10)

    def test_channels_are_independent(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(1, 3, 6, 6))
        k = rng.normal(size=(3, 3, 3))
        base = T.depthwise_conv2d(Tensor(f), Tensor(k)).data
        f2 = f.copy()
        f2[0, 1] += 10
        moved = T.depthwise_conv2d(Tensor(f2), Tensor(k)).data
        np.testing.assert_array_equal(base[0, [0, 2]], moved[0, [0, 2]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            T.depthwise_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 2, 2))))

    def test_pointwise_identity(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(T.pointwise_conv2d(Tensor(f), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, f)

    def test_pointwise_sum(self):
        f = np.stack([np.full((3, 3), 2.0), np.full((3, 3), 5.0)])[None]
        np.testing.assert_allclose(T.pointwise_conv2d(Tensor(f), Tensor([[1.0, 1.0]])).data, 7.0)

    def test_pointwise_vs_matmul(self):
        rng = np.random.default_rng(2)
        f, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3)), rng.normal(size=2)
        ref = (f.transpose(0, 2, 3, 1).reshape(-1, 3) @ w.T + b).reshape(2, 4, 5, 2).transpose(0, 3, 1, 2)
        np.testing.assert_allclose(T.pointwise_conv2d(Tensor(f), Tensor(w), Tensor(b)).data, ref, atol=1e-6)

    def test_pointwise_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.pointwise_conv2d(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((2, 4))))


def bilinear_reference(f, h_out, w_out):
    h, w = f.shape
    out = np.zeros((h_out, w_out))
    for o in range(h_out):
        for p in range(w_out):
            y = min(max((o + 0.5) * h / h_out - 0.5, 0), h - 1)
            x = min(max((p + 0.5) * w / w_out - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[o, p] = ((1 - fy) * (1 - fx) * f[y0, x0] + (1 - fy) * fx * f[y0, x1]
                         + fy * (1 - fx) * f[y1, x0] + fy * fx * f[y1, x1])
    return out


class TestResampling:
    def test_constant_preserved(self):
        out = T.bilinear_upsample(Tensor(np.full((1, 2, 3, 3), 4.0)), 7, 9).data
        np.testing.assert_allclose(out, 4.0)

    def test_single_pixel(self):
        out = T.bilinear_upsample(Tensor(np.full((1, 1, 1, 1), -1.5)), 5, 3).data
        np.testing.assert_array_equal(out, -1.5)

    def test_two_by_two_table(self):
        f = np.array([[0.0, 1.0], [1.0, 2.0]])
        expected = np.array([[0.0, 0.25, 0.75, 1.0], [0.25, 0.5, 1.0, 1.25],
                             [0.75, 1.0, 1.5, 1.75], [1.0, 1.25, 1.75, 2.0]])
        np.testing.assert_allclose(bilinear_reference(f, 4, 4), expected)
        np.testing.assert_allclose(T.bilinear_upsample(Tensor(f[None, None]), 4, 4).data[0, 0], expected)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**31))
    def test_matches_formula(self, h, w, dh, dw, seed):
        f = np.random.default_rng(seed).normal(size=(h, w))
        out = T.bilinear_upsample(Tensor(f[None, None]), h + dh, w + dw).data[0, 0]
        np.testing.assert_allclose(out, bilinear_reference(f, h + dh, w + dw), atol=1e-12)

    def test_zero_extent(self):
        with pytest.raises(ConfigurationError):
            T.bilinear_upsample(Tensor(np.ones((1, 1, 2, 2))), 0, 4)

    def test_adaptive_pool_global(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 5, 7))
        out = T.adaptive_avg_pool(Tensor(f), (1, 1)).data
        np.testing.assert_allclose(out, f.mean(axis=(2, 3), keepdims=True))
        np.testing.assert_allclose(T.global_avg_pool(Tensor(f)).data, out)


class TestGraph:
    def test_sum_gradient_is_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        (g,) = T.backward(T.tsum(x), wrt=[x])
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_unused_leaf_gets_zeros(self):
        x, y = leaf([1.0, 2.0]), leaf([[3.0]])
        gx, gy = T.backward(T.tsum(T.mul(x, x)), wrt=[x, y])
        np.testing.assert_array_equal(gx, [2.0, 4.0])
        np.testing.assert_array_equal(gy, [[0.0]])

    def test_consumed_graph_raises(self):
        x = leaf([1.0, 2.0])
        y = T.tsum(T.exp(x))
        graph = Graph(y)
        graph.backward()
        with pytest.raises(LifecycleError):
            graph.backward()

    def test_retain_graph_allows_second_pass(self):
        x = leaf([1.0, 2.0])
        y = T.tsum(T.mul(x, x))
        first = T.backward(y, wrt=[x], retain_graph=True)[0]
        second = T.backward(y, wrt=[x])[0]
        np.testing.assert_array_equal(first, second)

    def test_seed_shape_checked(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(DimensionError):
            T.backward(T.exp(x), seed=np.ones(3))

    def test_shared_subexpression_accumulates(self):
        x = leaf(2.0)
        y = T.mul(x, x)
        z = T.add(y, y)
        (g,) = T.backward(z, wrt=[x])
        assert g == pytest.approx(8.0)

    def test_graph_is_topological(self):
        x = leaf([1.0])
        y = T.tsum(T.gelu(T.mul(x, 3.0)))
        order = Graph(y).order
        position = {id(t): i for i, t in enumerate(order)}
        for t in order:
            if t.node is not None:
                assert all(position[id(p)] < position[id(t)] for p in t.node.parents)

    def test_replay_bit_identical_with_dropout(self):
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(4, 6)))
        w = leaf(rng.normal(size=(6, 3)))
        y = T.tsum(T.gelu(T.dropout(T.matmul(x, w), 0.5, training=True, rng=rng)))
        np.testing.assert_array_equal(Graph(y).replay(), y.data)

    def test_tensor_backward_accumulates(self):
        x = leaf([1.0, -1.0])
        T.tsum(T.mul(x, 2.0)).backward()
        T.tsum(T.mul(x, 3.0)).backward()
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])


class TestFiniteDiff:
    def test_square(self):
        assert T.finite_diff_grad(lambda x: float(x**2), np.array(3.0)) == pytest.approx(6.0, abs=1e-6)

    def test_softmax_sum_is_constant(self):
        g = T.finite_diff_grad(lambda x: float(T.softmax(Tensor(x)).data.sum()), np.array([0.3, -1.0, 2.0]))
        assert np.abs(g).max() < 1e-8

    def test_nondeterministic_function(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            T.finite_diff_grad(lambda x: float(T.dropout(Tensor(x), 0.5, True, rng=rng).data.sum()), np.ones(4))

    def test_layer_norm_against_backward(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 5))
        r = rng.normal(size=(3, 5))
        t = leaf(x)
        (g,) = T.backward(T.tsum(T.mul(T.layer_norm(t), r)), wrt=[t])
        numeric = T.finite_diff_grad(lambda a: float((T.layer_norm(Tensor(a)).data * r).sum()), x)
        assert T.rel_error(g, numeric) < 1e-5


class TestTensorFiles:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_roundtrip(self, arr):
        buf = io.BytesIO()
        T.write_tensor(buf, arr)
        buf.seek(0)
        np.testing.assert_array_equal(T.read_tensor(buf), arr)

    def test_header_is_text(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.zeros((2, 3)))
        assert buf.getvalue().startswith(b"shape: 2 3\n")
        assert len(buf.getvalue()) == len(b"shape: 2 3\n") + 24

    def test_named_roundtrip(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.ones(4, dtype=np.float32)}
        T.write_named_tensors(path, {"kind": "x", "n": 3}, tensors)
        header, back = T.read_named_tensors(path)
        assert header == {"kind": "x", "n": "3"}
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
