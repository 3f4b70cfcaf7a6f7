import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from m2hx import tensor as T
from m2hx.gradcheck import grad_check
from m2hx.tensor import NonFiniteError, TapeError, Tensor, TensorError

finite = st.floats(-50, 50, allow_nan=False, width=64)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv(x, w, groups=1):
    cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((cout, h, wd))
    og = cout // groups
    for o in range(cout):
        g = o // og
        for c in range(cg):
            for i in range(h):
                for j in range(wd):
                    out[o, i, j] += np.sum(xp[g * cg + c, i:i + kh, j:j + kw] * w[o, c])
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2], [3, 4]])
        assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)

    def test_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[5.0], [6]]))
        assert np.array_equal(out.data, [[17], [39]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_depthwise_identity_kernel(self, rng):
        x = rng.standard_normal((3, 5, 6))
        w = np.zeros((3, 1, 3, 3))
        w[:, :, 1, 1] = 1.0
        assert np.array_equal(T.conv2d(Tensor(x), Tensor(w), groups=3).data, x)

    def test_depthwise_ones_constant(self):
        x = np.full((2, 6, 6), 1.5)
        out = T.conv2d(Tensor(x), Tensor(np.ones((2, 1, 3, 3))), groups=2).data
        assert np.allclose(out[:, 1:-1, 1:-1], 9 * 1.5)
        assert out[0, 0, 0] == pytest.approx(4 * 1.5)    # zero padding at the corner

    @pytest.mark.parametrize("shape,groups", [((4, 3, 3, 3), 1), ((4, 1, 3, 5), 4), ((6, 2, 3, 3), 2),
                                              ((5, 4, 1, 1), 1), ((4, 1, 1, 7), 4)])
    def test_naive_oracle(self, rng, shape, groups):
        cin = shape[1] * groups
        x, w = rng.standard_normal((cin, 5, 6)), rng.standard_normal(shape)
        out = T.conv2d(Tensor(x), Tensor(w), groups=groups).data
        assert np.max(np.abs(out - naive_conv(x, w, groups))) <= 1e-10

    def test_stride(self, rng):
        x, w = rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
        full = T.conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(T.conv2d(Tensor(x), Tensor(w), stride=2).data, full[:, ::2, ::2])

    def test_group_mismatch(self):
        with pytest.raises(TensorError):
            T.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), groups=2)

    def test_even_kernel_rejected(self):
        with pytest.raises(TensorError):
            T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestResample:
    def test_pool_mean_of_four(self):
        assert np.array_equal(T.pool2_avg(Tensor([[[1.0, 2], [3, 4]]])).data, [[[2.5]]])

    def test_up_constant(self):
        out = T.resample(Tensor(np.full((2, 3, 5), 3.25)), "up2_bilinear").data
        assert out.shape == (2, 6, 10) and np.all(out == 3.25)

    def test_up_then_pool_mean(self, rng):
        x = rng.standard_normal((3, 6, 6))
        y = T.pool2_avg(T.upsample_bilinear(Tensor(x), 2)).data
        assert abs(y.mean() - x.mean()) <= 1e-6

    def test_pool_preserves_mean(self, rng):
        x = rng.standard_normal((2, 8, 4))
        assert T.pool2_avg(Tensor(x)).data.mean() == pytest.approx(x.mean(), abs=1e-14)

    def test_odd_pool(self):
        with pytest.raises(TensorError):
            T.resample(Tensor(np.ones((1, 3, 4))), "pool2_avg")

    def test_interp_rows_stochastic(self):
        m = T.bilinear_matrix(5, 10)
        assert np.allclose(m.sum(1), 1.0)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)

    def test_arithmetic(self):
        assert np.allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75])

    def test_shift(self, rng):
        x = rng.standard_normal((3, 5))
        assert np.max(np.abs(T.softmax(Tensor(x + 17)).data - T.softmax(Tensor(x)).data)) <= 1e-12

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_sums_to_one(self, x):
        s = T.softmax(Tensor(x), axis=-1).data
        assert np.all(s > 0) or np.all(s >= 0)
        assert np.allclose(s.sum(-1), 1.0, atol=1e-6)


class TestNormalize:
    def test_constant_input(self):
        out = T.normalize(Tensor(np.full((2, 4, 3, 3), 2.0)), "group_norm", groups=2).data
        assert np.max(np.abs(out)) < 1e-6

    def test_group_mean_is_beta(self, rng):
        x = rng.standard_normal((2, 6, 4, 4))
        beta = Tensor(rng.standard_normal(6))
        gamma = Tensor(np.ones(6))
        out = T.group_norm(Tensor(x), 3, gamma, beta).data
        for g in range(3):
            block = out[:, 2 * g:2 * g + 2]
            expected = beta.data[2 * g:2 * g + 2].mean()
            assert np.allclose(block.mean(axis=(1, 2, 3)), expected, atol=1e-6)

    def test_group_equals_channels_is_instance_norm(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        out = T.normalize(Tensor(x), "group_norm", groups=4).data
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        assert np.allclose(out, (x - mu) / np.sqrt(var + 1e-5), atol=1e-10)

    def test_layer_norm(self, rng):
        x = rng.standard_normal((3, 8))
        out = T.normalize(Tensor(x), "layer_norm").data
        assert np.allclose(out.mean(-1), 0, atol=1e-10)

    def test_group_mismatch(self):
        with pytest.raises(TensorError):
            T.normalize(Tensor(np.ones((1, 6, 2, 2))), "group_norm", groups=4)


class TestBackward:
    def test_square(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward((x * x).sum())
        assert np.allclose(x.grad, 2 * x.data)

    def test_softmax_sum_constant(self, rng):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        T.backward(T.softmax(x, -1).sum())
        assert np.max(np.abs(x.grad)) < 1e-12

    def test_composite_vs_fd(self, rng):
        def f(x):
            y = T.tanh(T.matmul(x, Tensor(np.ones((4, 3))))) * T.sigmoid(x[:, :3])
            return (T.log_softmax(y, -1) * T.exp(x[:, 1:])).sum() + T.gelu(x).mean()
        assert grad_check(f, Tensor(rng.standard_normal((2, 4)))) <= 1e-5

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TapeError):
            T.backward(x * 2)

    def test_consumed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_sum_distributes(self, rng):
        xd = rng.standard_normal(5)
        def grad(fn):
            x = Tensor(xd, requires_grad=True)
            T.backward(fn(x))
            return x.grad
        f1 = lambda x: T.exp(x).sum()
        f2 = lambda x: (x * x * x).sum()
        assert np.allclose(grad(lambda x: f1(x) + f2(x)), grad(f1) + grad(f2))

    def test_non_finite_forward(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor(np.array([-1.0])))

    def test_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 3
        assert not y.requires_grad


class TestGradCheck:
    def test_quadratic(self, rng):
        assert grad_check(lambda x: (x * x).sum(), Tensor(rng.standard_normal(6)), 1e-5) <= 1e-7

    def test_sigmoid_at_zero(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        T.backward(T.sigmoid(x).sum())
        assert np.allclose(x.grad, 0.25)
        assert grad_check(lambda t: T.sigmoid(t).sum(), Tensor(np.zeros(4))) <= 1e-8

    def test_eps_range(self):
        with pytest.raises(TensorError):
            grad_check(lambda x: x.sum(), Tensor(np.ones(2)), eps=1e-2)

    def test_detects_wrong_gradient(self, rng):
        f = lambda x: T.scale_grad(x * x, 1.5).sum()
        assert grad_check(f, Tensor(rng.standard_normal(4) + 2)) > 0.1

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            grad_check(lambda x: T.log(x).sum(), Tensor(np.array([1e-6])), eps=1e-5)


def _ops():
    """(name, scalar function, input sampler) for every differentiable op."""
    w = lambda r, *s: Tensor(r.standard_normal(s))
    return [
        ("add", lambda x, r: (x + w(r, 3, 4)).sum() * 0 + (x + x * 0.5).sum(), (3, 4)),
        ("sub_mul_div", lambda x, r: ((x - 2.0) * x / (x * x + 1.0)).sum(), (3, 4)),
        ("power", lambda x, r: T.power(x * x + 1.0, 1.5).sum(), (5,)),
        ("exp_log", lambda x, r: T.log(T.exp(x) + 1.0).sum(), (5,)),
        ("sqrt", lambda x, r: T.sqrt(x * x + 0.5).sum(), (5,)),
        ("tanh", lambda x, r: (T.tanh(x) * x).sum(), (5,)),
        ("sigmoid", lambda x, r: (T.sigmoid(x) * x).sum(), (5,)),
        ("softplus", lambda x, r: (T.softplus(x) * x).sum(), (5,)),
        ("gelu", lambda x, r: (T.gelu(x) * x).sum(), (5,)),
        ("abs", lambda x, r: (T.absolute(x + 0.01) * x).sum(), (5,)),
        ("sum_mean", lambda x, r: (x.sum(axis=0) * x.mean(axis=1, keepdims=True)).sum(), (3, 4)),
        ("cumsum", lambda x, r: (T.cumsum(x, -1) ** 2).sum(), (2, 5)),
        ("reshape_transpose", lambda x, r: (x.reshape(4, 3).transpose(1, 0) * w(r, 3, 4)).sum(), (3, 4)),
        ("getitem", lambda x, r: (x[1:, ::2] ** 2).sum() + x[[0, 0, 2], [1, 1, 3]].sum(), (3, 4)),
        ("concat_stack", lambda x, r: (T.concat([x, x * 2], 0) ** 2).sum() + T.stack([x, x], 1)[:, 0].sum(), (3, 2)),
        ("expand_flip", lambda x, r: (T.flip(T.expand(x, (2, 3, 4)), 2) * w(r, 2, 3, 4)).sum(), (3, 4)),
        ("matmul", lambda x, r: (T.matmul(x, w(r, 4, 2)) ** 2).sum(), (3, 4)),
        ("linear", lambda x, r: (T.linear(x, w(r, 2, 4), w(r, 2)) ** 2).sum(), (2, 3, 4)),
        ("softmax", lambda x, r: (T.softmax(x, 1) * w(r, 3, 4)).sum(), (3, 4)),
        ("log_softmax", lambda x, r: (T.log_softmax(x, 0) * w(r, 3, 4)).sum(), (3, 4)),
        ("layer_norm", lambda x, r: (T.layer_norm(x, w(r, 4), w(r, 4)) * w(r, 3, 4)).sum(), (3, 4)),
        ("group_norm", lambda x, r: (T.group_norm(x, 2, w(r, 4), w(r, 4)) * w(r, 1, 4, 3, 3)).sum(), (1, 4, 3, 3)),
        ("conv_dense", lambda x, r: (T.conv2d(x, w(r, 3, 2, 3, 3), w(r, 3)) ** 2).sum(), (1, 2, 4, 5)),
        ("conv_dw", lambda x, r: (T.conv2d(x, w(r, 2, 1, 1, 5), groups=2) ** 2).sum(), (1, 2, 4, 5)),
        ("conv_1x1", lambda x, r: (T.conv2d(x, w(r, 3, 2, 1, 1)) ** 2).sum(), (2, 2, 3, 3)),
        ("conv_grouped", lambda x, r: (T.conv2d(x, w(r, 4, 1, 3, 3), groups=2) ** 2).sum(), (1, 2, 4, 4)),
        ("upsample", lambda x, r: (T.upsample_bilinear(x, 2) * w(r, 1, 2, 6, 8)).sum(), (1, 2, 3, 4)),
        ("pool", lambda x, r: (T.pool2_avg(x) ** 2).sum() + (T.avg_pool(x, 2) * 0.5).sum(), (1, 2, 4, 4)),
        ("clip", lambda x, r: (T.clip(x, -0.5, 0.5) * x).sum(), (6,)),
    ]


@pytest.mark.parametrize("name,f,shape", _ops(), ids=[o[0] for o in _ops()])
def test_op_gradients_ten_seeds(name, f, shape):
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.standard_normal(shape)
        if name == "clip":
            x = x[np.abs(np.abs(x) - 0.5) > 1e-3] if False else np.where(np.abs(np.abs(x) - 0.5) < 1e-3, 0.0, x)

        def fn(t, seed=seed):
            return f(t, np.random.default_rng(100 + seed))
        assert grad_check(fn, Tensor(x)) <= 1e-5, (name, seed)


def test_mac_counting(rng):
    with T.count_macs() as sink:
        T.conv2d(Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 2, 1, 1))))
    assert sum(sink.values()) == 96
