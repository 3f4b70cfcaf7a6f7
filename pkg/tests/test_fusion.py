import numpy as np
import pytest
from hypothesis import given, strategies as st

from m2hx import tensor as T
from m2hx.fusion import (MSCA, CrossTaskMixer, TaskAdaptor, TaskFusion, TaskSet, cross_scale_fuse)
from m2hx.gradcheck import grad_check
from m2hx.pyramid import SCALES
from m2hx.tensor import Tensor, TensorError

C = 8


def _states(rng, c=C, n=1, fill=None):
    return {k: Tensor(np.full((n, c, 2 ** (6 - k), 2 ** (6 - k)), fill) if fill is not None
                      else rng.standard_normal((n, c, 2 ** (6 - k), 2 ** (6 - k)))) for k in SCALES}


class TestTaskSet:
    def test_partner_defaults(self):
        ts = TaskSet()
        assert ts.partners["sem"] == ("depth", "edge") and ts.partners["norm"] == ("depth",)
        assert ts.mixed() == ("sem", "norm", "edge")

    def test_two_task_pairing(self):
        ts = TaskSet(("sem", "depth"))
        assert ts.partners == {"depth": (), "sem": ("depth",)}

    def test_self_partner_rejected(self):
        with pytest.raises(ValueError):
            TaskSet(("sem",), {"sem": ("sem",)})

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            TaskSet(("sem", "flow"))


class TestAdaptor:
    def test_top_boundary(self, rng):
        ad = TaskAdaptor(C, rng)
        s = _states(rng)
        assert np.array_equal(ad(s)[5].data, ad.branch[5](s[5]).data)

    def test_zero_states(self, rng):
        ad = TaskAdaptor(C, rng)
        for b in ad.branch.values():
            b.conv.bias.data[...] = 0.0
        f = ad(_states(rng, fill=0.0))
        assert all(np.all(v.data == 0) for v in f.values())

    @given(st.integers(0, 1000), st.sampled_from([4, 8]))
    def test_shapes(self, seed, c):
        r = np.random.default_rng(seed)
        s = _states(r, c)
        f = TaskAdaptor(c, r, groups=4)(s)
        assert all(f[k].shape == s[k].shape for k in SCALES)


class TestFuse:
    def test_single_level(self, rng):
        f = _states(rng, fill=0.0)
        f[2] = Tensor(rng.standard_normal(f[2].shape))
        assert np.array_equal(cross_scale_fuse(f)[2].data, f[2].data)

    def test_constants_accumulate(self):
        fused = cross_scale_fuse(_states(None, fill=0.3))
        assert np.allclose(fused[2].data, 4 * 0.3, atol=1e-14)

    def test_linearity(self, rng):
        f, g = _states(rng), _states(rng)
        both = cross_scale_fuse({k: f[k] + g[k] for k in SCALES})[2].data
        apart = cross_scale_fuse(f)[2].data + cross_scale_fuse(g)[2].data
        assert np.allclose(both, apart, atol=1e-12)


def _h(rng, tasks=("depth", "sem", "norm", "edge"), n=1, side=6):
    return {t: Tensor(rng.standard_normal((n, C, side, side))) for t in tasks}


class TestCTM:
    def test_zero_gate_is_one_point_five(self, rng):
        ctm = CrossTaskMixer(C, TaskSet(), rng)
        ctm.gate["depth"].weight.data[...] = 0.0
        ctm.gate["depth"].bias.data[...] = 0.0
        h = _h(rng)
        z, factor = ctm.modulate("depth", h["depth"])
        assert np.all(factor.data == 1.5)
        assert np.allclose(z.data, ctm.project["depth"](h["depth"]).data * 1.5)

    def test_empty_partners_is_conv(self, rng):
        ctm = CrossTaskMixer(C, TaskSet(), rng, enabled=False)
        h = _h(rng)
        assert np.array_equal(ctm(h, "sem").data, ctm.merge["sem"](h["sem"]).data)

    # fp64 sigmoid rounds to exactly 1 past logit ~36.7, so inputs stay at unit scale
    @given(st.integers(0, 1000), st.floats(0.1, 2.0))
    def test_factor_range(self, seed, scale):
        r = np.random.default_rng(seed)
        ctm = CrossTaskMixer(C, TaskSet(), r)
        rec = {}
        h = {t: v * scale for t, v in _h(r).items()}
        for t in ("sem", "norm", "edge"):
            ctm(h, t, rec)
        assert set(rec) == {("sem", "depth"), ("sem", "edge"), ("norm", "depth"), ("edge", "sem")}
        assert all(np.all((f.data > 1) & (f.data < 2)) for f in rec.values())

    def test_spatial_mismatch(self, rng):
        ctm = CrossTaskMixer(C, TaskSet(), rng)
        h = _h(rng)
        h["depth"] = Tensor(rng.standard_normal((1, C, 3, 3)))
        with pytest.raises(TensorError):
            ctm(h, "norm")


class TestMSCA:
    def test_identity_kernel_chain(self, rng):
        m = MSCA(C, 7, rng)
        for conv in (m.dw5, m.dw_row, m.dw_col):
            conv.weight.data[...] = 0.0
            kh, kw = conv.weight.shape[-2:]
            conv.weight.data[:, :, kh // 2, kw // 2] = 1.0
            conv.bias.data[...] = 0.0
        m.attn.weight.data[...] = 0.0
        m.attn.bias.data[...] = 0.0
        u = rng.standard_normal((1, C, 5, 5))
        m2 = m.dw_col(m.dw_row(m.dw5(Tensor(u))))
        assert np.allclose(m.dw5(Tensor(u)).data, u)
        rec = {}
        out = m(Tensor(u), rec, "sem").data
        assert np.all(rec["sem"].data == 0.5)
        assert np.allclose(out, 1.5 * u, atol=1e-14)
        assert m2.shape == u.shape

    def test_chain_values(self, rng):
        """m0 = u, m1 = 2u, m2 = 4u with identity depthwise kernels."""
        m = MSCA(C, 3, rng)
        for conv in (m.dw5, m.dw_row, m.dw_col):
            conv.weight.data[...] = 0.0
            kh, kw = conv.weight.shape[-2:]
            conv.weight.data[:, :, kh // 2, kw // 2] = 1.0
            conv.bias.data[...] = 0.0
        m.attn.weight.data[...] = np.eye(C)[:, :, None, None]
        m.attn.bias.data[...] = 0.0
        u = rng.standard_normal((1, C, 4, 4))
        a = m.attention(Tensor(u)).data
        assert np.allclose(a, 1 / (1 + np.exp(-4 * u)), atol=1e-14)

    def test_attention_off_limit(self, rng):
        m = MSCA(C, 7, rng)
        m.attn.weight.data[...] = 0.0
        m.attn.bias.data[...] = -60.0
        u = rng.standard_normal((1, C, 5, 5))
        assert np.allclose(m(Tensor(u)).data, u, atol=1e-20)

    @given(st.integers(0, 1000))
    def test_recompute(self, seed):
        r = np.random.default_rng(seed)
        m = MSCA(C, 7, r)
        u = r.standard_normal((1, C, 6, 6)) * 3
        rec = {}
        out = m(Tensor(u), rec, "x").data
        a = rec["x"].data
        assert np.all((a > 0) & (a < 1))
        assert np.max(np.abs(out - u * (1 + a))) <= 1e-6

    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_saturating_logits_stay_open(self, rng, dtype):
        m = MSCA(C, 7, rng, dtype=dtype)
        m.attn.bias.data[: C // 2] = 500.0
        m.attn.bias.data[C // 2:] = -500.0
        u = rng.standard_normal((1, C, 4, 4)).astype(dtype)
        rec = {}
        out = m(Tensor(u), rec, "x").data
        a = rec["x"].data
        assert np.all((a > 0) & (a < 1))
        assert np.max(np.abs(out - u * (1 + a))) <= 1e-6

    def test_init_not_saturated(self, rng):
        m = MSCA(C, 7, rng)
        a = m.attention(Tensor(rng.standard_normal((2, C, 8, 8)) * 5)).data
        assert 1e-3 < a.min() and a.max() < 1 - 1e-3

    def test_even_kernel(self, rng):
        with pytest.raises(ValueError):
            MSCA(C, 6, rng)


class TestTaskFusion:
    def test_depth_bypasses(self, rng):
        tf = TaskFusion(C, TaskSet(), rng)
        out = tf(_states(rng))
        assert out.refined["depth"] is out.h["depth"]
        assert set(out.u) == {"sem", "norm", "edge"}

    def test_toggle_changes_function(self, rng):
        s = _states(rng)
        on = TaskFusion(C, TaskSet(), np.random.default_rng(2))(s)
        off = TaskFusion(C, TaskSet(), np.random.default_rng(2), ctm=False, msca=False)(s)
        assert not np.allclose(on.refined["sem"].data, off.refined["sem"].data)

    def test_gradcheck(self, rng):
        tf = TaskFusion(4, TaskSet(), rng, groups=2)
        w = {t: Tensor(rng.standard_normal((1, 4, 8, 8))) for t in ("depth", "sem", "norm", "edge")}
        base = rng.standard_normal((1, 4, 1, 1))

        def f(x):
            s = {5: x * 1.5}
            for k in (4, 3, 2):
                s[k] = T.upsample_bilinear(s[k + 1], 2) * 0.5 + 0.1
            return sum((v * w[t]).sum() for t, v in tf(s).refined.items())
        assert grad_check(f, Tensor(base)) <= 1e-4
