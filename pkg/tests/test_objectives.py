import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from m2hx import tensor as T
from m2hx.gradcheck import grad_check
from m2hx.objectives import (LossConfig, LossReport, UncertaintyParams, aux_loss, consistency_losses,
                             cross_entropy, depth_to_normals, downsample_target, edge_bce, one_hot,
                             semantic_boundary, task_loss, total_loss, uncertainty_floor, weighted_term)
from m2hx.tensor import Tensor, TensorError


class TestTaskLoss:
    def test_perfect_depth_and_normals(self, rng):
        d = rng.uniform(0.5, 8, (2, 4, 4))
        assert task_loss(Tensor(d), d, "depth").item() == 0.0
        n = rng.standard_normal((2, 3, 4, 4))
        assert abs(task_loss(Tensor(n), n, "norm").item()) < 1e-12

    def test_perfect_semantics(self, rng):
        labels = rng.integers(0, 3, (1, 4, 4))
        logits = one_hot(labels, 3) * 60.0
        assert task_loss(Tensor(logits), labels, "sem").item() < 1e-20

    def test_perfect_edges(self, rng):
        gt = (rng.random((1, 5, 5)) > 0.5).astype(float)
        assert task_loss(Tensor(gt), gt, "edge").item() < 1e-6    # probabilities clipped at 1e-7

    def test_uniform_ce(self, rng):
        labels = rng.integers(0, 5, (2, 3, 3))
        assert cross_entropy(Tensor(np.zeros((2, 5, 3, 3))), labels).item() == pytest.approx(math.log(5))

    def test_ignore_label(self):
        labels = np.array([[[0, 255]]])
        logits = np.zeros((1, 2, 1, 2))
        logits[0, 1, 0, 1] = 10.0           # wrong but ignored
        assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(math.log(2))

    def test_all_ignored(self):
        with pytest.raises(TensorError):
            cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255))

    def test_opposite_normals(self, rng):
        n = rng.standard_normal((1, 3, 3, 3))
        assert task_loss(Tensor(-n), n, "norm").item() == pytest.approx(2.0)

    def test_bce_half(self, rng):
        gt = (rng.random((2, 4, 4)) > 0.3).astype(float)
        assert edge_bce(Tensor(np.full((2, 4, 4), 0.5)), gt, 1.0).item() == pytest.approx(math.log(2))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            task_loss(Tensor(np.zeros(2)), np.zeros(2), "flow")


class TestAux:
    def test_zero_alpha(self, rng):
        preds = {2: Tensor(rng.random((1, 4, 4))), 3: Tensor(rng.random((1, 2, 2)))}
        assert aux_loss(preds, rng.random((1, 8, 8)), "depth", 0.0).item() == 0.0

    def test_perfect_single_scale(self, rng):
        gt = rng.random((1, 8, 8))
        pred = Tensor(downsample_target(gt, "depth", 2))
        assert aux_loss({2: pred}, gt, "depth", {2: 1.0}).item() == 0.0

    def test_arithmetic(self):
        gt = np.zeros((1, 8, 8))
        preds = {2: Tensor(np.ones((1, 4, 4))), 3: Tensor(np.full((1, 2, 2), 3.0))}
        assert aux_loss(preds, gt, "depth", {2: 0.2, 3: 0.2}).item() == pytest.approx(0.8)

    def test_downsample_rules(self):
        labels = np.arange(16).reshape(1, 4, 4)
        assert np.array_equal(downsample_target(labels, "sem", 2), [[[5, 7], [13, 15]]])
        n = np.zeros((1, 3, 2, 2))
        n[0, 0, 0, 0] = n[0, 2, 1, 1] = 1.0
        n[0, 2, 0, 1] = n[0, 2, 1, 0] = 1.0
        out = downsample_target(n, "norm", 2)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0)


class TestConsistency:
    def test_flat_plane(self):
        depth = Tensor(np.full((1, 6, 6), 3.0))
        normals = np.zeros((1, 3, 6, 6))
        normals[:, 2] = 1.0
        dn, _ = consistency_losses(depth, Tensor(normals), None, None, 1.0, 1.0)
        assert abs(dn.item()) < 1e-12

    def test_ramp_normals(self):
        xs = np.arange(6.0)
        depth = np.tile(0.5 * xs, (6, 1))[None]
        n = depth_to_normals(Tensor(depth)).data
        expected = np.array([-0.5, 0.0, 1.0]) / math.sqrt(1.25)
        assert np.allclose(n[0, :, 2, 2], expected)

    def test_edgeless_scene(self):
        logits = Tensor(np.tile(np.array([1.0, -2.0, 0.5])[None, :, None, None], (1, 1, 5, 5)))
        assert np.all(semantic_boundary(logits).data == 0)
        edges = Tensor(np.full((1, 5, 5), 1e-9))
        _, se = consistency_losses(None, None, edges, logits, 1.0, 1.0)
        assert se.item() < 1e-8

    def test_lambda_zero(self, rng):
        depth = Tensor(rng.random((1, 5, 5)))
        out = consistency_losses(depth, Tensor(rng.standard_normal((1, 3, 5, 5))), Tensor(rng.random((1, 5, 5))),
                                 Tensor(rng.standard_normal((1, 3, 5, 5))), 0.0, 0.0)
        assert out == (None, None)

    def test_boundary_range(self, rng):
        b = semantic_boundary(Tensor(rng.standard_normal((2, 4, 6, 6)) * 10)).data
        assert np.all((b >= 0) & (b <= 1))


class TestTotal:
    def test_unit_sigma(self):
        unc = UncertaintyParams(("a", "b"))
        losses = {"a": Tensor(np.array(1.0)), "b": Tensor(np.array(1.0))}
        assert total_loss(losses, unc).item() == pytest.approx(1.0)

    @given(st.floats(0.01, 100))
    def test_stationarity(self, value):
        s = Tensor(np.array(math.log(value)), requires_grad=True)
        T.backward(weighted_term(Tensor(np.array(value)), s))
        assert abs(s.grad) < 1e-12

    def test_grad_of_s(self, rng):
        for v in (0.3, 2.0, 7.0):
            assert grad_check(lambda s: weighted_term(Tensor(np.array(v)), s), Tensor(rng.standard_normal(()))) <= 1e-6

    @given(st.permutations(["depth", "sem", "norm", "edge"]))
    def test_order_invariance(self, order):
        r = np.random.default_rng(0)
        vals = dict(zip(["depth", "sem", "norm", "edge"], r.uniform(0.1, 3, 4)))
        unc = UncertaintyParams(order)
        for t, p in unc.log_var.items():
            p.data[...] = len(t) * 0.1
        ref_unc = UncertaintyParams(["depth", "sem", "norm", "edge"])
        for t, p in ref_unc.log_var.items():
            p.data[...] = len(t) * 0.1
        a = total_loss({t: Tensor(np.array(vals[t])) for t in order}, unc).item()
        b = total_loss({t: Tensor(np.array(vals[t])) for t in ref_unc.log_var}, ref_unc).item()
        assert a == b

    @given(st.lists(st.floats(0.01, 50), min_size=1, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
    def test_floor(self, losses, s):
        tasks = [f"t{i}" for i in range(len(losses))]
        unc = UncertaintyParams(tasks)
        for t, si in zip(tasks, s):
            unc.log_var[t].data[...] = si
        total = total_loss({t: Tensor(np.array(v)) for t, v in zip(tasks, losses)}, unc).item()
        assert total >= uncertainty_floor(dict(zip(tasks, losses))) - 1e-12

    def test_mismatched_tasks(self):
        with pytest.raises(ValueError):
            total_loss({"a": Tensor(np.array(1.0))}, UncertaintyParams(("a", "b")))

    def test_non_finite_s(self):
        unc = UncertaintyParams(("a",))
        unc.log_var["a"].data[...] = np.inf
        with pytest.raises(TensorError):
            total_loss({"a": Tensor(np.array(1.0))}, unc)

    def test_without_uncertainty(self):
        losses = {"a": Tensor(np.array(0.25)), "b": Tensor(np.array(0.5))}
        assert total_loss(losses, None, Tensor(np.array(0.1))).item() == pytest.approx(0.85)


class TestReport:
    def test_line_round_trip(self):
        rep = LossReport(main={"sem": 0.5, "depth": 1.25}, aux={"sem": 0.1, "depth": 0.2},
                         task={"sem": 0.6, "depth": 1.45}, consistency={"dn": 0.03, "se": 0.04},
                         sigma2={"sem": 0.9, "depth": 1.1}, total=1.5, step=7)
        back = LossReport.from_line(rep.to_line())
        assert back == rep

    def test_recompute(self):
        rep = LossReport(task={"a": 1.0, "b": 2.0}, sigma2={"a": 1.0, "b": 2.0},
                         consistency={"dn": 0.5})
        expected = 0.5 + (1.0 / 2.0 + math.log(2.0) / 2.0) + 0.1 * 0.5
        assert rep.recompute(0.1, 0.1) == pytest.approx(expected)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_dn=-1).validate()
    with pytest.raises(ValueError):
        LossConfig(edge_pos_weight=0).validate()
