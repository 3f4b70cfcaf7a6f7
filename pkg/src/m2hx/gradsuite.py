"""Block-by-block gradient verification at toy sizes.

Every differentiable block is checked against central differences with
respect to its input and a sample of its parameters, over several seeds.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import LoraLinear
from .decoder import RGMBlock, RGMConfig, RegisterGate, SelectiveSSM
from .fusion import MSCA, CrossTaskMixer, TaskAdaptor, TaskSet
from .gradcheck import (_rel_err, analytic_grad, analytic_param_grads, numeric_grad,
                        numeric_param_grad, sample_coords)
from .heads import AuxHeads, ConvHead, DepthBinConfig, DepthHead, EdgeHead, HeadsConfig, NormalHead
from .nn import Parameter
from .objectives import (UncertaintyParams, aux_loss, consistency_losses, cosine_loss, cross_entropy,
                         depth_l1, edge_bce, total_loss)
from .pyramid import HFA, SCALES, PyramidConfig
from .tensor import Tensor

THRESHOLDS = {"f64": 1e-4, "f32": 1e-3}
EPS = 1e-5     # reference differences always run in float64
W = 8           # toy channel width


@dataclass
class Case:
    """One block instance: an input array, a scalar function of it, and parameters."""

    x: np.ndarray
    f: Callable[[Tensor], Tensor]
    params: list = field(default_factory=list)


@dataclass
class BlockResult:
    name: str
    errors: list[float]
    threshold: float
    seconds: float

    @property
    def max_err(self) -> float:
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.errors) and all(np.isfinite(e) and e <= self.threshold for e in self.errors)


class Projector:
    """Fixed random linear read-out turning any tensor into a scalar."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: dict[tuple, np.ndarray] = {}

    def __call__(self, *outs: Tensor) -> Tensor:
        terms = []
        for i, o in enumerate(outs):
            key = (i, o.shape)
            if key not in self.weights:
                self.weights[key] = self.rng.standard_normal(o.shape)
            terms.append((o * Tensor(self.weights[key].astype(o.dtype))).sum())
        return T.total(terms)


def _randomize(params, rng, scale=0.3):
    """Give zero-initialised weights non-trivial values so their gradients are exercised."""
    for p in params:
        if not np.any(p.data):
            p.data[...] = rng.standard_normal(p.shape) * scale


def _trainable(module) -> list:
    return [p for p in module.parameters() if p.requires_grad]


# -- block builders -----------------------------------------------------------
def lora_case(rng, dtype):
    m = LoraLinear(6, 5, 2, 4.0, rng, dtype=dtype)
    _randomize([m.B], rng)
    proj = Projector(rng)
    return Case(rng.standard_normal((2, 3, 6)), lambda x: proj(m(x)), _trainable(m))


def hfa_case(rng, dtype):
    m = HFA(W, PyramidConfig(width=W, groups=2), rng, dtype)
    proj = Projector(rng)

    def f(x):
        pyr = m({layer: x[j] for j, layer in enumerate((2, 4, 6, 8))})
        return proj(*(pyr[k] for k in SCALES))
    return Case(rng.standard_normal((4, 1, 4, W)), f, _trainable(m))


def gate_case(rng, dtype):
    m = RegisterGate(W, rng, dtype)
    r = Parameter(rng.standard_normal((1, W)).astype(dtype))
    proj = Projector(rng)
    return Case(rng.standard_normal((1, 5, W)), lambda x: proj(m(x, r)), _trainable(m) + [r])


def scan_case(rng, dtype):
    bidir = bool(rng.integers(2))
    m = SelectiveSSM(4, 3, rng, bidirectional=bidir, dtype=dtype)
    # larger steps than the init range so the decay path carries real gradient
    m.W_delta.bias.data[...] = rng.uniform(-1.0, 1.0, 4)
    proj = Projector(rng)
    return Case(rng.standard_normal((1, 6, 4)), lambda x: proj(m(x)), _trainable(m))


def rgm_case(rng, dtype):
    m = RGMBlock(W, RGMConfig(state_size=3), rng, dtype)
    _randomize(_trainable(m), rng)
    r = Parameter(rng.standard_normal((1, W)).astype(dtype))
    proj = Projector(rng)
    return Case(rng.standard_normal((1, W, 3, 3)), lambda x: proj(m(x, r)), _trainable(m) + [r])


def adaptor_case(rng, dtype):
    m = TaskAdaptor(W, rng, groups=2, dtype=dtype)
    others = {k: Tensor(rng.standard_normal((1, W, 2 ** (6 - k), 2 ** (6 - k))).astype(dtype)) for k in SCALES[1:]}
    proj = Projector(rng)

    def f(x):
        f_ = m({SCALES[0]: x, **others})
        return proj(*(f_[k] for k in SCALES))
    return Case(rng.standard_normal((1, W, 2, 2)), f, _trainable(m))


def ctm_case(rng, dtype):
    tasks = TaskSet()
    m = CrossTaskMixer(W, tasks, rng, dtype=dtype)
    h = {t: Tensor(rng.standard_normal((1, W, 3, 3)).astype(dtype)) for t in tasks.active}
    proj = Projector(rng)

    def f(x):
        hh = dict(h, depth=x)
        return proj(m(hh, "sem"), m(hh, "norm"))
    return Case(rng.standard_normal((1, W, 3, 3)), f, _trainable(m))


def msca_case(rng, dtype):
    m = MSCA(W, 7, rng, dtype)
    proj = Projector(rng)
    return Case(rng.standard_normal((1, W, 5, 5)), lambda x: proj(m(x)), _trainable(m))


def depth_head_case(rng, dtype):
    m = DepthHead(W, DepthBinConfig(num_bins=4), rng, dtype)
    _randomize(_trainable(m), rng, 0.1)
    proj = Projector(rng)
    return Case(rng.standard_normal((1, W, 3, 3)), lambda x: proj(m(x, 2)[0]), _trainable(m))


def _head_case(cls, *args):
    def build(rng, dtype):
        m = cls(W, *args, rng, dtype=dtype)
        proj = Projector(rng)
        return Case(rng.standard_normal((1, W, 3, 3)), lambda x: proj(m(x, 2)), _trainable(m))
    return build


def aux_case(rng, dtype):
    m = AuxHeads(W, ("depth", "sem", "norm", "edge"), (3, 2), HeadsConfig(num_classes=3), rng, dtype)
    proj = Projector(rng)

    def f(x):
        out = m({t: {3: x[:, :, ::2, ::2], 2: x} for t in ("depth", "sem", "norm", "edge")})
        return proj(*(out[t][k] for t in out for k in out[t]))
    return Case(rng.standard_normal((1, W, 4, 4)), f, _trainable(m))


def depth_loss_case(rng, dtype):
    gt = rng.uniform(1.0, 5.0, (2, 4, 4))
    return Case(gt + rng.choice([-1, 1], gt.shape) * rng.uniform(0.05, 1.0, gt.shape), lambda x: depth_l1(x, gt))


def ce_case(rng, dtype):
    labels = rng.integers(0, 3, (2, 4, 4))
    labels[0, 0, 0] = 255
    return Case(rng.standard_normal((2, 3, 4, 4)), lambda x: cross_entropy(x, labels))


def cosine_case(rng, dtype):
    gt = rng.standard_normal((2, 3, 4, 4))
    return Case(rng.standard_normal((2, 3, 4, 4)), lambda x: cosine_loss(x, gt))


def bce_case(rng, dtype):
    gt = (rng.random((2, 4, 4)) < 0.3).astype(float)
    return Case(rng.uniform(0.05, 0.95, (2, 4, 4)), lambda x: edge_bce(x, gt, 2.0))


def aux_loss_case(rng, dtype):
    gt = rng.uniform(1.0, 5.0, (1, 8, 8))
    def f(x):
        return aux_loss({3: x[:, ::2, ::2], 2: x}, gt, "depth", 0.2)
    return Case(rng.uniform(1.0, 5.0, (1, 8, 8)), f)


def dn_case(rng, dtype):
    nrm = Tensor(rng.standard_normal((1, 3, 5, 5)))
    nrm = Tensor((nrm.data / np.linalg.norm(nrm.data, axis=1, keepdims=True)).astype(dtype))
    return Case(rng.uniform(1.0, 3.0, (1, 5, 5)), lambda x: consistency_losses(x, nrm, None, None, 1.0, 0.0)[0])


def se_case(rng, dtype):
    edges = Tensor(rng.uniform(0.0, 1.0, (1, 5, 5)).astype(dtype))
    return Case(rng.standard_normal((1, 3, 5, 5)) * 2.0,
                lambda x: consistency_losses(None, None, edges, x, 0.0, 1.0)[1])


def uncertainty_case(rng, dtype):
    tasks = ("depth", "sem", "norm", "edge")
    unc = UncertaintyParams(tasks, dtype)
    for p in unc.log_var.values():
        p.data[...] = rng.uniform(-1.0, 1.0)
    cons = Parameter(np.array(rng.uniform(0.1, 1.0), dtype=dtype))

    def f(x):
        return total_loss({t: x[i] for i, t in enumerate(tasks)}, unc, cons * 0.1)
    return Case(rng.uniform(0.1, 3.0, 4), f, list(unc.log_var.values()) + [cons])


BLOCKS: dict[str, Callable] = {
    "lora_linear": lora_case,
    "hfa": hfa_case,
    "register_gate": gate_case,
    "selective_scan": scan_case,
    "rgm_block": rgm_case,
    "task_adaptor": adaptor_case,
    "ctm": ctm_case,
    "msca": msca_case,
    "depth_head": depth_head_case,
    "sem_head": _head_case(ConvHead, 3),
    "normal_head": _head_case(NormalHead),
    "edge_head": _head_case(EdgeHead),
    "aux_heads": aux_case,
    "loss_depth_l1": depth_loss_case,
    "loss_cross_entropy": ce_case,
    "loss_cosine": cosine_case,
    "loss_edge_bce": bce_case,
    "loss_aux": aux_loss_case,
    "loss_depth_normal": dn_case,
    "loss_edge_semantic": se_case,
    "uncertainty_total": uncertainty_case,
}


def check_block(name: str, seed: int, dtype: str = "f64", max_coords: int = 10) -> float:
    """Max relative gradient error of one block instance.

    In f32 mode the tape gradient of the float32 build is compared against
    float64 central differences of an identically seeded build, so the
    reference itself carries no float32 rounding.
    """
    build = BLOCKS[name]
    ref = build(np.random.default_rng(seed), np.float64)
    x64 = np.asarray(ref.x, dtype=np.float64)
    if dtype == "f64":
        test, x = ref, x64
    else:
        test = build(np.random.default_rng(seed), np.float32)
        x = np.asarray(test.x).astype(np.float32)
    err = _rel_err(analytic_grad(test.f, x), numeric_grad(ref.f, x64, EPS))
    if test.params:
        xt, xr = Tensor(x), Tensor(x64)
        grads = analytic_param_grads(lambda: test.f(xt), test.params)
        pick = np.random.default_rng(seed + 1)
        for g, p in zip(grads, ref.params):
            idx = sample_coords(p.size, max_coords, pick)
            num = numeric_param_grad(lambda: ref.f(xr), p, idx, EPS)
            err = max(err, _rel_err(g.reshape(-1)[idx], num))
    return err


class UnusedFaultError(ValueError):
    pass


def run_suite(seeds: int = 10, dtype: str = "f64", blocks=None, fault: str | None = None
              ) -> list[BlockResult]:
    """Check every block on ``seeds`` seeds; ``fault`` corrupts one op's backward."""
    results = []
    names = list(blocks) if blocks else list(BLOCKS)
    with (T.inject_fault(fault) if fault else contextlib.nullcontext()) as record:
        for name in names:
            t0 = time.perf_counter()
            errs = []
            for s in range(seeds):
                try:
                    errs.append(check_block(name, s, dtype))
                except (T.TensorError, FloatingPointError):
                    errs.append(float("inf"))
            results.append(BlockResult(name, errs, THRESHOLDS[dtype], time.perf_counter() - t0))
    if fault and record["hits"] == 0:
        raise UnusedFaultError(f"op '{fault}' never ran in blocks {names}, so the injected fault tested nothing")
    return results


def format_table(results: list[BlockResult]) -> str:
    lines = [f"{'block':<22}{'seeds':>6}{'max_rel_err':>14}{'threshold':>11}{'time_s':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<22}{len(r.errors):>6}{r.max_err:>14.3e}{r.threshold:>11.0e}"
                     f"{r.seconds:>8.2f}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
