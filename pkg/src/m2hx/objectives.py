"""Task losses, deep supervision, consistency terms and uncertainty weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .heads import unit
from .nn import Module, Parameter
from .tensor import Tensor, TensorError

IGNORE = 255
PROB_EPS = 1e-7


@dataclass
class LossConfig:
    aux_weight: float = 0.2
    lambda_dn: float = 0.1
    lambda_se: float = 0.1
    edge_pos_weight: float = 2.0
    uncertainty: bool = True

    def validate(self) -> None:
        if min(self.aux_weight, self.lambda_dn, self.lambda_se) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.edge_pos_weight <= 0:
            raise ValueError("loss.edge_pos_weight must be positive")


# -- main task losses --------------------------------------------------------
def depth_l1(pred: Tensor, gt, mask=None) -> Tensor:
    diff = T.absolute(pred - Tensor(np.asarray(gt, dtype=pred.dtype)))
    if mask is None:
        return diff.mean()
    m = np.asarray(mask, dtype=pred.dtype)
    if m.sum() == 0:
        raise TensorError("depth loss mask is empty")
    return (diff * Tensor(m)).sum() * (1.0 / m.sum())


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    """(N, H, W) ints -> (N, K, H, W); ignored pixels are all-zero."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], k) + labels.shape[1:], dtype=dtype)
    valid = labels != IGNORE
    n_idx, h_idx, w_idx = np.nonzero(valid)
    out[n_idx, labels[valid].astype(int), h_idx, w_idx] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, ignore: int = IGNORE) -> Tensor:
    labels = np.asarray(labels)
    valid = labels != ignore
    if not valid.any():
        raise TensorError("semantic target has no valid pixels")
    oh = one_hot(labels, logits.shape[1], logits.dtype)
    return -(T.log_softmax(logits, axis=1) * Tensor(oh)).sum() * (1.0 / valid.sum())


def cosine_loss(pred: Tensor, gt) -> Tensor:
    """mean(1 - cos) between (N, 3, H, W) fields."""
    g = unit(Tensor(np.asarray(gt, dtype=pred.dtype)), axis=1)
    cos = (unit(pred, axis=1) * g).sum(axis=1)
    return (1.0 - cos).mean()


def edge_bce(prob: Tensor, gt, pos_weight: float = 1.0) -> Tensor:
    y = Tensor(np.asarray(gt, dtype=prob.dtype))
    p = T.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * T.log(p) * pos_weight + (1.0 - y) * T.log(1.0 - p))
    return loss.mean()


def task_loss(pred: Tensor, gt, kind: str, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    if kind == "depth":
        return depth_l1(pred, gt)
    if kind == "sem":
        return cross_entropy(pred, gt)
    if kind == "norm":
        return cosine_loss(pred, gt)
    if kind == "edge":
        return edge_bce(pred, gt, cfg.edge_pos_weight)
    raise ValueError(f"unknown task kind {kind!r}")


# -- deep supervision --------------------------------------------------------
def downsample_target(gt: np.ndarray, kind: str, factor: int) -> np.ndarray:
    """Bring a full-resolution target to a coarser scale.

    Depth/edges are block-averaged, normals averaged and renormalised,
    labels sampled at the block centre.
    """
    if factor == 1:
        return gt
    gt = np.asarray(gt)
    if kind == "sem":
        off = factor // 2
        return gt[..., off::factor, off::factor]
    *lead, h, w = gt.shape
    blocks = gt.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    if kind == "norm":
        blocks = blocks / np.maximum(np.linalg.norm(blocks, axis=-3, keepdims=True), 1e-12)
    return blocks


def aux_loss(preds: dict[int, Tensor], gt, kind: str, alpha, cfg: LossConfig | None = None) -> Tensor:
    """sum_k alpha_k * L(pred_k, gt downsampled to scale k)."""
    gt = np.asarray(gt)
    full = gt.shape[-1]
    total = None
    for k, pred in sorted(preds.items()):
        a = alpha[k] if isinstance(alpha, dict) else float(alpha)
        if a == 0:
            continue
        factor = full // pred.shape[-1]
        term = task_loss(pred, downsample_target(gt, kind, factor), kind, cfg) * a
        total = term if total is None else total + term
    if total is None:
        dtype = next(iter(preds.values())).dtype if preds else np.float64
        return Tensor(np.zeros((), dtype=dtype))
    return total


# -- consistency ------------------------------------------------------------
def depth_to_normals(depth: Tensor) -> Tensor:
    """Central-difference normals of an orthographic depth map, interior only.

    (N, H, W) -> (N, 3, H-2, W-2), n ∝ (-dD/dx, -dD/dy, 1).
    """
    dx = (depth[:, 1:-1, 2:] - depth[:, 1:-1, :-2]) * 0.5
    dy = (depth[:, 2:, 1:-1] - depth[:, :-2, 1:-1]) * 0.5
    ones = Tensor(np.ones(dx.shape, dtype=depth.dtype))
    n = T.stack([-dx, -dy, ones], axis=1)
    return unit(n, axis=1)


def semantic_boundary(logits: Tensor) -> Tensor:
    """Clipped, channel-summed gradient magnitude of class probabilities.

    (N, K, H, W) -> (N, H-2, W-2) in [0, 1].
    """
    p = T.softmax(logits, axis=1)
    gx = (p[:, :, 1:-1, 2:] - p[:, :, 1:-1, :-2]) * 0.5
    gy = (p[:, :, 2:, 1:-1] - p[:, :, :-2, 1:-1]) * 0.5
    mag = T.sqrt(gx * gx + gy * gy).sum(axis=1)
    return T.clip(mag, 0.0, 1.0)


def consistency_losses(depth: Tensor | None, normals: Tensor | None, edges: Tensor | None,
                       sem_logits: Tensor | None, lambda_dn: float, lambda_se: float
                       ) -> tuple[Tensor | None, Tensor | None]:
    """Depth-normal and edge-semantic agreement terms (unweighted, or None)."""
    dn = se = None
    if lambda_dn > 0 and depth is not None and normals is not None:
        derived = depth_to_normals(depth)
        inner = normals[:, :, 1:-1, 1:-1]
        dn = (1.0 - (inner * derived).sum(axis=1)).mean()
    if lambda_se > 0 and edges is not None and sem_logits is not None:
        se = T.absolute(edges[:, 1:-1, 1:-1] - semantic_boundary(sem_logits)).mean()
    return dn, se


# -- uncertainty weighting ----------------------------------------------------
class UncertaintyParams(Module):
    """Per-task s_t = log sigma_t^2."""

    def __init__(self, tasks, dtype=np.float64):
        self.log_var = {t: Parameter(np.zeros((), dtype)) for t in tasks}

    def sigma2(self) -> dict[str, float]:
        return {t: float(np.exp(p.data)) for t, p in self.log_var.items()}


def weighted_term(loss: Tensor, s: Tensor) -> Tensor:
    """exp(-s) * L / 2 + s / 2, i.e. L / (2 sigma^2) + log sigma."""
    return T.exp(-s) * loss * 0.5 + s * 0.5


def total_loss(losses: dict[str, Tensor], unc: UncertaintyParams | None,
               cons: Tensor | None = None) -> Tensor:
    if unc is not None and set(losses) != set(unc.log_var):
        raise ValueError(f"tasks {sorted(losses)} do not match uncertainty params {sorted(unc.log_var)}")
    terms = []
    for t in sorted(losses):
        s = unc.log_var[t] if unc is not None else None
        if s is not None and not np.isfinite(s.data):
            raise TensorError(f"non-finite log-variance for {t}")
        terms.append(weighted_term(losses[t], s) if s is not None else losses[t])
    out = T.total(terms)
    return out + cons if cons is not None else out


def uncertainty_floor(losses: dict[str, float]) -> float:
    """Lower bound of the weighted total for fixed positive losses."""
    return sum((1.0 + math.log(v)) / 2.0 for v in losses.values())


@dataclass
class LossReport:
    main: dict[str, float] = field(default_factory=dict)
    aux: dict[str, float] = field(default_factory=dict)
    task: dict[str, float] = field(default_factory=dict)
    consistency: dict[str, float] = field(default_factory=dict)
    sigma2: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    step: int = 0

    def recompute(self, lambda_dn: float, lambda_se: float) -> float:
        out = 0.0
        for t in sorted(self.task):
            if self.sigma2:
                s = math.log(self.sigma2[t])
                out += math.exp(-s) * self.task[t] / 2.0 + s / 2.0
            else:
                out += self.task[t]
        out += lambda_dn * self.consistency.get("dn", 0.0) + lambda_se * self.consistency.get("se", 0.0)
        return out

    def raw_sum(self) -> float:
        return sum(self.task.values())

    def to_line(self) -> str:
        parts = [f"step={self.step}", f"total={self.total:.6g}"]
        for t in sorted(self.task):
            parts += [f"{t}.main={self.main[t]:.6g}", f"{t}.aux={self.aux.get(t, 0.0):.6g}",
                      f"{t}.loss={self.task[t]:.6g}"]
            if t in self.sigma2:
                parts.append(f"{t}.sigma2={self.sigma2[t]:.6g}")
        for k in sorted(self.consistency):
            parts.append(f"cons.{k}={self.consistency[k]:.6g}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        rep = cls()
        for item in line.split():
            key, val = item.split("=", 1)
            if key == "step":
                rep.step = int(val)
            elif key == "total":
                rep.total = float(val)
            elif key.startswith("cons."):
                rep.consistency[key[5:]] = float(val)
            else:
                task, part = key.split(".", 1)
                target = {"main": rep.main, "aux": rep.aux, "loss": rep.task, "sigma2": rep.sigma2}[part]
                target[task] = float(val)
        return rep
