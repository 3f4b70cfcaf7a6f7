"""Evaluation metrics and parameter / multiply-accumulate accounting."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensorio
from .tensor import Tensor

IGNORE = 255


class MetricError(ValueError):
    pass


# -- semantic ----------------------------------------------------------------
def confusion(pred, gt, k: int, ignore: int = IGNORE) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise MetricError(f"pred/gt size mismatch {pred.shape} vs {gt.shape}")
    valid = gt != ignore
    g, p = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k or min(g.min(), p.min()) < 0):
        raise MetricError(f"labels outside [0, {k})")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    if cm.sum() == 0:
        raise MetricError("no valid pixels")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    per = np.full(len(tp), np.nan)
    present = union > 0
    per[present] = tp[present] / union[present]
    return float(np.nanmean(per)), per


def miou(pred, gt, k: int, ignore: int = IGNORE) -> tuple[float, np.ndarray]:
    return iou_from_confusion(confusion(pred, gt, k, ignore))


# -- geometric ---------------------------------------------------------------
def depth_rmse(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    m = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise MetricError("depth mask is empty")
    return float(np.sqrt(np.mean((pred[m] - gt[m]) ** 2)))


def angular_errors(pred_n, gt_n, axis: int = -3) -> np.ndarray:
    """Per-pixel angle in degrees between normal fields (pred renormalised)."""
    p = np.asarray(pred_n, dtype=np.float64)
    g = np.asarray(gt_n, dtype=np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=axis, keepdims=True), 1e-12)
    # atan2 of |p x g| and p.g stays accurate near 0 and 180 degrees, unlike arccos
    dot = (p * g).sum(axis=axis)
    cross = np.linalg.norm(np.cross(p, g, axis=axis), axis=axis)
    return np.degrees(np.arctan2(cross, dot))


def normal_angle(pred_n, gt_n, axis: int = -3) -> tuple[float, float]:
    err = angular_errors(pred_n, gt_n, axis)
    return float(err.mean()), float(np.median(err))


def edge_counts(prob, gt, threshold: float = 0.5) -> np.ndarray:
    """(tp, fp, fn) at a threshold."""
    if not 0.0 < threshold < 1.0:
        raise MetricError("edge threshold must lie in (0, 1)")
    p = np.asarray(prob) >= threshold
    g = np.asarray(gt) > 0.5
    return np.array([np.sum(p & g), np.sum(p & ~g), np.sum(~p & g)], dtype=np.int64)


def f1_from_counts(c: np.ndarray) -> float:
    tp, fp, fn = (int(v) for v in c)
    if tp + fp + fn == 0:
        return 1.0      # nothing predicted, nothing to find
    return 2.0 * tp / (2.0 * tp + fp + fn)


def edge_f1(prob, gt, threshold: float = 0.5) -> float:
    return f1_from_counts(edge_counts(prob, gt, threshold))


# -- reports -----------------------------------------------------------------
@dataclass
class Accumulator:
    """Dataset-level sums; accumulators merge by addition."""

    k: int
    cm: np.ndarray = None
    sq_err: float = 0.0
    depth_px: int = 0
    angles: list = field(default_factory=list)
    edges: np.ndarray = None
    frames: int = 0

    def __post_init__(self):
        if self.cm is None:
            self.cm = np.zeros((self.k, self.k), dtype=np.int64)
        if self.edges is None:
            self.edges = np.zeros(3, dtype=np.int64)

    def update(self, pred: dict, gt: dict, threshold: float = 0.5) -> None:
        """pred/gt hold batched arrays under keys depth, labels, normals, edges."""
        n = None
        if pred.get("labels") is not None:
            self.cm += confusion(pred["labels"], gt["labels"], self.k)
            n = len(gt["labels"])
        if pred.get("depth") is not None:
            d = np.asarray(pred["depth"], np.float64) - gt["depth"]
            self.sq_err += float(np.sum(d * d))
            self.depth_px += d.size
            n = len(gt["depth"])
        if pred.get("normals") is not None:
            self.angles.append(angular_errors(pred["normals"], gt["normals"]).ravel())
            n = len(gt["normals"])
        if pred.get("edges") is not None:
            self.edges += edge_counts(pred["edges"], gt["edges"], threshold)
            n = len(gt["edges"])
        self.frames += n or 0

    def merge(self, other: "Accumulator") -> "Accumulator":
        out = Accumulator(self.k, self.cm + other.cm, self.sq_err + other.sq_err,
                          self.depth_px + other.depth_px, self.angles + other.angles,
                          self.edges + other.edges, self.frames + other.frames)
        return out

    def report(self) -> "EvalReport":
        rep = EvalReport(frames=self.frames)
        if self.cm.sum():
            rep.miou, rep.per_class_iou = iou_from_confusion(self.cm)
        if self.depth_px:
            rep.depth_rmse = float(np.sqrt(self.sq_err / self.depth_px))
        if self.angles:
            a = np.concatenate(self.angles)
            rep.normal_mean, rep.normal_median = float(a.mean()), float(np.median(a))
        if self.edges.sum():
            rep.edge_f1 = f1_from_counts(self.edges)
        return rep


REPORT_KEYS = ("miou", "depth_rmse", "normal_mean", "normal_median", "edge_f1", "frames")


@dataclass
class EvalReport:
    miou: float = float("nan")
    per_class_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))
    depth_rmse: float = float("nan")
    normal_mean: float = float("nan")
    normal_median: float = float("nan")
    edge_f1: float = float("nan")
    frames: int = 0

    def to_text(self) -> str:
        lines = [f"{k}={getattr(self, k):.6g}" if k != "frames" else f"frames={self.frames}"
                 for k in REPORT_KEYS]
        lines += [f"iou.{i}={v:.6g}" for i, v in enumerate(self.per_class_iou)]
        return "\n".join(lines) + "\n"

    def to_array(self) -> np.ndarray:
        head = [getattr(self, k) for k in REPORT_KEYS]
        return np.array(head + list(self.per_class_iou), dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EvalReport":
        arr = np.asarray(arr, dtype=np.float64)
        vals = dict(zip(REPORT_KEYS, arr[:len(REPORT_KEYS)]))
        vals["frames"] = int(vals["frames"])
        return cls(per_class_iou=arr[len(REPORT_KEYS):].copy(), **vals)

    def write(self, out_dir: str | os.PathLike, stem: str = "eval") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")
        tensorio.save(out / f"{stem}.tns", self.to_array())
        return out


# -- profile -----------------------------------------------------------------
@dataclass
class ProfileReport:
    total_params: int
    trainable_params: int
    lora_params: int
    macs: int
    macs_by_module: dict[str, int]
    param_names: list[str]

    def to_text(self, top: int = 0) -> str:
        lines = [f"total_params={self.total_params}", f"trainable_params={self.trainable_params}",
                 f"lora_params={self.lora_params}", f"macs={self.macs}"]
        items = sorted(self.macs_by_module.items(), key=lambda kv: -kv[1])
        for name, m in items[:top] if top else items:
            lines.append(f"macs.{name or '<root>'}={m}")
        return "\n".join(lines) + "\n"


def lora_extra(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


def profile(model, batch: int = 1) -> ProfileReport:
    """Exact parameter counts and a MAC estimate from one counted forward."""
    params = list(model.named_parameters())
    total = sum(p.size for _, p in params)
    trainable = sum(p.size for _, p in params if not p.frozen)
    lora = sum(layer.extra_params() for layer in model.backbone.lora_layers())
    cfg = model.cfg.backbone
    x = Tensor(np.zeros((batch, 3, cfg.image_size, cfg.image_size), dtype=model.dtype))
    with T.no_grad(), T.count_macs() as sink:
        model.run(x)
    return ProfileReport(total, trainable, lora, sum(sink.values()), dict(sink), [k for k, _ in params])
