"""Dense prediction heads: adaptive-bin depth, semantics, normals, edges."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

UNIT_EPS = 1e-6


@dataclass
class DepthBinConfig:
    num_bins: int = 16
    d_min: float = 0.1
    d_max: float = 8.1
    min_width: float = 1e-4     # floor per bin, as a fraction of the depth range

    def validate(self) -> None:
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"heads.depth.d_min ({self.d_min}) must satisfy 0 < d_min < "
                             f"heads.depth.d_max ({self.d_max})")
        if self.num_bins < 2:
            raise ValueError("heads.depth.num_bins must be >= 2")
        if not 0 < self.min_width * self.num_bins < 1:
            raise ValueError("heads.depth.min_width must satisfy 0 < min_width * num_bins < 1")

    @property
    def clamp(self) -> tuple[float, float]:
        return self.d_min / 2.0, 2.0 * self.d_max


@dataclass
class HeadsConfig:
    depth: DepthBinConfig = field(default_factory=DepthBinConfig)
    num_classes: int = 4

    def validate(self) -> None:
        self.depth.validate()
        if self.num_classes < 2:
            raise ValueError("heads.sem.num_classes must be >= 2")


@dataclass
class DepthDiagnostics:
    widths: Tensor          # (N, Nb) softmax bin widths w
    edges: Tensor           # (N, Nb) e_1..e_Nb
    centers: Tensor         # (N, Nb)
    probs: Tensor           # (N, Nb, H, W)
    center_depth: Tensor    # D_c at head resolution (N, H, W)
    pre_clamp: Tensor       # D_c + residual at head resolution (N, H, W)


@dataclass
class TaskBundle:
    depth: Tensor | None = None          # (N, H, W) metres
    sem_logits: Tensor | None = None     # (N, K, H, W)
    normals: Tensor | None = None        # (N, 3, H, W) unit vectors
    edges: Tensor | None = None          # (N, H, W) probabilities
    aux: dict[str, dict[int, Tensor]] = field(default_factory=dict)
    depth_diag: DepthDiagnostics | None = None

    def get(self, task: str) -> Tensor | None:
        return {"depth": self.depth, "sem": self.sem_logits, "norm": self.normals, "edge": self.edges}[task]


def bin_edges(widths: Tensor, d_min: float, d_max: float) -> tuple[Tensor, Tensor]:
    """Cumulative bin edges e_i and midpoints c_i from normalised widths."""
    e = T.cumsum(widths, axis=-1) * (d_max - d_min) + d_min
    n = widths.shape[0]
    start = Tensor(np.full((n, 1), d_min, dtype=widths.dtype))
    prev = T.concat([start, e[:, :-1]], axis=-1)
    return e, (prev + e) * 0.5


def unit(v: Tensor, axis: int = 1) -> Tensor:
    """Per-pixel L2 normalisation with a small stabiliser."""
    norm = T.sqrt((v * v).sum(axis=axis, keepdims=True) + UNIT_EPS ** 2)
    return v / norm


class DepthHead(Module):
    def __init__(self, width: int, cfg: DepthBinConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.width_proj = Linear(width, cfg.num_bins, rng, dtype=dtype)
        self.bin_logits = Conv2d(width, cfg.num_bins, 1, rng, dtype=dtype)
        self.residual = Conv2d(width, 1, 1, rng, zero=True, dtype=dtype)

    def forward(self, h: Tensor, out_factor: int = 1) -> tuple[Tensor, DepthDiagnostics]:
        cfg = self.cfg
        # the floor keeps edges strictly increasing where a softmax entry underflows to 0
        floor = cfg.min_width
        w = T.softmax(self.width_proj(h.mean(axis=(2, 3))), axis=-1) * (1.0 - cfg.num_bins * floor) + floor
        e, c = bin_edges(w, cfg.d_min, cfg.d_max)
        p = T.softmax(self.bin_logits(h), axis=1)
        n, nb, hh, ww = p.shape
        d_c = (p * c.reshape(n, nb, 1, 1)).sum(axis=1)
        pre = d_c + self.residual(h).reshape(n, hh, ww)
        depth = T.clip(T.upsample_bilinear(pre, out_factor), *cfg.clamp)
        return depth, DepthDiagnostics(w, e, c, p, d_c, pre)


class ConvHead(Module):
    """Conv1x1(GELU(Conv3x3(x)))."""

    def __init__(self, width: int, out: int, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv2d(width, width, 3, rng, dtype=dtype)
        self.out = Conv2d(width, out, 1, rng, dtype=dtype)

    def forward(self, h: Tensor, out_factor: int = 1) -> Tensor:
        return T.upsample_bilinear(self.out(T.gelu(self.conv(h))), out_factor)


class NormalHead(ConvHead):
    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(width, 3, rng, dtype)

    def forward(self, h: Tensor, out_factor: int = 1) -> Tensor:
        return unit(super().forward(h, out_factor), axis=-3)


class EdgeHead(ConvHead):
    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(width, 1, rng, dtype)

    def forward(self, h: Tensor, out_factor: int = 1) -> Tensor:
        logits = super().forward(h, out_factor)
        return T.sigmoid(logits.reshape(logits.shape[:-3] + logits.shape[-2:]))


class AuxHeads(Module):
    """Independent 1x1 predictors on each scale's task feature f_{k,t}."""

    def __init__(self, width: int, tasks, scales, cfg: HeadsConfig, rng: np.random.Generator,
                 dtype=np.float64):
        outs = {"depth": 1, "sem": cfg.num_classes, "norm": 3, "edge": 1}
        self.cfg = cfg
        self.conv = {t: {k: Conv2d(width, outs[t], 1, rng, dtype=dtype) for k in scales} for t in tasks}

    def _children(self):
        for t, per in self.conv.items():
            for k, m in per.items():
                yield f"conv.{t}.{k}", m

    def forward(self, feats: dict[str, dict[int, Tensor]]) -> dict[str, dict[int, Tensor]]:
        d = self.cfg.depth
        out: dict[str, dict[int, Tensor]] = {}
        for t, per in self.conv.items():
            out[t] = {}
            for k, conv in per.items():
                y = conv(feats[t][k])
                if t == "depth":
                    y = T.sigmoid(y[:, 0]) * (d.d_max - d.d_min) + d.d_min
                elif t == "norm":
                    y = unit(y, axis=1)
                elif t == "edge":
                    y = T.sigmoid(y[:, 0])
                out[t][k] = y
        return out
