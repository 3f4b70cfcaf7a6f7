"""Token reassembly, hierarchical feature adapter and register pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvGNGELU, Linear, Module
from .tensor import Tensor, TensorError

SCALES = (5, 4, 3, 2)


@dataclass
class PyramidConfig:
    width: int = 64
    groups: int = 8
    # "fused": the p4 level takes the fully aggregated top-down output;
    # "deepest": p4 is the adapted deepest tap alone.
    p4_source: str = "fused"

    def validate(self) -> None:
        if self.width % self.groups:
            raise ValueError("pyramid.width must be divisible by pyramid.groups")
        if self.p4_source not in ("fused", "deepest"):
            raise ValueError("pyramid.p4_source must be 'fused' or 'deepest'")


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]                       # k -> (N, C, H_k, W_k)
    adapted: dict[int, Tensor] = field(default_factory=dict)   # s -> p-bar_s

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]

    def check(self) -> None:
        widths = {t.shape[1] for t in self.levels.values()}
        if len(widths) != 1:
            raise TensorError(f"pyramid levels disagree on width: {widths}")
        for k in SCALES[1:]:
            hi, lo = self.levels[k].shape[-2:], self.levels[k + 1].shape[-2:]
            if hi != (2 * lo[0], 2 * lo[1]):
                raise TensorError(f"levels {k + 1}->{k} are not a factor-2 pair: {lo} vs {hi}")


def token_reassemble(tokens: Tensor) -> Tensor:
    """(N,) P x D tokens -> (N,) D x h x w grid, row-major."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.expand_dims(tokens, 0)
    n, p, d = tokens.shape
    side = int(round(np.sqrt(p)))
    if side * side != p:
        raise TensorError(f"{p} tokens do not form a square grid")
    grid = tokens.transpose(0, 2, 1).reshape(n, d, side, side)
    return grid[0] if squeeze else grid


def flatten_grid(grid: Tensor) -> Tensor:
    """Inverse of :func:`token_reassemble`."""
    squeeze = grid.ndim == 3
    if squeeze:
        grid = T.expand_dims(grid, 0)
    n, d, h, w = grid.shape
    out = grid.reshape(n, d, h * w).transpose(0, 2, 1)
    return out[0] if squeeze else out


class HFA(Module):
    """Projects four same-stride taps to width C and builds levels p5..p2."""

    def __init__(self, embed_dim: int, cfg: PyramidConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        c, g = cfg.width, cfg.groups
        self.cfg = cfg
        self.proj = [Conv2d(embed_dim, c, 1, rng, dtype=dtype) for _ in range(4)]
        self.phi = {s: ConvGNGELU(c, c, rng, g, dtype=dtype) for s in (4, 3, 2, 1)}
        self.psi = {k: ConvGNGELU(c, c, rng, g, dtype=dtype) for k in (5, 3, 2)}

    def forward(self, taps: dict[int, Tensor]) -> FeaturePyramid:
        if len(taps) != 4:
            raise TensorError(f"HFA needs 4 taps, got {len(taps)}")
        grids = [token_reassemble(taps[layer]) for layer in sorted(taps)]
        if len({g.shape[-2:] for g in grids}) != 1:
            raise TensorError("HFA taps must share one stride")
        # tap order l1 < l2 < l3 < l4 maps to adapter stages s = 1..4
        f = {s: self.proj[s - 1](grids[s - 1]) for s in (1, 2, 3, 4)}
        bar = {4: self.phi[4](f[4])}
        for s in (3, 2, 1):
            # common stride: Up between adjacent stages is the identity
            bar[s] = self.phi[s](f[s] + bar[s + 1])
        p4 = bar[1] if self.cfg.p4_source == "fused" else bar[4]
        levels = {4: p4}
        levels[5] = self.psi[5](T.pool2_avg(p4))
        levels[3] = self.psi[3](T.upsample_bilinear(p4, 2))
        levels[2] = self.psi[2](T.upsample_bilinear(levels[3], 2))
        return FeaturePyramid(levels={k: levels[k] for k in SCALES}, adapted=bar)


class RegisterPool(Module):
    """Mean over register tokens, then a linear map to the decoder width."""

    def __init__(self, embed_dim: int, width: int, rng: np.random.Generator, dtype=np.float64):
        self.proj = Linear(embed_dim, width, rng, dtype=dtype)

    def forward(self, registers: Tensor) -> Tensor:
        if registers.shape[-2] < 1:
            raise TensorError("register set is empty")
        return self.proj(registers.mean(axis=-2))
