"""Toy register-augmented ViT standing in for a frozen foundation backbone.

All base weights are frozen. Low-rank adapters are attached to the QKV and
both MLP projections of the final ``lora_blocks`` blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor, TensorError


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    num_registers: int = 4
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    lora_rank: int = 4
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    lora_blocks: int = 4
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("backbone.image_size must be divisible by backbone.patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("backbone.embed_dim must be divisible by backbone.num_heads")
        if len(self.tap_layers) != 4 or len(set(self.tap_layers)) != 4:
            raise ValueError("backbone.tap_layers needs exactly four distinct layers")
        if not all(1 <= t <= self.num_blocks for t in self.tap_layers):
            raise ValueError("backbone.tap_layers must lie in [1, backbone.num_blocks]")
        if not 0 <= self.lora_blocks <= self.num_blocks:
            raise ValueError("backbone.lora_blocks must not exceed backbone.num_blocks")
        if self.lora_rank < 0 or self.num_registers < 1:
            raise ValueError("backbone.lora_rank >= 0 and backbone.num_registers >= 1 required")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ValueError("backbone.lora_dropout must be in [0, 1)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2


@dataclass
class BackboneOutput:
    taps: dict[int, Tensor]          # layer -> (N, num_patches, D)
    registers: Tensor                # (N, R, D), final layer
    grid: int = field(default=0)


class LoraLinear(Module):
    """Frozen ``W`` plus a trainable low-rank update: ``Wx + alpha * B(Ax)``."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator,
                 dropout: float = 0.0, std: float | None = None, dtype=np.float64):
        self.base = Linear(d_in, d_out, rng, std=std, frozen=True, dtype=dtype)
        self.rank, self.alpha, self.dropout = rank, float(alpha), dropout
        if rank > 0:
            self.A = Parameter((rng.standard_normal((rank, d_in)) / np.sqrt(d_in)).astype(dtype))
            self.B = Parameter(np.zeros((d_out, rank), dtype))
        else:
            self.A = self.B = None
        self._rng = np.random.default_rng(rng.integers(1 << 32))

    @property
    def W(self) -> Parameter:
        return self.base.weight

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.base.d_in:
            raise TensorError(f"LoRA input width {x.shape[-1]} != {self.base.d_in}")
        out = self.base(x)
        if self.A is None:
            return out
        h = T.dropout(x, self.dropout, self._rng, self.training)
        low = T.linear(T.linear(h, self.A), self.B)
        return out + low * self.alpha

    def extra_params(self) -> int:
        return self.rank * (self.base.d_in + self.base.d_out)


def _proj(d_in, d_out, cfg, rng, adapted, dtype, std=None):
    if adapted:
        return LoraLinear(d_in, d_out, cfg.lora_rank, cfg.lora_alpha, rng, cfg.lora_dropout, std, dtype)
    return Linear(d_in, d_out, rng, std=std, frozen=True, dtype=dtype)


class Block(Module):
    """Pre-norm transformer block; projections optionally LoRA-adapted."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, adapted: bool, dtype):
        d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
        out_std = 1.0 / np.sqrt(2 * cfg.num_blocks * d)
        self.norm1 = LayerNorm(d, frozen=True, dtype=dtype)
        self.qkv = _proj(d, 3 * d, cfg, rng, adapted, dtype)
        self.proj = Linear(d, d, rng, std=out_std, frozen=True, dtype=dtype)
        self.norm2 = LayerNorm(d, frozen=True, dtype=dtype)
        self.fc1 = _proj(d, hidden, cfg, rng, adapted, dtype)
        self.fc2 = _proj(hidden, d, cfg, rng, adapted, dtype, std=out_std * np.sqrt(d / hidden))
        self.heads = cfg.num_heads

    def attention(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
        y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.proj(y)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_proj = Linear(3 * cfg.patch_size ** 2, d, rng, frozen=True, dtype=dtype)
        self.pos_embed = Parameter((rng.standard_normal((cfg.num_patches, d)) * 0.02).astype(dtype), frozen=True)
        self.registers = Parameter((rng.standard_normal((cfg.num_registers, d)) * 0.02).astype(dtype),
                                   frozen=True)
        first_adapted = cfg.num_blocks - cfg.lora_blocks
        self.blocks = [Block(cfg, rng, i >= first_adapted, dtype) for i in range(cfg.num_blocks)]

    def patch_embed(self, image: Tensor) -> Tensor:
        """(N,)3,H,W image -> (N, patches + registers, D) token sequence."""
        if image.ndim == 3:
            image = T.expand_dims(image, 0)
        n, c, h, w = image.shape
        cfg = self.cfg
        if c != 3 or h != cfg.image_size or w != cfg.image_size:
            raise TensorError(f"expected (N,3,{cfg.image_size},{cfg.image_size}) image, got {image.shape}")
        p, g = cfg.patch_size, cfg.grid
        patches = image.reshape(n, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, 3 * p * p)
        tokens = self.patch_proj(patches) + self.pos_embed
        regs = T.expand(self.registers.reshape(1, cfg.num_registers, cfg.embed_dim),
                        (n, cfg.num_registers, cfg.embed_dim))
        return T.concat([tokens, regs], axis=1)

    def forward(self, image: Tensor) -> BackboneOutput:
        x = self.patch_embed(image)
        npatch = self.cfg.num_patches
        taps = {}
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in self.cfg.tap_layers:
                taps[i] = x[:, :npatch, :]
        return BackboneOutput(taps=taps, registers=x[:, npatch:, :], grid=self.cfg.grid)

    def lora_layers(self) -> list[LoraLinear]:
        out = []
        for blk in self.blocks:
            out.extend(m for m in (blk.qkv, blk.fc1, blk.fc2) if isinstance(m, LoraLinear))
        return out


def lora_param_count(cfg: BackboneConfig) -> int:
    """Trainable LoRA parameters: sum of r * (d_in + d_out) over adapted projections."""
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    per_block = cfg.lora_rank * ((d + 3 * d) + (d + hidden) + (hidden + d))
    return per_block * cfg.lora_blocks
