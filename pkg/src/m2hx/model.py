"""End-to-end network: backbone -> pyramid -> decoder -> task fusion -> heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .decoder import RGMConfig, RGMDecoder
from .fusion import CTMConfig, MSCAConfig, TaskFusion, TaskSet, TASKS
from .heads import AuxHeads, DepthHead, EdgeHead, HeadsConfig, NormalHead, ConvHead, TaskBundle
from .nn import Module
from .pyramid import SCALES, HFA, PyramidConfig, RegisterPool
from .tensor import Tensor
from . import tensor as T

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    rgm: RGMConfig = field(default_factory=RGMConfig)
    ctm: CTMConfig = field(default_factory=CTMConfig)
    msca: MSCAConfig = field(default_factory=MSCAConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    tasks: tuple[str, ...] = TASKS

    def validate(self) -> None:
        self.backbone.validate()
        self.pyramid.validate()
        self.rgm.validate()
        self.msca.validate()
        self.heads.validate()
        if self.backbone.grid % 2:
            raise ValueError("backbone.image_size / backbone.patch_size must be even (p5 pooling)")
        if not self.tasks or set(self.tasks) - set(TASKS):
            raise ValueError(f"train.tasks must be a non-empty subset of {TASKS}")


@dataclass
class Forward:
    """Everything one forward pass produces, for losses and diagnostics."""

    bundle: TaskBundle
    pyramid: object
    register: Tensor | None
    states: dict[int, Tensor]
    features: object


class M2HX(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = cfg.pyramid.width
        self.tasks = TaskSet(tuple(cfg.tasks))
        self.backbone = Backbone(cfg.backbone, rng, dtype)
        self.hfa = HFA(cfg.backbone.embed_dim, cfg.pyramid, rng, dtype)
        use_reg = cfg.rgm.enabled and cfg.rgm.register_feed
        self.register_pool = RegisterPool(cfg.backbone.embed_dim, c, rng, dtype) if use_reg else None
        self.decoder = RGMDecoder(c, cfg.rgm, rng, dtype)
        self.fusion = TaskFusion(c, self.tasks, rng, cfg.ctm.enabled, cfg.msca.enabled, cfg.msca.kernel,
                                 cfg.pyramid.groups, dtype)
        active = self.tasks.active
        self.depth_head = DepthHead(c, cfg.heads.depth, rng, dtype) if "depth" in active else None
        self.sem_head = ConvHead(c, cfg.heads.num_classes, rng, dtype) if "sem" in active else None
        self.normal_head = NormalHead(c, rng, dtype) if "norm" in active else None
        self.edge_head = EdgeHead(c, rng, dtype) if "edge" in active else None
        self.aux_heads = AuxHeads(c, active, SCALES, cfg.heads, rng, dtype)
        self.assign_names()

    @property
    def out_factor(self) -> int:
        # finest pyramid level sits at twice the token grid resolution
        return self.cfg.backbone.image_size // (4 * self.cfg.backbone.grid)

    def run(self, image) -> Forward:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim == 3:
            x = T.expand_dims(x, 0)
        feats = self.backbone(x)
        pyr = self.hfa(feats.taps)
        r = self.register_pool(feats.registers) if self.register_pool is not None else None
        states = self.decoder(pyr, r)
        tf = self.fusion(states)
        f = self.out_factor
        b = TaskBundle()
        if self.depth_head is not None:
            b.depth, b.depth_diag = self.depth_head(tf.refined["depth"], f)
        if self.sem_head is not None:
            b.sem_logits = self.sem_head(tf.refined["sem"], f)
        if self.normal_head is not None:
            b.normals = self.normal_head(tf.refined["norm"], f)
        if self.edge_head is not None:
            b.edges = self.edge_head(tf.refined["edge"], f)
        b.aux = self.aux_heads(tf.f)
        return Forward(b, pyr, r, states, tf)

    def forward(self, image) -> TaskBundle:
        return self.run(image).bundle

    def frozen_parameters(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters() if p.frozen}

    def trainable_parameters(self):
        return [(k, p) for k, p in self.named_parameters() if not p.frozen]
