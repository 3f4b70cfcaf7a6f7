"""Flat ``section.key = value`` configuration files with typed defaults.

Precedence is flags > file > defaults. ``M2HX_SEED`` supplies ``train.seed``
and ``data.seed`` when neither the file nor a flag sets them.
"""
from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace

from .backbone import BackboneConfig
from .decoder import RGMConfig
from .fusion import CTMConfig, MSCAConfig
from .heads import HeadsConfig
from .model import ModelConfig
from .objectives import LossConfig
from .pyramid import PyramidConfig
from .synthdata import SceneSpec
from .training import TrainConfig

SECTIONS = ("backbone", "pyramid", "rgm", "ctm", "msca", "heads", "loss", "train", "data")
SEED_ENV = "M2HX_SEED"

# internal attribute path -> public key, where the two differ
RENAMES = {
    "rgm.register_feed": "rgm.register_feed.enabled",
    "heads.num_classes": "heads.sem.num_classes",
}

DOCS = {
    "backbone.image_size": "input side length in pixels",
    "backbone.patch_size": "patch side; token grid = image_size / patch_size",
    "backbone.embed_dim": "token width D",
    "backbone.num_blocks": "transformer blocks",
    "backbone.num_heads": "attention heads",
    "backbone.num_registers": "register tokens appended after patch tokens",
    "backbone.tap_layers": "four blocks whose outputs feed the pyramid",
    "backbone.lora_rank": "low-rank adapter rank r (0 disables adapters)",
    "backbone.lora_alpha": "adapter scale alpha in W + alpha*BA",
    "backbone.lora_dropout": "dropout on the adapter input",
    "backbone.lora_blocks": "adapters sit on this many final blocks",
    "backbone.mlp_ratio": "MLP hidden width / D",
    "pyramid.width": "decoder width C",
    "pyramid.groups": "GroupNorm groups in conv blocks",
    "pyramid.p4_source": "fused (top-down aggregate) or deepest (adapted last tap)",
    "rgm.enabled": "register-gated scan blocks in the decoder",
    "rgm.register_feed.enabled": "gate decoder tokens with the pooled registers",
    "rgm.bidirectional": "add a reversed scan pass",
    "rgm.state_size": "scan state size N",
    "rgm.ffn_ratio": "FFN hidden width / C",
    "ctm.enabled": "cross-task mixing for sem/norm/edge",
    "msca.enabled": "multi-scale convolutional attention refinement",
    "msca.kernel": "strip convolution length (odd)",
    "heads.depth.num_bins": "adaptive depth bins",
    "heads.depth.d_min": "smallest representable depth (m)",
    "heads.depth.d_max": "largest representable depth (m)",
    "heads.depth.min_width": "smallest bin width as a fraction of the depth range",
    "heads.sem.num_classes": "semantic classes K",
    "loss.aux_weight": "deep-supervision weight per scale",
    "loss.lambda_dn": "depth-normal consistency weight",
    "loss.lambda_se": "edge-semantic consistency weight",
    "loss.edge_pos_weight": "BCE weight on edge pixels",
    "loss.uncertainty": "learned per-task log-variance weighting",
    "train.steps": "optimiser steps",
    "train.batch_size": "frames per step",
    "train.lr": "peak learning rate",
    "train.weight_decay": "decoupled weight decay",
    "train.warmup": "linear warmup steps",
    "train.optimizer": "adamw or sgd",
    "train.seed": "model init and data stream seed",
    "train.tasks": "active tasks, comma separated",
    "train.dtype": "f32 or f64",
    "train.deterministic": "disable dropout",
    "train.eval_every": "held-out evaluation cadence in steps (0 = end only)",
    "train.eval_frames": "held-out frames per evaluation",
    "train.log_every": "loss log cadence in steps",
    "data.seed": "scene seed for gen-data",
    "data.image_size": "scene side length",
    "data.min_boxes": "fewest boxes per scene",
    "data.max_boxes": "most boxes per scene",
    "data.min_side": "shortest box side",
    "data.max_side": "longest box side",
    "data.large_area": "box area at which the large-box class applies",
    "data.d_min": "scene depth range lower end (m)",
    "data.d_max": "scene depth range upper end (m)",
    "data.floor": "include the floor plane",
    "data.slope_prob": "chance of a sloped box top",
    "data.max_slope": "largest box-top slope (m per pixel)",
    "data.noise": "RGB noise std",
    "data.grid": "box corner lattice spacing",
}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    rgm: RGMConfig = field(default_factory=RGMConfig)
    ctm: CTMConfig = field(default_factory=CTMConfig)
    msca: MSCAConfig = field(default_factory=MSCAConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SceneSpec = field(default_factory=SceneSpec)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.pyramid, self.rgm, self.ctm, self.msca, self.heads,
                           tuple(self.train.tasks))

    def validate(self) -> "Config":
        try:
            self.model_config().validate()
            self.loss.validate()
            self.train.validate()
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.image_size != self.backbone.image_size:
            raise ConfigError(f"data.image_size ({self.data.image_size}) must equal "
                              f"backbone.image_size ({self.backbone.image_size})")
        d = self.heads.depth
        if not d.d_min <= self.data.d_min < self.data.d_max <= d.d_max:
            raise ConfigError(f"data.d_min/data.d_max ({self.data.d_min}, {self.data.d_max}) must lie within "
                              f"heads.depth.d_min/heads.depth.d_max ({d.d_min}, {d.d_max})")
        return self


# -- schema ------------------------------------------------------------------
def _walk(obj, prefix: str):
    for f in fields(obj):
        value = getattr(obj, f.name)
        path = f"{prefix}.{f.name}"
        if is_dataclass(value):
            yield from _walk(value, path)
        else:
            yield path, value


def schema(cfg: Config | None = None) -> dict[str, tuple[str, object]]:
    """Public key -> (attribute path, current value), in file order."""
    cfg = cfg or Config()
    out = {}
    for section in SECTIONS:
        for path, value in _walk(getattr(cfg, section), section):
            out[RENAMES.get(path, path)] = (path, value)
    return out


def _elem_type(path: str):
    """Annotated element type of a tuple field (``int`` or ``str``)."""
    parts = path.split(".")
    cls = Config
    for p in parts[:-1]:
        cls = typing.get_type_hints(cls)[p]
    hint = typing.get_type_hints(cls)[parts[-1]]
    return typing.get_args(hint)[0]


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_value(key: str, raw: str, default, path: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = _elem_type(path)
            return tuple(elem(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _set(cfg: Config, path: str, value) -> Config:
    section, *rest = path.split(".")
    def put(obj, names):
        if len(names) == 1:
            return replace(obj, **{names[0]: value})
        return replace(obj, **{names[0]: put(getattr(obj, names[0]), names[1:])})
    return replace(cfg, **{section: put(getattr(cfg, section), rest)})


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines (``#`` comments) -> raw string map; rejects duplicates."""
    known = schema()
    out: dict[str, str] = {}
    for i, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{i}: expected 'section.key = value'")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{i}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{i}: duplicate key {key!r}")
        out[key] = raw
    return out


def parse_flags(flags) -> dict[str, str]:
    """``--section.key=value`` items -> raw string map."""
    known = schema()
    out: dict[str, str] = {}
    for flag in flags or ():
        item = flag[2:] if flag.startswith("--") else flag
        if "=" not in item:
            raise ConfigError(f"override {flag!r} must look like --section.key=value")
        key, raw = item.split("=", 1)
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in override {flag!r}")
        out[key] = raw
    return out


def build(raw: dict[str, str], env: dict | None = None) -> Config:
    env = os.environ if env is None else env
    raw = dict(raw)
    seed = env.get(SEED_ENV)
    if seed is not None:
        for key in ("train.seed", "data.seed"):
            raw.setdefault(key, seed)
    cfg = Config()
    known = schema(cfg)
    for key, text in raw.items():
        path, default = known[key]
        cfg = _set(cfg, path, parse_value(key, text, default, path))
    return cfg.validate()


def parse_config(path: str | os.PathLike | None = None, overrides=None, env: dict | None = None) -> Config:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = parse_lines(fh.read().splitlines(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw.update(parse_flags(overrides))
    return build(raw, env)


def parse_text(text: str, overrides=None, env: dict | None = None) -> Config:
    raw = parse_lines(text.splitlines())
    raw.update(parse_flags(overrides))
    return build(raw, env)


def echo(cfg: Config, docs: bool = False) -> str:
    """Full effective configuration, one ``key = value`` line per key."""
    lines = []
    for key, (_, value) in schema(cfg).items():
        line = f"{key} = {format_value(value)}"
        lines.append(f"{line:<44} # {DOCS[key]}" if docs else line)
    return "\n".join(lines) + "\n"
