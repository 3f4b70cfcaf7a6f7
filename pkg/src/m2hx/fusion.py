"""Task adaptors, cross-scale fusion, cross-task mixing and MSCA refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvGNGELU, Module
from .pyramid import SCALES
from .tensor import Tensor, TensorError

TASKS = ("depth", "sem", "norm", "edge")
MIXED_TASKS = ("sem", "norm", "edge")     # depth uses its own bin head
DEFAULT_PARTNERS = {"sem": ("depth", "edge"), "norm": ("depth",), "edge": ("sem",), "depth": ()}


@dataclass
class CTMConfig:
    enabled: bool = True


@dataclass
class MSCAConfig:
    enabled: bool = True
    kernel: int = 7

    def validate(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("msca.kernel must be a positive odd integer")


@dataclass
class TaskSet:
    active: tuple[str, ...] = TASKS
    partners: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.active) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        self.active = tuple(t for t in TASKS if t in self.active)
        if not self.partners:
            self.partners = {t: tuple(j for j in DEFAULT_PARTNERS[t] if j in self.active) for t in self.active}
        for t, ps in self.partners.items():
            if t in ps:
                raise ValueError(f"task {t} cannot be its own partner")

    def mixed(self) -> tuple[str, ...]:
        return tuple(t for t in self.active if t in MIXED_TASKS)

    def sources(self) -> tuple[str, ...]:
        used = {j for t in self.mixed() for j in self.partners.get(t, ())}
        return tuple(t for t in TASKS if t in used)


@dataclass
class TaskFeatures:
    f: dict[str, dict[int, Tensor]]
    fused: dict[str, dict[int, Tensor]]
    h: dict[str, Tensor]
    u: dict[str, Tensor] = field(default_factory=dict)
    refined: dict[str, Tensor] = field(default_factory=dict)
    attention: dict[str, Tensor] = field(default_factory=dict)
    modulation: dict[tuple[str, str], Tensor] = field(default_factory=dict)


class TaskAdaptor(Module):
    """f_{k,t} = B_{k,t}(s_k) + Up(f_{k+1,t}) with B = conv3x3 + GN + GELU."""

    def __init__(self, width: int, rng: np.random.Generator, groups: int = 8, dtype=np.float64):
        self.branch = {k: ConvGNGELU(width, width, rng, groups, dtype=dtype) for k in SCALES}

    def forward(self, states: dict[int, Tensor]) -> dict[int, Tensor]:
        f: dict[int, Tensor] = {}
        for k in SCALES:
            out = self.branch[k](states[k])
            f[k] = out if k == SCALES[0] else out + T.upsample_bilinear(f[k + 1], 2)
        return f


def cross_scale_fuse(f: dict[int, Tensor]) -> dict[int, Tensor]:
    """f-hat_{k} = f_{k} + Up(f-hat_{k+1}), coarse to fine."""
    fused: dict[int, Tensor] = {}
    for k in SCALES:
        fused[k] = f[k] if k == SCALES[0] else f[k] + T.upsample_bilinear(fused[k + 1], 2)
    return fused


class CrossTaskMixer(Module):
    """z_j = Pi_j(h_j) * (1 + sigmoid(G_j(h_j))); u_t = Conv1x1([h_t, z_j...])."""

    def __init__(self, width: int, tasks: TaskSet, rng: np.random.Generator, enabled: bool = True,
                 dtype=np.float64):
        self.partners = {t: (tasks.partners.get(t, ()) if enabled else ()) for t in tasks.mixed()}
        sources = sorted({j for ps in self.partners.values() for j in ps}, key=TASKS.index)
        self.project = {j: Conv2d(width, width, 1, rng, dtype=dtype) for j in sources}
        self.gate = {j: Conv2d(width, width, 1, rng, dtype=dtype) for j in sources}
        self.merge = {t: Conv2d(width * (1 + len(ps)), width, 1, rng, dtype=dtype)
                      for t, ps in self.partners.items()}

    def modulate(self, j: str, hj: Tensor) -> tuple[Tensor, Tensor]:
        factor = T.sigmoid(self.gate[j](hj)) + 1.0
        return self.project[j](hj) * factor, factor

    def forward(self, h: dict[str, Tensor], t: str, record: dict | None = None) -> Tensor:
        parts = [h[t]]
        for j in self.partners[t]:
            if h[j].shape[-2:] != h[t].shape[-2:]:
                raise TensorError(f"CTM partner {j} spatial size {h[j].shape} != {h[t].shape}")
            z, factor = self.modulate(j, h[j])
            if record is not None:
                record[(t, j)] = factor
            parts.append(z)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-3)
        return self.merge[t](x)


ATTN_INIT = 0.1


class MSCA(Module):
    """Depthwise 5x5, residual 1xk and kx1 strips, sigmoid 1x1 attention."""

    def __init__(self, width: int, kappa: int, rng: np.random.Generator, dtype=np.float64):
        if kappa % 2 == 0:
            raise ValueError("msca.kernel must be odd")
        self.dw5 = Conv2d(width, width, 5, rng, groups=width, dtype=dtype)
        self.dw_row = Conv2d(width, width, (1, kappa), rng, groups=width, dtype=dtype)
        self.dw_col = Conv2d(width, width, (kappa, 1), rng, groups=width, dtype=dtype)
        # m2 accumulates three conv outputs unnormalised; a 1/sqrt(fan_in) init would
        # push the logits far enough out to saturate the sigmoid on the first step
        self.attn = Conv2d(width, width, 1, rng, std=ATTN_INIT / np.sqrt(width), dtype=dtype)

    def attention(self, u: Tensor) -> Tensor:
        m0 = self.dw5(u)
        m1 = m0 + self.dw_row(m0)
        m2 = m1 + self.dw_col(m1)
        # keep a inside the open interval even where the sigmoid rounds to 0 or 1
        eps = float(np.finfo(u.dtype).eps)
        return T.clip(T.sigmoid(self.attn(m2)), eps, 1.0 - eps)

    def forward(self, u: Tensor, record: dict | None = None, key: str | None = None) -> Tensor:
        a = self.attention(u)
        if record is not None:
            record[key] = a
        return u + a * u


class TaskFusion(Module):
    def __init__(self, width: int, tasks: TaskSet, rng: np.random.Generator, ctm: bool = True,
                 msca: bool = True, kappa: int = 7, groups: int = 8, dtype=np.float64):
        self.tasks = tasks
        self.adaptors = {t: TaskAdaptor(width, rng, groups, dtype) for t in tasks.active}
        self.head_proj = {t: Conv2d(width, width, 1, rng, dtype=dtype) for t in tasks.active}
        self.ctm = CrossTaskMixer(width, tasks, rng, ctm, dtype) if tasks.mixed() else None
        self.ctm_enabled = ctm
        self.msca = {t: MSCA(width, kappa, rng, dtype) for t in tasks.mixed()} if msca else {}

    def forward(self, states: dict[int, Tensor]) -> TaskFeatures:
        f = {t: self.adaptors[t](states) for t in self.tasks.active}
        fused = {t: cross_scale_fuse(f[t]) for t in self.tasks.active}
        h = {t: self.head_proj[t](fused[t][SCALES[-1]]) for t in self.tasks.active}
        out = TaskFeatures(f=f, fused=fused, h=h)
        for t in self.tasks.active:
            if t not in MIXED_TASKS:
                out.refined[t] = h[t]
                continue
            u = self.ctm(h, t, out.modulation)
            out.u[t] = u
            out.refined[t] = self.msca[t](u, out.attention, t) if self.msca else u
        return out
