"""Parameter containers and the small layer vocabulary shared by all blocks."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module. Frozen parameters never get grads."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None


class Module:
    training = True
    qualname = ""

    def __call__(self, *args, **kwargs):
        T.push_scope(self.qualname)
        try:
            return self.forward(*args, **kwargs)
        finally:
            T.pop_scope()

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + name + ".")

    def assign_names(self) -> None:
        for name, mod in self.named_modules():
            mod.qualname = name

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if not (trainable_only and p.frozen))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def _init(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None, zero: bool = False, frozen: bool = False, dtype=np.float64):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        w = np.zeros((d_out, d_in), dtype) if zero else _init(rng, (d_out, d_in), std, dtype)
        self.weight = Parameter(w, frozen=frozen)
        self.bias = Parameter(np.zeros(d_out, dtype), frozen=frozen) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int | tuple[int, int], rng: np.random.Generator,
                 groups: int = 1, bias: bool = True, zero: bool = False, std: float | None = None,
                 dtype=np.float64):
        kh, kw = (k, k) if isinstance(k, int) else k
        fan_in = (c_in // groups) * kh * kw
        std = 1.0 / np.sqrt(fan_in) if std is None else std
        shape = (c_out, c_in // groups, kh, kw)
        self.weight = Parameter(np.zeros(shape, dtype) if zero else _init(rng, shape, std, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype)) if bias else None
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, frozen: bool = False, dtype=np.float64):
        self.weight = Parameter(np.ones(dim, dtype), frozen=frozen)
        self.bias = Parameter(np.zeros(dim, dtype), frozen=frozen)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5, dtype=np.float64):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.weight = Parameter(np.ones(channels, dtype))
        self.bias = Parameter(np.zeros(channels, dtype))
        self.groups, self.eps = groups, eps

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class ConvGNGELU(Module):
    """3x3 conv, GroupNorm, GELU: the adapter/branch building block."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, groups: int = 8,
                 k: int = 3, dtype=np.float64):
        self.conv = Conv2d(c_in, c_out, k, rng, dtype=dtype)
        self.norm = GroupNorm(c_out, min(groups, c_out), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.norm(self.conv(x)))
