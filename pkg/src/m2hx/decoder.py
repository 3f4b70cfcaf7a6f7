"""Register-gated multi-scale decoder with a selective state-space mixer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter
from .pyramid import SCALES, FeaturePyramid
from .tensor import NonFiniteError, Tensor, TensorError

SCAN_MACS_PER_ELEMENT = 6


@dataclass
class RGMConfig:
    enabled: bool = True
    register_feed: bool = True
    bidirectional: bool = False
    state_size: int = 8
    ffn_ratio: int = 2

    def validate(self) -> None:
        if self.state_size < 1 or self.ffn_ratio < 1:
            raise ValueError("rgm.state_size and rgm.ffn_ratio must be >= 1")


def scan_core(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor) -> Tensor:
    """Diagonal selective recurrence without the skip term.

    Shapes: x, delta (N, T, C); A (C, S); Bm, Cm (N, T, S).
    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * x_t) B_t,  y_t = <C_t, h_t>.
    """
    xd, dd, ad, bd, cd = x.data, delta.data, A.data, Bm.data, Cm.data
    n, steps, c = xd.shape
    s = ad.shape[1]
    if dd.shape != xd.shape or ad.shape[0] != c or bd.shape != (n, steps, s) or cd.shape != (n, steps, s):
        raise TensorError("selective scan shape mismatch")
    decay = np.exp(dd[..., None] * ad)                      # (N,T,C,S)
    u = (dd * xd)[..., None] * bd[:, :, None, :]            # (N,T,C,S)
    hs = np.empty_like(u)
    h = np.zeros((n, c, s), dtype=xd.dtype)
    for t in range(steps):
        h = decay[:, t] * h + u[:, t]
        hs[:, t] = h
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("selective scan state diverged")
    y = np.einsum("ntcs,nts->ntc", hs, cd, optimize=True)
    T.add_macs(steps * c * s * SCAN_MACS_PER_ELEMENT * n)

    def bw(g):
        gC = np.einsum("ntc,ntcs->nts", g, hs, optimize=True)
        gh_all = np.empty_like(hs)
        carry = np.zeros((n, c, s), dtype=xd.dtype)
        for t in range(steps - 1, -1, -1):
            carry = carry + g[:, t, :, None] * cd[:, t, None, :]
            gh_all[:, t] = carry
            carry = carry * decay[:, t]
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_decay = gh_all * h_prev * decay                   # d/d(delta*A)
        g_u = gh_all
        gub = (g_u * bd[:, :, None, :]).sum(-1)             # (N,T,C)
        g_delta = (g_decay * ad).sum(-1) + gub * xd
        g_x = gub * dd
        g_A = np.einsum("ntcs,ntc->cs", g_decay, dd, optimize=True)
        g_B = np.einsum("ntcs,ntc->nts", g_u, dd * xd, optimize=True)
        return g_x, g_delta, g_A, g_B, gC

    return T.make(y, (x, delta, A, Bm, Cm), bw, "selective_scan")


@dataclass
class SSMParams:
    """Plain-array view of one mixer's parameters (for oracles and tests)."""

    A_log: np.ndarray       # (C, S)
    D_skip: np.ndarray      # (C,)
    W_delta: np.ndarray     # (C, C)
    b_delta: np.ndarray     # (C,)
    W_B: np.ndarray         # (S, C)
    W_C: np.ndarray         # (S, C)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]


class SelectiveSSM(Module):
    """Input-dependent (delta, B, C) diagonal state-space mixer with skip gain."""

    def __init__(self, width: int, state_size: int, rng: np.random.Generator,
                 bidirectional: bool = False, dtype=np.float64):
        self.W_delta = Linear(width, width, rng, std=0.1 / np.sqrt(width), dtype=dtype)
        # delta starts in [1e-3, 1e-1] as in common selective-scan initialisation
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), width))
        self.W_delta.bias.data[...] = np.log(np.expm1(dt))
        self.W_B = Linear(width, state_size, rng, bias=False, dtype=dtype)
        self.W_C = Linear(width, state_size, rng, bias=False, dtype=dtype)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=dtype), (width, 1))))
        self.D_skip = Parameter(np.ones(width, dtype))
        self.bidirectional = bidirectional

    def params(self) -> SSMParams:
        return SSMParams(self.A_log.data.copy(), self.D_skip.data.copy(), self.W_delta.weight.data.copy(),
                         self.W_delta.bias.data.copy(), self.W_B.weight.data.copy(), self.W_C.weight.data.copy())

    def load_params(self, p: SSMParams) -> None:
        self.A_log.data[...] = p.A_log
        self.D_skip.data[...] = p.D_skip
        self.W_delta.weight.data[...] = p.W_delta
        self.W_delta.bias.data[...] = p.b_delta
        self.W_B.weight.data[...] = p.W_B
        self.W_C.weight.data[...] = p.W_C

    def _scan(self, z: Tensor) -> Tensor:
        delta = T.softplus(self.W_delta(z))
        A = -T.exp(self.A_log)
        return scan_core(z, delta, A, self.W_B(z), self.W_C(z)) + z * self.D_skip

    def forward(self, z: Tensor) -> Tensor:
        """(N,) T x C -> same shape; raster order along T."""
        squeeze = z.ndim == 2
        if squeeze:
            z = T.expand_dims(z, 0)
        y = self._scan(z)
        if self.bidirectional:
            y = y + T.flip(self._scan(T.flip(z, 1)), 1)
        return y[0] if squeeze else y


def selective_scan(x, params: SSMParams) -> np.ndarray:
    """Vectorised forward of the mixer on a plain (T, C) array."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    width, state = params.A_log.shape
    ssm = SelectiveSSM(width, state, np.random.default_rng(0), dtype=dtype)
    ssm.load_params(params)
    with T.no_grad():
        return ssm(Tensor(x, dtype=dtype)).data


def naive_scan(x, params: SSMParams) -> np.ndarray:
    """Scalar per-step recurrence using only Python floats (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    steps, width = x.shape
    S = params.state_size
    A = [[-math.exp(params.A_log[c][n]) for n in range(S)] for c in range(width)]
    h = [[0.0] * S for _ in range(width)]
    y = np.zeros((steps, width))
    for t in range(steps):
        xt = [float(v) for v in x[t]]
        dlt = []
        for c in range(width):
            z = params.b_delta[c] + sum(params.W_delta[c][j] * xt[j] for j in range(width))
            dlt.append(math.log1p(math.exp(-abs(z))) + max(z, 0.0))
        Bt = [sum(params.W_B[n][j] * xt[j] for j in range(width)) for n in range(S)]
        Ct = [sum(params.W_C[n][j] * xt[j] for j in range(width)) for n in range(S)]
        for c in range(width):
            acc = 0.0
            for n in range(S):
                h[c][n] = math.exp(dlt[c] * A[c][n]) * h[c][n] + dlt[c] * Bt[n] * xt[c]
                acc += Ct[n] * h[c][n]
            y[t, c] = acc + params.D_skip[c] * xt[c]
    return y


class RegisterGate(Module):
    """Per-channel sigmoid gate computed from the register vector."""

    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float64):
        self.proj = Linear(width, width, rng, dtype=dtype)

    def gate(self, r: Tensor) -> Tensor:
        return T.sigmoid(self.proj(r))

    def forward(self, q: Tensor, r: Tensor) -> Tensor:
        """q (N, T, C) tokens, r (N, C) -> q * g broadcast over tokens."""
        if r.shape[-1] != q.shape[-1]:
            raise TensorError(f"gate width {r.shape[-1]} != token width {q.shape[-1]}")
        g = self.gate(r)
        return q * T.expand_dims(g, -2)


class RGMBlock(Module):
    """Gate -> LN -> scan -> projection (residual), LN -> FFN -> projection (residual).

    Both output projections start at zero, so the block is the identity at
    initialisation.
    """

    def __init__(self, width: int, cfg: RGMConfig, rng: np.random.Generator, dtype=np.float64):
        self.gate = RegisterGate(width, rng, dtype) if cfg.register_feed else None
        self.norm1 = LayerNorm(width, dtype=dtype)
        self.mixer = SelectiveSSM(width, cfg.state_size, rng, cfg.bidirectional, dtype)
        self.out_mix = Linear(width, width, rng, zero=True, dtype=dtype)
        self.norm2 = LayerNorm(width, dtype=dtype)
        hidden = width * cfg.ffn_ratio
        self.ffn_in = Linear(width, hidden, rng, dtype=dtype)
        self.ffn_out = Linear(hidden, width, rng, dtype=dtype)
        self.out_ffn = Linear(width, width, rng, zero=True, dtype=dtype)

    def tokens(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w).transpose(0, 2, 1)

    def forward(self, x: Tensor, r: Tensor | None) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.expand_dims(x, 0)
            r = None if r is None else T.expand_dims(r, 0)
        n, c, h, w = x.shape
        q = self.tokens(x)
        qbar = self.gate(q, r) if self.gate is not None else q
        q1 = q + self.out_mix(self.mixer(self.norm1(qbar)))
        q2 = q1 + self.out_ffn(self.ffn_out(T.gelu(self.ffn_in(self.norm2(q1)))))
        s = q2.transpose(0, 2, 1).reshape(n, c, h, w)
        return s[0] if squeeze else s


class RGMDecoder(Module):
    """Top-down update x_k = p_k + Up(s_{k+1}), s_k = RGM_k(x_k, r)."""

    def __init__(self, width: int, cfg: RGMConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.blocks = {k: RGMBlock(width, cfg, rng, dtype) for k in SCALES} if cfg.enabled else {}

    def forward(self, pyr: FeaturePyramid, r: Tensor | None) -> dict[int, Tensor]:
        states: dict[int, Tensor] = {}
        for k in SCALES:
            x = pyr[k] if k == SCALES[0] else pyr[k] + T.upsample_bilinear(states[k + 1], 2)
            states[k] = self.blocks[k](x, r) if self.cfg.enabled else x
        return states


def random_ssm_params(rng: np.random.Generator, width: int, state: int) -> SSMParams:
    """Parameters with step sizes spread over ~[0.05, 3] so decay matters."""
    return SSMParams(
        A_log=rng.uniform(-1.0, 1.5, (width, state)),
        D_skip=rng.standard_normal(width),
        W_delta=rng.standard_normal((width, width)) * 0.5 / np.sqrt(width),
        b_delta=rng.uniform(-3.0, 1.0, width),
        W_B=rng.standard_normal((state, width)) / np.sqrt(width),
        W_C=rng.standard_normal((state, width)) / np.sqrt(width),
    )


@dataclass
class ScanCheck:
    steps: int
    width: int
    state: int
    max_abs_err: float
    causal: bool


def scan_oracle_suite(instances: int = 100, seed: int = 0, max_steps: int = 64, max_width: int = 16,
                      max_state: int = 8) -> list[ScanCheck]:
    """Vectorised scan vs the scalar recurrence, plus a causality probe per instance.

    The probe perturbs one input step ``t0`` and requires outputs before ``t0``
    to stay bitwise identical while some output at or after ``t0`` changes.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(instances):
        steps = int(rng.integers(2, max_steps + 1))
        width = int(rng.integers(1, max_width + 1))
        state = int(rng.integers(1, max_state + 1))
        p = random_ssm_params(rng, width, state)
        x = rng.standard_normal((steps, width))
        y = selective_scan(x, p)
        err = float(np.max(np.abs(y - naive_scan(x, p))))
        t0 = int(rng.integers(1, steps))
        x2 = x.copy()
        x2[t0] += rng.standard_normal(width) + 1.0
        y2 = selective_scan(x2, p)
        causal = bool(np.array_equal(y[:t0], y2[:t0]) and not np.array_equal(y[t0:], y2[t0:]))
        out.append(ScanCheck(steps, width, state, err, causal))
    return out
