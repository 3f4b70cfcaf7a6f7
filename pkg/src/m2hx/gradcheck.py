"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, TensorError, backward


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _eval(f, *args) -> float:
    out = f(*args)
    val = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NonFiniteError("non-finite value during gradient check")
    return val


def _check_eps(eps: float) -> None:
    if not 1e-7 <= eps <= 1e-3:
        raise TensorError(f"eps {eps} outside [1e-7, 1e-3]")


def numeric_grad(f: Callable[[Tensor], Tensor], base: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``base``."""
    _check_eps(eps)
    base = np.asarray(base)
    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        plus[i] += eps
        minus = base.copy().reshape(-1)
        minus[i] -= eps
        fp = _eval(f, Tensor(plus.reshape(base.shape)))
        fm = _eval(f, Tensor(minus.reshape(base.shape)))
        flat[i] = (fp - fm) / (2 * eps)
    return numeric


def analytic_grad(f: Callable[[Tensor], Tensor], base: np.ndarray) -> np.ndarray:
    probe = Tensor(np.array(base, copy=True), requires_grad=True)
    backward(f(probe))
    return probe.grad if probe.grad is not None else np.zeros_like(probe.data)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, ``|a - n| / max(1, |a|)`` over all coordinates.
    """
    _check_eps(eps)
    base = np.asarray(x.data)
    return _rel_err(analytic_grad(f, base), numeric_grad(f, base, eps))


def sample_coords(size: int, max_coords: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return rng.choice(size, max_coords, replace=False)


def numeric_param_grad(f: Callable[[], Tensor], p: Tensor, idx: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` at flat coordinates ``idx`` of ``p``, perturbed in place."""
    _check_eps(eps)
    flat = p.data.reshape(-1)
    num = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = _eval(f)
        flat[i] = old - eps
        fm = _eval(f)
        flat[i] = old
        num[j] = (fp - fm) / (2 * eps)
    return num


def analytic_param_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(f())
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = 48, rng: np.random.Generator | None = None) -> float:
    """Check gradients of a closure w.r.t. tensors it reads in place.

    Coordinates are perturbed directly in each parameter's buffer; when a
    tensor is larger than ``max_coords`` a random subset is probed.
    """
    _check_eps(eps)
    rng = rng or np.random.default_rng(0)
    grads = analytic_param_grads(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        idx = sample_coords(p.size, max_coords, rng)
        worst = max(worst, _rel_err(g.reshape(-1)[idx], numeric_param_grad(f, p, idx, eps)))
    return worst
