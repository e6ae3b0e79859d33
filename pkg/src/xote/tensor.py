"""Numerical kernel for the tagger: layers with hand-written backward passes,
Adam, and a finite-difference gradient checker.

Everything runs in float64. Randomness comes from :func:`make_rng`, which
wraps numpy's PCG64 bit generator seeded through a ``SeedSequence`` built
from the run seed plus purpose keys, so every random stream (init, dropout,
shuffling, splits) is a fixed function of the 64-bit seed.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericError, NumericWarning

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *keys) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``keys`` (ints or strings) select an
    independent stream, e.g. ``make_rng(seed, "dropout", epoch)``."""
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvKernel:
    """Same-padded 1-d convolution weights of shape (width, in_dim, out_dim)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ConfigError(f"kernel weights must be 3-d, got shape {self.weights.shape}")
        if self.width % 2 != 1:
            raise ConfigError(f"kernel width must be odd, got {self.width}")
        if self.bias.shape != (self.out_dim,):
            raise ConfigError(f"bias shape {self.bias.shape} != ({self.out_dim},)")

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[2]


def _im2col(x: np.ndarray, width: int) -> np.ndarray:
    # (..., n, d) -> (..., n, width*d), zero rows outside [0, n)
    half = (width - 1) // 2
    n = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x, pad)
    return np.concatenate([xp[..., j:j + n, :] for j in range(width)], axis=-1)


def conv1d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """out[i] = bias + sum_j x[i + j] @ weights[j + half], zero-padded so the
    output has the same length as ``x``. Leading batch axes are allowed."""
    if x.shape[-1] != kernel.in_dim:
        raise ConfigError(f"input dim {x.shape[-1]} != kernel in_dim {kernel.in_dim}")
    if x.shape[-2] < 1:
        raise ConfigError("conv1d needs at least one position")
    _check_finite("conv1d input", x)
    cols = _im2col(x, kernel.width)
    flat = kernel.weights.reshape(-1, kernel.out_dim)
    return cols @ flat + kernel.bias


def conv1d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray):
    """Returns (grad_x, grad_weights, grad_bias) for :func:`conv1d`."""
    w, din, dout = kernel.weights.shape
    half = (w - 1) // 2
    n = x.shape[-2]
    cols = _im2col(x, w)
    g2 = grad_out.reshape(-1, dout)
    grad_w = (cols.reshape(-1, w * din).T @ g2).reshape(w, din, dout)
    grad_b = g2.sum(axis=0)
    dcols = grad_out @ kernel.weights.reshape(-1, dout).T
    dxp = np.zeros(x.shape[:-2] + (n + 2 * half, din))
    for j in range(w):
        dxp[..., j:j + n, :] += dcols[..., j * din:(j + 1) * din]
    return dxp[..., half:half + n, :], grad_w, grad_b


# --------------------------------------------------------------------------
# dense layers and activations


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient 0 at z == 0
    return grad * (z > 0)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


_ACTIVATIONS = ("relu", "softmax", "none")


def dense(x: np.ndarray, W: np.ndarray, b: np.ndarray, activation: str = "none") -> np.ndarray:
    """y = f(x @ W + b)."""
    if activation not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ConfigError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    z = x @ W + b
    if activation == "relu":
        return relu(z)
    if activation == "softmax":
        return softmax(z)
    return z


def dense_backward(x, W, b, activation, grad_y):
    """Returns (grad_x, grad_W, grad_b). Recomputes the pre-activation."""
    z = x @ W + b
    if activation == "relu":
        gz = relu_backward(z, grad_y)
    elif activation == "softmax":
        y = softmax(z)
        gz = y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))
    else:
        gz = grad_y
    gz2 = gz.reshape(-1, W.shape[1])
    grad_W = x.reshape(-1, W.shape[0]).T @ gz2
    return gz @ W.T, grad_W, gz2.sum(axis=0)


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """-sum_t p_t log q_t for a one-hot ``p``. Zero probabilities at the gold
    tag are clamped to 1e-12 with a :class:`NumericWarning`."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ConfigError(f"shape mismatch: {p.shape} vs {q.shape}")
    gold = p > 0
    qg = q[gold]
    if np.any(qg < LOG_FLOOR):
        warnings.warn("predicted probability below log floor, clamped", NumericWarning, stacklevel=2)
        qg = np.maximum(qg, LOG_FLOOR)
    return float(-(p[gold] * np.log(qg)).sum())


# --------------------------------------------------------------------------
# regularisation


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout mask: entries are 0 or 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def l1_penalty(w: np.ndarray, lam: float):
    """(lam * sum|w|, lam * sign(w))."""
    if lam < 0:
        raise ConfigError("L1 weight must be non-negative")
    return float(lam * np.abs(w).sum()), lam * np.sign(w)


# --------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigError("alpha and epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param, dtype=float), np.zeros_like(param, dtype=float))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, cfg: AdamConfig = AdamConfig()):
    """Bias-corrected Adam update, applied in place. Returns (param, state)."""
    if param.shape != grad.shape:
        raise ConfigError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    _check_finite("gradient", grad)
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    param -= cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return param, state


@dataclass
class Adam:
    """Adam over a named collection of tensors."""

    cfg: AdamConfig = field(default_factory=AdamConfig)
    states: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(p)
            adam_step(p, grads[name], self.states[name], self.cfg)


# --------------------------------------------------------------------------
# gradient verification


def gradient_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    tolerance: float | None = None,
    samples: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``loss_fn(params)`` must be deterministic; ``params`` is perturbed in
    place and restored. Up to ``samples`` coordinates per tensor are probed.
    Returns the max of |a - n| / max(|a|, |n|, 1e-8); raises
    :class:`NumericError` when ``tolerance`` is given and exceeded.
    """
    rng = make_rng(seed, "gradcheck")
    worst, where = 0.0, None
    for name, p in params.items():
        flat = p.reshape(-1)
        if flat.size <= samples:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        g = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = g[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if err > worst:
                worst, where = err, (name, int(i), analytic, numeric)
    if where is not None:
        logger.debug("worst gradient mismatch %.3g at %s", worst, where)
    if tolerance is not None and worst > tolerance:
        raise NumericError(f"gradient check failed: rel. error {worst:.3g} > {tolerance} at {where}")
    return worst
