"""Dense neural-network primitives with hand-derived backward passes.

Everything runs in float64. Layers cache their forward intermediates and
expose ``backward(grad_out)`` which accumulates parameter gradients
(``+=``) and returns the gradient w.r.t. the layer input. There is no
autodiff graph: callers chain backward calls in reverse order themselves.

Determinism: all randomness flows through numpy ``Generator`` objects
built by :func:`seeded_rng` (PCG64, a fixed, documented algorithm whose
stream is identical across platforms for a given seed). Single-threaded
execution gives bit-identical results run to run.

Set the environment variable ``PROBE_DEBUG=1`` to enable finiteness
assertions after each forward op.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    TrainingDivergenceError,
)

_DEBUG = bool(os.environ.get("PROBE_DEBUG"))

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``(seed, stream...)``.

    Distinct stream labels derived from the same seed give independent,
    reproducible streams (used to separate init / dropout / shuffling).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def _check_finite(x: np.ndarray, what: str) -> None:
    if _DEBUG and not np.all(np.isfinite(x)):
        raise TrainingDivergenceError(f"non-finite values in {what}")


class Parameter:
    """A named weight tensor with an accumulated gradient of equal shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# layers


class Linear:
    """y = x @ W.T + b with W of shape (out, in). Accepts inputs (..., in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str, bias: bool = True):
        bound = math.sqrt(6.0 / in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim)) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim
        self._x = None

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear {self.weight.name}: input shape {x.shape} incompatible "
                f"with weight shape {self.weight.value.shape}")
        self._x = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        _check_finite(y, self.weight.name)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._x
        g2 = grad_out.reshape(-1, self.out_dim)
        x2 = x.reshape(-1, self.in_dim)
        self.weight.grad += g2.T @ x2
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        return grad_out @ self.weight.value


class LayerNorm:
    """Per-row normalization over the last axis (population variance), then affine."""

    def __init__(self, dim: int, name: str, eps: float = 1e-5):
        if dim == 0:
            raise ConfigError("layer_norm: dimension must be >= 1")
        if eps <= 0:
            raise ConfigError("layer_norm: eps must be > 0")
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim))
        self.dim = dim
        self.eps = eps
        self._xhat = None
        self._inv_std = None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.dim:
            raise DimensionError(
                f"layer_norm {self.gamma.name}: input width {x.shape[-1]} != {self.dim}")
        mu = x.mean(axis=-1, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        y = self.gamma.value * xhat + self.beta.value
        _check_finite(y, self.gamma.name)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        axes = tuple(range(grad_out.ndim - 1))
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (dxhat - m1 - xhat * m2)


class Gelu:
    """Exact-erf GELU: x * Phi(x), applied elementwise."""

    def __init__(self):
        self._x = None
        self._cdf = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        self._x = x
        self._cdf = cdf
        return x * cdf

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, cdf = self._x, self._cdf
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return grad_out * (cdf + x * pdf)


def gelu(x: np.ndarray) -> np.ndarray:
    """Functional GELU (forward only)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


class Dropout:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode and for p == 0 (the rng stream is only consumed
    when a mask is actually drawn).
    """

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator) -> np.ndarray:
        if not training or self.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        self._mask = (rng.random(x.shape) >= self.p) / keep
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


# ---------------------------------------------------------------------------
# masked softmax


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with key masking.

    ``scores`` has shape (B, N, N) or (B, H, N, N); ``mask`` has shape
    (B, N) with True marking real atoms. Masked keys receive exactly 0.
    Rows belonging to masked (padding) queries are set to the uniform
    distribution over real keys; they are never consumed downstream but
    this keeps the output well-defined and padding-invariant.
    """
    if mask.shape != (scores.shape[0], scores.shape[-1]):
        raise DimensionError(
            f"masked_softmax: mask shape {mask.shape} incompatible with scores {scores.shape}")
    mask = mask.astype(bool)
    n_real = mask.sum(axis=1)
    if np.any(n_real == 0):
        raise DataError("masked_softmax: molecule with zero real atoms")

    b, n = mask.shape
    extra = scores.ndim - 2  # leading axes between batch and the key axis
    key_mask = mask.reshape(b, *([1] * extra), n)
    neg = np.where(key_mask, scores, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    probs = e / e.sum(axis=-1, keepdims=True)

    # padding-query rows: uniform over real keys
    query_mask = mask.reshape(b, *([1] * (extra - 1)), n, 1)
    uniform = key_mask / n_real.reshape(-1, *([1] * (extra + 1)))
    probs = np.where(query_mask, probs, uniform)
    _check_finite(probs, "masked_softmax")
    return probs


def masked_softmax_backward(grad_probs: np.ndarray, probs: np.ndarray,
                            mask: np.ndarray) -> np.ndarray:
    """Gradient of masked_softmax w.r.t. the input scores.

    Masked key columns carry zero probability so their score gradient
    vanishes; padding-query rows are constants and get zero gradient.
    """
    dot = (grad_probs * probs).sum(axis=-1, keepdims=True)
    ds = probs * (grad_probs - dot)
    b, n = mask.shape
    extra = probs.ndim - 2
    query_mask = mask.astype(bool).reshape(b, *([1] * (extra - 1)), n, 1)
    return np.where(query_mask, ds, 0.0)


class MultiHeadAttention:
    """Masked multi-head self-attention over padded atom sets.

    Q, K, V, O are full-width linear maps (each width x width, with bias);
    per-head slices of width ``head_dim`` attend independently and their
    outputs are concatenated then projected by O. Returns the attention
    tensor (B, H, N, N) alongside the output for interpretability. The
    output is the raw attention block result; residual connection and
    LayerNorm are the caller's job.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator, name: str):
        if width % heads != 0:
            raise ConfigError(f"attention width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(width, width, rng, f"{name}.wq")
        self.wk = Linear(width, width, rng, f"{name}.wk")
        self.wv = Linear(width, width, rng, f"{name}.wv")
        self.wo = Linear(width, width, rng, f"{name}.wo")
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return (self.wq.parameters() + self.wk.parameters()
                + self.wv.parameters() + self.wo.parameters())

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, n, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)

    def forward(self, z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b, n, d = z.shape
        if n == 0:
            raise DataError("attention: empty molecule batch (N == 0)")
        if mask.shape != (b, n):
            raise DimensionError(
                f"attention: mask shape {mask.shape} does not match batch ({b}, {n})")
        q = self._split(self.wq.forward(z))
        k = self._split(self.wk.forward(z))
        v = self._split(self.wv.forward(z))
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = masked_softmax(scores, mask)
        head_out = attn @ v
        merged = self._merge(head_out)
        out = self.wo.forward(merged)
        self._cache = (q, k, v, attn, mask, scale)
        return out, attn

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        q, k, v, attn, mask, scale = self._cache
        d_merged = self.wo.backward(grad_out)
        d_head = self._split(d_merged)
        d_attn = d_head @ v.transpose(0, 1, 3, 2)
        d_v = attn.transpose(0, 1, 3, 2) @ d_head
        d_scores = masked_softmax_backward(d_attn, attn, mask)
        d_q = (d_scores @ k) * scale
        d_k = (d_scores.transpose(0, 1, 3, 2) @ q) * scale
        dz = self.wq.backward(self._merge(d_q))
        dz += self.wk.backward(self._merge(d_k))
        dz += self.wv.backward(self._merge(d_v))
        return dz


# ---------------------------------------------------------------------------
# optimization


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(
                    f"non-finite gradient in parameter '{p.name}'")
            if self.weight_decay:
                p.value -= self.lr * self.weight_decay * p.value
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict:
        """Optimizer moments keyed by parameter name (for checkpoint metadata)."""
        return {"m": self._m, "v": self._v, "t": self.t}


def clip_grad_norm(params: list[Parameter], max_norm: float = 1.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Finite-difference verification result.

    Relative error per element is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-6); the floor keeps elements with
    near-zero gradient from dominating the report with roundoff noise.
    """

    h: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def worst_param(self) -> str | None:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)

    def summary(self) -> str:
        lines = [f"gradient check (h={self.h:g}): max rel err {self.max_rel_err:.3e}"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name:40s} {err:.3e}")
        return "\n".join(lines)


def finite_difference_check(loss_fn, params: list[Parameter],
                            h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must zero the gradients, run a deterministic
    forward+backward (dropout disabled, fixed batch) and return the
    scalar loss. Every element of every parameter is perturbed.
    """
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    report = GradCheckReport(h=h)
    for p in params:
        flat = p.value.reshape(-1)
        a = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(a[i]), abs(num), 1e-6)
            worst = max(worst, abs(a[i] - num) / denom)
        report.per_param[p.name] = worst
    loss_fn()  # restore caches/grads for the unperturbed point
    return report
