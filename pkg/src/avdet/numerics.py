"""Dense float64 primitives with hand-written gradients.

Every differentiable piece of the system is built from the functions here.
Backward functions *accumulate* into ``Parameter.grad`` and return the
gradient with respect to their input, so callers can chain them by hand.
``finite_difference_check`` is the oracle used to certify those gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

NORM_FLOOR = 1e-12


class NearZeroNorm(ValueError):
    """Raised when a vector is too short to be normalized."""


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(eq=False)
class Parameter:
    value: Tensor
    grad: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeMismatch(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise NearZeroNorm("empty vector")
    norm = float(np.sqrt(np.sum(x * x)))
    if not norm > NORM_FLOOR:
        raise NearZeroNorm(f"norm {norm:.3g} <= {NORM_FLOOR}")
    return x / norm


def l2_normalize_rows(x: Tensor) -> tuple[Tensor, Tensor]:
    """Normalize along the last axis. Returns ``(unit, norms)``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if x.shape[-1] == 0 or np.any(~(norms > NORM_FLOOR)):
        raise NearZeroNorm("at least one row has norm <= 1e-12")
    return x / norms, norms


def l2_normalize_rows_backward(unit: Tensor, norms: Tensor, grad_unit: Tensor) -> Tensor:
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target: int) -> tuple[float, Tensor]:
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= int(target) < k:
        raise IndexOutOfRange(f"target {target} not in [0, {k})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def softmax_cross_entropy_batch(logits: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    """Mean cross-entropy over rows; gradient already divided by the row count."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({n},)")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if targets.min() < 0 or targets.max() >= k:
        raise IndexOutOfRange(f"targets outside [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, targets]))
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad / n


def binary_cross_entropy_with_logits(logits: Tensor, targets: Tensor) -> tuple[Tensor, Tensor]:
    """Elementwise BCE and its derivative w.r.t. the logits (no reduction)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - t


def sigmoid(z: Tensor) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# dense layers


def linear_forward(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """``y = x W^T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    x = np.asarray(x, dtype=np.float64)
    w = weight.value
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"x {x.shape}, W {w.shape}, b {bias.shape}")
    return x @ w.T + bias.value


def linear_backward(x: Tensor, weight: Parameter, bias: Parameter, grad_y: Tensor) -> Tensor:
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    weight.grad += g2.T @ x2
    bias.grad += g2.sum(axis=0)
    return grad_y @ weight.value


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_y: Tensor) -> Tensor:
    return grad_y * (x > 0)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float = math.sqrt(2.0)):
    """He-style uniform initialization; returns ``(weight, bias)`` Parameters."""
    bound = gain * math.sqrt(3.0 / n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    return Parameter(w), Parameter(np.zeros(n_out))


class MLP:
    """Two dense layers with a ReLU between them."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int,
                 relu_out: bool = False, out_gain: float = 1.0):
        self.w1, self.b1 = init_linear(rng, n_in, n_hidden)
        self.w2, self.b2 = init_linear(rng, n_hidden, n_out, gain=out_gain)
        self.relu_out = relu_out

    def parameters(self) -> dict[str, Parameter]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: Tensor):
        a1 = linear_forward(x, self.w1, self.b1)
        h1 = relu(a1)
        a2 = linear_forward(h1, self.w2, self.b2)
        out = relu(a2) if self.relu_out else a2
        return out, (x, a1, h1, a2)

    def backward(self, cache, grad_out: Tensor) -> Tensor:
        x, a1, h1, a2 = cache
        if self.relu_out:
            grad_out = relu_backward(a2, grad_out)
        g_h1 = linear_backward(h1, self.w2, self.b2, grad_out)
        return linear_backward(x, self.w1, self.b1, relu_backward(a1, g_h1))


# ---------------------------------------------------------------------------
# optimization


class SGD:
    """SGD with heavy-ball momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, buf in zip(self.params, self.buffers):
            buf *= self.momentum
            buf += p.grad
            p.value -= self.lr * buf


# ---------------------------------------------------------------------------
# gradient oracle


@dataclass
class GradCheck:
    max_error: float
    worst_param: int | None = None
    finite: bool = True

    def __float__(self):
        return self.max_error

    def __le__(self, other):
        return self.max_error <= other

    def __lt__(self, other):
        return self.max_error < other

    def __ge__(self, other):
        return self.max_error >= other

    def __gt__(self, other):
        return self.max_error > other


def finite_difference_check(
    f: Callable[[], float],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheck:
    """Compare analytic gradients against central differences.

    ``f`` must evaluate the scalar objective at the current parameter values
    and accumulate its analytic gradient into each ``Parameter.grad``.
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` samples that many coordinates per parameter instead of
    sweeping all of them.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    base = f()
    analytic = [p.grad.copy() for p in params]
    if not np.isfinite(base):
        return GradCheck(math.inf, None, False)

    worst, worst_idx = 0.0, None
    for idx, (p, g) in enumerate(zip(params, analytic)):
        if not np.all(np.isfinite(g)):
            return GradCheck(math.inf, idx, False)
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = f()
            flat[c] = orig - step
            down = f()
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                for q, ga in zip(params, analytic):
                    q.grad[...] = ga
                return GradCheck(math.inf, idx, False)
            numeric = (up - down) / (2.0 * step)
            err = abs(g.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst, worst_idx = err, idx

    for p, g in zip(params, analytic):
        p.grad[...] = g
    return GradCheck(float(worst), worst_idx, True)
