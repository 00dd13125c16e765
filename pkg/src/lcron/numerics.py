"""Dense numeric helpers shared by the sorting operators, losses and tests.

Everything works on float64 numpy arrays. Functions accept a leading batch
axis wherever that is natural, so a single impression is just the
``B == 1`` case.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_EPS = 1e-7


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its domain."""


class GradCheckError(ArithmeticError):
    """Raised when a function evaluation under grad_check is not finite."""


def as_float_array(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not (t > 0.0) or not np.isfinite(t):
        raise InvalidArgument(f"temperature must be positive and finite, got {temperature!r}")
    return t


def row_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / temperature``.

    The row maximum is subtracted before exponentiation, so very large logits
    saturate to one-hot rows instead of overflowing.
    """
    t = check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull ``upstream = dL/dprobs`` back through a last-axis softmax.

    Returns ``dL/dz`` where ``probs = softmax(z)``.
    """
    inner = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - inner)


def clamped_log(x, epsilon: float = DEFAULT_EPS):
    """``ln(clip(x, epsilon, 1 - epsilon))``; works on scalars and arrays."""
    if not (0.0 < epsilon < 0.5):
        raise InvalidArgument("epsilon must lie in (0, 0.5)")
    out = np.log(np.clip(x, epsilon, 1.0 - epsilon))
    return float(out) if np.ndim(out) == 0 else out


def clamped_log_grad(x, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """Derivative of :func:`clamped_log`; zero wherever the clip is active."""
    x = np.asarray(x, dtype=np.float64)
    inside = (x > epsilon) & (x < 1.0 - epsilon)
    return np.where(inside, 1.0 / np.where(inside, x, 1.0), 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """``ln(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def central_difference(
    f: Callable[[np.ndarray], float], point, step: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``.

    ``point`` may have any shape; the returned gradient has the same shape.
    """
    x0 = np.array(point, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(xp.reshape(x0.shape)))
        fm = float(f(xm.reshape(x0.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, x0.shape)
            raise GradCheckError(
                f"non-finite function value at coordinate {tuple(int(k) for k in idx)}"
            )
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x0.shape)


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: Callable[[np.ndarray], np.ndarray],
    point,
    step: float = 1e-6,
) -> float:
    """Compare an analytic gradient with central differences.

    Returns ``max_i |fd_i - g_i| / max(1, |g_i|)``.
    """
    if not (1e-7 <= step <= 1e-3):
        raise InvalidArgument("step must lie in [1e-7, 1e-3]")
    x0 = np.array(point, dtype=np.float64)
    g = np.asarray(analytic_grad(x0), dtype=np.float64)
    if g.shape != x0.shape:
        raise InvalidArgument(f"analytic gradient shape {g.shape} != point shape {x0.shape}")
    fd = central_difference(f, x0, step)
    err = np.abs(fd - g) / np.maximum(1.0, np.abs(g))
    return float(err.max()) if err.size else 0.0
