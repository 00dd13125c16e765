"""Differentiable relaxations of descending sort.

Both operators return a row-stochastic ``(..., n, n)`` matrix whose entry
``[i, j]`` is the soft probability that item ``j`` sits at rank ``i``
(rank 0 = largest score). Gradients are computed by hand in :func:`pullback`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .numerics import (
    InvalidArgument,
    as_float_array,
    check_temperature,
    row_softmax,
    softmax_backward,
)

OperatorKind = Literal["neural_sort", "soft_sort"]
OPERATORS = ("neural_sort", "soft_sort")


@dataclass(frozen=True)
class SoftPermutation:
    matrix: np.ndarray
    temperature: float
    operator_kind: str = "neural_sort"


def _rank_coefficients(n: int) -> np.ndarray:
    # n + 1 - 2i for 1-indexed rank i
    return (n + 1 - 2 * np.arange(1, n + 1)).astype(np.float64)


def _neural_sort_logits(s: np.ndarray) -> np.ndarray:
    n = s.shape[-1]
    abs_sum = np.abs(s[..., :, None] - s[..., None, :]).sum(axis=-1)
    coef = _rank_coefficients(n)
    return coef[:, None] * s[..., None, :] - abs_sum[..., None, :]


def neural_sort(scores, temperature: float = 1.0) -> np.ndarray:
    """Deterministic NeuralSort relaxation of the descending sort.

    Row ``i`` holds ``softmax(((n + 1 - 2i) * s - A @ 1) / temperature)``
    with ``A[j, k] = |s_j - s_k|``.
    """
    s = as_float_array(scores, "scores")
    t = check_temperature(temperature)
    if s.ndim == 0 or s.shape[-1] < 1:
        raise InvalidArgument("scores must have at least one element")
    return row_softmax(_neural_sort_logits(s), t)


def hard_sort_desc(scores) -> np.ndarray:
    """Indices that sort ``scores`` descending; ties keep the lower index first."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 0 or s.shape[-1] < 1:
        raise InvalidArgument("scores must have at least one element")
    return np.argsort(-s, axis=-1, kind="stable")


def permutation_matrix(order) -> np.ndarray:
    """Binary matrix with ``P[i, order[i]] = 1``; batched over leading axes."""
    order = np.asarray(order)
    n = order.shape[-1]
    return (order[..., :, None] == np.arange(n)).astype(np.float64)


def _sorted_desc(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = hard_sort_desc(s)
    return order, np.take_along_axis(s, order, axis=-1)


def soft_sort(scores, temperature: float = 1.0) -> np.ndarray:
    """SoftSort relaxation: ``P[i, j] = softmax_j(-|sorted(s)_i - s_j| / temperature)``."""
    s = as_float_array(scores, "scores")
    t = check_temperature(temperature)
    if s.ndim == 0 or s.shape[-1] < 1:
        raise InvalidArgument("scores must have at least one element")
    _, v = _sorted_desc(s)
    return row_softmax(-np.abs(v[..., :, None] - s[..., None, :]), t)


def sort_operator(kind: str, scores, temperature: float) -> np.ndarray:
    if kind == "neural_sort":
        return neural_sort(scores, temperature)
    if kind == "soft_sort":
        return soft_sort(scores, temperature)
    raise InvalidArgument(f"unknown operator kind {kind!r}; expected one of {OPERATORS}")


def soft_permutation(scores, temperature: float, kind: str = "neural_sort") -> SoftPermutation:
    return SoftPermutation(sort_operator(kind, scores, temperature), float(temperature), kind)


def pullback(kind: str, scores, temperature: float, upstream, perm=None) -> np.ndarray:
    """Gradient of ``sum(upstream * P)`` with respect to ``scores``.

    ``perm`` may carry the already-computed forward matrix to avoid
    recomputing it. The subgradient of ``|x|`` at zero is taken as zero.
    """
    s = as_float_array(scores, "scores")
    t = check_temperature(temperature)
    G = np.asarray(upstream, dtype=np.float64)
    n = s.shape[-1]
    if G.shape != s.shape[:-1] + (n, n):
        raise InvalidArgument(
            f"upstream shape {G.shape} does not match permutation shape {s.shape[:-1] + (n, n)}"
        )
    P = sort_operator(kind, s, t) if perm is None else perm
    Z = softmax_backward(P, G) / t  # dL/d(raw logits), before the 1/t scaling

    if kind == "neural_sort":
        coef = _rank_coefficients(n)
        grad = np.einsum("...ij,i->...j", Z, coef)
        c = Z.sum(axis=-2)  # column sums
        sgn = np.sign(s[..., :, None] - s[..., None, :])
        grad -= (sgn * (c[..., :, None] + c[..., None, :])).sum(axis=-1)
        return grad

    if kind == "soft_sort":
        order, v = _sorted_desc(s)
        # logits[i, j] = -|v_i - s_j|
        sgn = np.sign(v[..., :, None] - s[..., None, :])
        grad = (Z * sgn).sum(axis=-2)
        dv = -(Z * sgn).sum(axis=-1)
        np.put_along_axis(grad, order, np.take_along_axis(grad, order, axis=-1) + dv, axis=-1)
        return grad

    raise InvalidArgument(f"unknown operator kind {kind!r}")
