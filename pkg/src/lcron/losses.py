"""Cascade surrogate losses and the pointwise/pairwise baselines.

Every loss takes per-stage score arrays of shape ``(N,)`` or ``(B, N)`` and
returns a :class:`LossOutput` whose gradients match the input shapes.
Impression-level losses are sums over items; a batch is averaged over
impressions.

The top-q inclusion probability divides by the soft permutation's column
mass, and that divisor is held constant in the backward pass. To compare
against finite differences, pass the base point's column masses through
``frozen_denominators`` so the forward pass sees the same constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffsort import pullback, sort_operator
from .numerics import (
    DEFAULT_EPS,
    InvalidArgument,
    as_float_array,
    check_temperature,
    clamped_log,
    clamped_log_grad,
    sigmoid,
    softplus,
)

LN2 = math.log(2.0)


@dataclass
class LossOutput:
    value: float
    grads: list[np.ndarray]
    fusion_grads: dict[str, np.ndarray] | None = None

    @property
    def grads_per_stage(self) -> list[np.ndarray]:
        return self.grads


@dataclass
class FusionWeights:
    """Trainable log-scales of the uncertainty-weighted fusion.

    ``alpha = exp(log_sigma_e2e)`` scales the end-to-end term and
    ``exp(log_sigma_single[i])`` scales stage ``i``'s single-stage term.
    """

    log_sigma_e2e: float = 0.0
    log_sigma_single: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def init(cls, n_stages: int) -> "FusionWeights":
        return cls(0.0, np.zeros(n_stages))

    @property
    def alpha(self) -> float:
        return math.exp(self.log_sigma_e2e)

    @property
    def single_scales(self) -> np.ndarray:
        return np.exp(self.log_sigma_single)

    def as_params(self) -> dict[str, np.ndarray]:
        return {
            "fusion.log_sigma_e2e": np.array([self.log_sigma_e2e], dtype=np.float64),
            "fusion.log_sigma_single": np.asarray(self.log_sigma_single, dtype=np.float64).copy(),
        }

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "FusionWeights":
        return cls(
            float(params["fusion.log_sigma_e2e"][0]),
            np.asarray(params["fusion.log_sigma_single"], dtype=np.float64).copy(),
        )


def _as_batch(x, name: str) -> tuple[np.ndarray, tuple]:
    arr = as_float_array(x, name)
    if arr.ndim not in (1, 2) or arr.shape[-1] < 1:
        raise InvalidArgument(f"{name} must have shape (N,) or (B, N)")
    return np.atleast_2d(arr), arr.shape


def _binary_flags(gt_flags, shape: tuple) -> np.ndarray:
    y = np.asarray(gt_flags, dtype=np.float64)
    if y.shape != shape:
        raise InvalidArgument(f"gt_flags shape {y.shape} does not match scores shape {shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidArgument("gt_flags must be binary")
    return np.atleast_2d(y)


def column_mass(perm: np.ndarray) -> np.ndarray:
    """Column sums of a (batched) soft permutation matrix."""
    return np.asarray(perm).sum(axis=-2)


def topk_select_prob(perm, q: int, denominator=None) -> np.ndarray:
    """Soft probability that each item lands in the top ``q``.

    The first ``q`` rows are summed and divided elementwise by the column
    mass of the whole matrix (or by ``denominator`` when supplied).
    """
    P = np.asarray(perm, dtype=np.float64)
    n = P.shape[-1]
    if not (1 <= int(q) <= n):
        raise InvalidArgument(f"quota q={q} outside [1, {n}]")
    denom = column_mass(P) if denominator is None else np.asarray(denominator, dtype=np.float64)
    if np.any(denom <= 0.0):
        raise FloatingPointError("zero column mass in soft permutation")
    return P[..., : int(q), :].sum(axis=-2) / denom


def topk_select_backward(d_probs: np.ndarray, q: int, denominator: np.ndarray, n: int) -> np.ndarray:
    """Upstream ``dL/dprobs`` to ``dL/dP`` with the denominator held fixed."""
    dP = np.zeros(d_probs.shape[:-1] + (n, n))
    dP[..., : int(q), :] = (d_probs / denominator)[..., None, :]
    return dP


def joint_survival(stage_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise product of per-stage inclusion probabilities."""
    if len(stage_probs) < 1:
        raise InvalidArgument("need at least one stage")
    shape = np.shape(stage_probs[0])
    out = np.ones(shape)
    for p in stage_probs:
        if np.shape(p) != shape:
            raise InvalidArgument("stage probability vectors differ in length")
        out = out * np.asarray(p, dtype=np.float64)
    return out


def _cross_entropy(p: np.ndarray, y: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-impression summed cross-entropy and its derivative in ``p``."""
    per_item = -(y * clamped_log(p, eps) + (1.0 - y) * clamped_log(1.0 - p, eps))
    d_p = -(y * clamped_log_grad(p, eps) - (1.0 - y) * clamped_log_grad(1.0 - p, eps))
    return per_item.sum(axis=-1), d_p


def loss_e2e(
    stage_scores: Sequence,
    train_quotas: Sequence[int],
    gt_flags,
    temperature: float,
    operator: str = "neural_sort",
    eps: float = DEFAULT_EPS,
    frozen_denominators: Sequence[np.ndarray] | None = None,
) -> LossOutput:
    """Cross-entropy between the joint survival product and the ground truth.

    The joint survival of an item is the product over stages of its soft
    top-``q_i`` inclusion probability under that stage's scores.
    """
    if len(stage_scores) < 1 or len(stage_scores) != len(train_quotas):
        raise InvalidArgument("need one quota per stage and at least one stage")
    t = check_temperature(temperature)
    batches = [_as_batch(s, f"stage_scores[{i}]") for i, s in enumerate(stage_scores)]
    shape = batches[0][1]
    if any(b[1] != shape for b in batches):
        raise InvalidArgument("all stage score vectors must share one shape")
    y = _binary_flags(gt_flags, shape)
    B, n = batches[0][0].shape

    perms, denoms, probs = [], [], []
    for i, ((s, _), q) in enumerate(zip(batches, train_quotas)):
        P = sort_operator(operator, s, t)
        if frozen_denominators is None:
            d = column_mass(P)
        else:
            d = np.atleast_2d(np.asarray(frozen_denominators[i], dtype=np.float64))
        perms.append(P)
        denoms.append(d)
        probs.append(topk_select_prob(P, q, d))

    p = joint_survival(probs)
    per_imp, d_p = _cross_entropy(p, y, eps)
    d_p = d_p / B

    grads = []
    for i, ((s, _), q) in enumerate(zip(batches, train_quotas)):
        others = np.ones_like(p)
        for k, pk in enumerate(probs):
            if k != i:
                others = others * pk
        dP = topk_select_backward(d_p * others, q, denoms[i], n)
        grads.append(pullback(operator, s, t, dP, perm=perms[i]).reshape(shape))
    return LossOutput(float(per_imp.mean()), grads)


def stage_denominators(stage_scores: Sequence, temperature: float, operator: str = "neural_sort"):
    """Column masses of each stage's soft permutation at the given scores."""
    return [column_mass(sort_operator(operator, np.atleast_2d(s), temperature)) for s in stage_scores]


def loss_single(
    scores,
    k: int,
    gt_flags,
    temperature: float,
    operator: str = "neural_sort",
    eps: float = DEFAULT_EPS,
    frozen_denominator: np.ndarray | None = None,
) -> LossOutput:
    """Single-stage cross-entropy of soft top-``k`` membership against ground truth."""
    frozen = None if frozen_denominator is None else [frozen_denominator]
    return loss_e2e([scores], [k], gt_flags, temperature, operator, eps, frozen)


def loss_uwl(l_e2e: LossOutput, l_singles: Sequence[LossOutput], w: FusionWeights) -> LossOutput:
    """Uncertainty-weighted fusion of the end-to-end and single-stage losses.

    ``L = L_e2e / (2 a^2) + sum_i L_i / (2 b_i^2) + log2(a * prod_i b_i)``
    with every scale parameterised as ``exp(log_sigma)``.
    """
    if len(l_singles) < 1:
        raise InvalidArgument("uncertainty weighting needs at least one single-stage loss")
    ls = np.asarray(w.log_sigma_single, dtype=np.float64)
    if ls.shape != (len(l_singles),):
        raise InvalidArgument("one log-scale per single-stage loss is required")
    a = float(w.log_sigma_e2e)
    c_e2e = 0.5 * math.exp(-2.0 * a)
    c_single = 0.5 * np.exp(-2.0 * ls)

    value = c_e2e * l_e2e.value + float((c_single * [l.value for l in l_singles]).sum())
    value += (a + float(ls.sum())) / LN2

    grads = [c_e2e * g for g in l_e2e.grads]
    for i, l in enumerate(l_singles):
        grads[i] = grads[i] + c_single[i] * l.grads[0]

    fusion_grads = {
        "fusion.log_sigma_e2e": np.array([-2.0 * c_e2e * l_e2e.value + 1.0 / LN2]),
        "fusion.log_sigma_single": -2.0 * c_single * np.array([l.value for l in l_singles]) + 1.0 / LN2,
    }
    return LossOutput(value, grads, fusion_grads)


def loss_fixed_weights(
    l_e2e: LossOutput, l_singles: Sequence[LossOutput], e2e_weight: float = 1.0, single_weight: float = 1.0
) -> LossOutput:
    """Manual-weight fusion: ``e2e_weight * L_e2e + single_weight * sum_i L_i``."""
    value = e2e_weight * l_e2e.value + single_weight * sum(l.value for l in l_singles)
    grads = [e2e_weight * g for g in l_e2e.grads]
    for i, l in enumerate(l_singles):
        grads[i] = grads[i] + single_weight * l.grads[0]
    return LossOutput(float(value), grads)


def sum_losses(losses: Sequence[LossOutput]) -> LossOutput:
    """Unweighted sum of single-stage losses, each owning one stage's gradient."""
    return LossOutput(float(sum(l.value for l in losses)), [l.grads[0] for l in losses])


def _masked_mean_per_impression(per_item: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = mask.sum(axis=-1, keepdims=True)
    weight = np.where(counts > 0, mask / np.maximum(counts, 1.0), 0.0)
    return (per_item * weight).sum(axis=-1), weight


def loss_bce(scores, gt_flags, mask=None) -> LossOutput:
    """Pointwise logistic loss, averaged over (masked) items then impressions."""
    s, shape = _as_batch(scores, "scores")
    y = _binary_flags(gt_flags, shape)
    m = np.ones_like(s) if mask is None else np.atleast_2d(np.asarray(mask, dtype=np.float64))
    per_item = softplus(s) - y * s
    per_imp, weight = _masked_mean_per_impression(per_item, m)
    B = s.shape[0]
    grad = (sigmoid(s) - y) * weight / B
    return LossOutput(float(per_imp.mean()), [grad.reshape(shape)])


def loss_ranknet(scores, grades) -> LossOutput:
    """Pairwise logistic loss over every pair with strictly ordered grades.

    For each pair with ``grade_i > grade_j`` the loss is
    ``log(1 + exp(-(s_i - s_j)))``; pairs are averaged per impression and
    impressions without any ordered pair contribute zero.
    """
    s, shape = _as_batch(scores, "scores")
    g = np.atleast_2d(np.asarray(grades, dtype=np.float64))
    if g.shape != s.shape:
        raise InvalidArgument("grades must match scores in shape")
    B = s.shape[0]
    pairs = (g[:, :, None] > g[:, None, :]).astype(np.float64)
    count = pairs.sum(axis=(1, 2))
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
    diff = s[:, :, None] - s[:, None, :]
    per_imp = (pairs * softplus(-diff)).sum(axis=(1, 2)) * inv
    # d/d diff of softplus(-diff) = -sigmoid(-diff)
    d_diff = -pairs * sigmoid(-diff) * (inv / B)[:, None, None]
    grad = d_diff.sum(axis=2) - d_diff.sum(axis=1)
    return LossOutput(float(per_imp.mean()), [grad.reshape(shape)])
