"""Hard cascade filtering, ranking metrics and survival-bound oracles."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffsort import hard_sort_desc
from .numerics import InvalidArgument

MAX_ENUMERATION_N = 12


@dataclass(frozen=True)
class CascadeConfig:
    quotas: tuple[int, ...]
    k: int

    def __post_init__(self):
        object.__setattr__(self, "quotas", tuple(int(q) for q in self.quotas))
        if len(self.quotas) < 1:
            raise InvalidArgument("need at least one stage quota")
        if any(a <= b for a, b in zip(self.quotas, self.quotas[1:])):
            raise InvalidArgument(f"quotas must strictly decrease, got {self.quotas}")
        if not (1 <= self.k < self.quotas[-1]):
            raise InvalidArgument(f"need 1 <= K < q_T, got K={self.k}, q_T={self.quotas[-1]}")

    @property
    def n_stages(self) -> int:
        return len(self.quotas)


def cascade_filter(stage_scores: Sequence, quotas: Sequence[int] | CascadeConfig) -> np.ndarray:
    """Run the hard funnel: each stage keeps the top ``q_i`` of the survivors.

    Works on ``(N,)`` score vectors (returning the surviving indices in final
    rank order) or on ``(B, N)`` batches (returning a ``(B, q_T)`` array).
    """
    qs = quotas.quotas if isinstance(quotas, CascadeConfig) else tuple(int(q) for q in quotas)
    if len(stage_scores) != len(qs):
        raise InvalidArgument("one score vector per stage is required")
    first = np.asarray(stage_scores[0], dtype=np.float64)
    single = first.ndim == 1
    S = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in stage_scores]
    B, n = S[0].shape
    alive = np.ones((B, n), dtype=bool)
    survivors = None
    for s, q in zip(S, qs):
        if s.shape != (B, n):
            raise InvalidArgument("stage score arrays must share one shape")
        if q > int(alive.sum(axis=1).min()):
            raise InvalidArgument(f"quota {q} exceeds the candidate count")
        masked = np.where(alive, s, -np.inf)
        survivors = hard_sort_desc(masked)[:, :q]
        alive = np.zeros_like(alive)
        np.put_along_axis(alive, survivors, True, axis=1)
    return survivors[0] if single else survivors


def top_q(scores, q: int) -> np.ndarray:
    """Indices of the ``q`` best items under ``scores`` (batched)."""
    return hard_sort_desc(scores)[..., :q]


def recall_at(selected, gt) -> float:
    """``|selected ∩ gt| / |gt|`` for index collections."""
    g = set(int(i) for i in np.asarray(gt).ravel())
    if not g:
        raise InvalidArgument("ground-truth set is empty")
    s = set(int(i) for i in np.asarray(selected).ravel())
    return len(s & g) / len(g)


def batch_recall(selected: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-impression recall for ``selected (B, q)`` against 0/1 flags ``gt (B, N)``."""
    hits = np.take_along_axis(gt, selected, axis=1).sum(axis=1)
    total = gt.sum(axis=1)
    if np.any(total == 0):
        raise InvalidArgument("an impression has an empty ground-truth set")
    return hits / total


def _dcg(gains_in_order: np.ndarray, k: int) -> np.ndarray:
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    return (gains_in_order[..., :k] * disc).sum(axis=-1)


def ndcg_at(scores, grades, k: int):
    """Exponential-gain NDCG@k: gain ``2^grade - 1``, discount ``1/log2(rank + 1)``.

    Returns 0 when every grade is zero. Batched inputs return one value per row.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(grades, dtype=np.float64)
    if s.shape != g.shape:
        raise InvalidArgument("scores and grades differ in shape")
    n = s.shape[-1]
    if not (1 <= k <= n):
        raise InvalidArgument(f"k={k} outside [1, {n}]")
    gains = np.power(2.0, g) - 1.0
    model = np.take_along_axis(gains, hard_sort_desc(s), axis=-1)
    ideal = -np.sort(-gains, axis=-1)
    dcg = _dcg(model, k)
    idcg = _dcg(ideal, k)
    out = np.where(idcg > 0, dcg / np.where(idcg > 0, idcg, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


# --- survival-probability oracles ------------------------------------------------


def _check_enumerable(p1: np.ndarray, p2: np.ndarray, q1: int):
    if p1.shape != p2.shape or p1.ndim != 1:
        raise InvalidArgument("p1 and p2 must be vectors of one length")
    n = p1.size
    if n > MAX_ENUMERATION_N:
        raise InvalidArgument(f"enumeration refused for N={n} > {MAX_ENUMERATION_N}")
    if not (1 <= q1 <= n):
        raise InvalidArgument(f"q1={q1} outside [1, {n}]")
    if np.any(p1 < 0) or np.any(p1 > 1 + 1e-9):
        raise InvalidArgument("p1 entries must lie in [0, 1]")


def subset_distribution(p1, q1: int) -> tuple[np.ndarray, np.ndarray]:
    """All size-``q1`` subsets as 0/1 rows with weights ``prod p1`` normalised."""
    p1 = np.asarray(p1, dtype=np.float64)
    n = p1.size
    combos = list(itertools.combinations(range(n), q1))
    pis = np.zeros((len(combos), n))
    for r, c in enumerate(combos):
        pis[r, list(c)] = 1.0
    logw = np.where(pis > 0, np.log(np.where(p1 > 0, p1, 1.0))[None, :], 0.0).sum(axis=1)
    zero = (pis > 0) & (p1 <= 0)[None, :]
    w = np.where(zero.any(axis=1), 0.0, np.exp(logw))
    total = w.sum()
    if total <= 0:
        raise InvalidArgument("no size-q1 subset has positive probability")
    return pis, w / total


def exact_survival(p1, p2, q1: int, q2: int | None = None) -> np.ndarray:
    """Expected survival under first-stage subset sampling, by enumeration.

    ``E_pi[ p2 * pi / (<pi, p2> / <1, p2>) ]`` with ``P(pi)`` proportional to
    the product of ``p1`` over the subset. ``q2`` is accepted for symmetry;
    the normaliser uses ``<1, p2>`` directly.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    _check_enumerable(p1, p2, q1)
    pis, w = subset_distribution(p1, q1)
    inner = pis @ p2
    total = p2.sum()
    keep = (w > 0) & (inner > 0)
    terms = pis[keep] * p2[None, :] * (total / inner[keep])[:, None]
    return (w[keep, None] * terms).sum(axis=0)


def inclusion_probabilities(p1, q1: int) -> np.ndarray:
    """Marginal inclusion probabilities ``E_pi[pi]`` of the subset distribution."""
    pis, w = subset_distribution(np.asarray(p1, dtype=np.float64), q1)
    return w @ pis


def monte_carlo_survival(p1, p2, q1: int, draws: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sampling estimate of :func:`exact_survival` with per-entry standard errors.

    Subsets are drawn by rejection: independent Bernoulli draws with odds
    ``p1`` (success probability ``p1 / (1 + p1)``) conditioned on having
    exactly ``q1`` ones. The conditioned law is proportional to the product
    of ``p1`` over the subset, matching the enumeration without listing it.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    rng = np.random.default_rng(rng)
    n = p1.size
    total = p2.sum()
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    succ = p1 / (1.0 + p1)
    got = 0
    chunk = 200_000
    while got < draws:
        pi = rng.random((chunk, n)) < succ[None, :]
        pi = pi[pi.sum(axis=1) == q1][: draws - got].astype(np.float64)
        if pi.size == 0:
            continue
        inner = pi @ p2
        val = np.where(inner[:, None] > 0, pi * p2[None, :] * (total / np.where(inner > 0, inner, 1.0))[:, None], 0.0)
        s1 += val.sum(axis=0)
        s2 += (val**2).sum(axis=0)
        got += pi.shape[0]
    mean = s1 / got
    var = np.maximum(s2 / got - mean**2, 0.0)
    return mean, np.sqrt(var / got)


@dataclass
class GapReport:
    exact_survival: np.ndarray | None
    product_bound: np.ndarray
    delta: np.ndarray | None
    delta_prime: np.ndarray
    top_consistent: bool
    p1: np.ndarray
    inclusion: np.ndarray | None = None

    @property
    def marginal_deviation(self) -> float | None:
        """Largest ``|E[pi] - p1|``; nonzero means the subset law does not preserve p1."""
        if self.inclusion is None:
            return None
        return float(np.abs(self.inclusion - self.p1).max())


def delta_prime(p1, p2, q2: int) -> np.ndarray:
    """Closed-form gap estimate ``p2 * (q2 / <p1, p2> - 1)``; batched over rows."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    inner = (p1 * p2).sum(axis=-1, keepdims=True)
    if np.any(inner <= 0):
        raise InvalidArgument("<p1, p2> = 0: the gap estimate is undefined")
    return p2 * (q2 / inner - 1.0)


def top_consistent(p1, p2, q1: int) -> bool:
    """Whether ``p1`` is exactly the 0/1 indicator of the top-``q1`` entries of ``p2``."""
    p1 = np.asarray(p1, dtype=np.float64)
    ind = np.zeros_like(p1)
    ind[hard_sort_desc(np.asarray(p2, dtype=np.float64))[:q1]] = 1.0
    return bool(np.allclose(p1, ind, atol=1e-12))


def bound_gap(p1, p2, q1: int, q2: int, enumerate_exact: bool | None = None) -> GapReport:
    """Compare exact survival with its product bound and the closed-form gap.

    Enumeration runs when ``N <= 12`` unless ``enumerate_exact`` says otherwise.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    dp = delta_prime(p1, p2, q2)
    bound = p1 * p2
    do_enum = p1.size <= MAX_ENUMERATION_N if enumerate_exact is None else enumerate_exact
    exact = delta = incl = None
    if do_enum:
        exact = exact_survival(p1, p2, q1, q2)
        delta = exact - bound
        incl = inclusion_probabilities(p1, q1)
    return GapReport(exact, bound, delta, dp, top_consistent(p1, p2, q1), p1, incl)
