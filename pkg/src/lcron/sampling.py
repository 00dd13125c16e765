"""Full-stage impression samples, graded labels and a synthetic cascade log.

The generator plays the role of a production funnel at desk scale. For every
impression a random user meets a pool of candidate items; a noisy reference
cascade filters the pool stage by stage, and every item is tagged with the
stage at which it dropped out. Items surviving the whole reference funnel are
the ground truth. A fixed number of items is then sampled per tag.

Grades follow the full-stage convention: larger is better, later tags beat
earlier tags, and within a tag a higher reference rank wins. Grades are dense
integers ``1..N`` per impression. Logs that use the inverted convention
(``1`` = best, negatives sharing one large label) must be flipped on import.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .numerics import InvalidArgument

SCHEMA_VERSION = 1
DEFAULT_STAGE_NAMES = ("retrieval_neg", "prerank_neg", "rank_neg", "gt_pos")


class DatasetFormatError(ValueError):
    """Malformed dataset line."""


class SchemaVersionError(DatasetFormatError):
    """Dataset header declares an unsupported schema version."""


def default_stage_names(n_tags: int) -> tuple[str, ...]:
    if n_tags == 4:
        return DEFAULT_STAGE_NAMES
    if n_tags == 5:
        return ("retrieval_neg", "prerank_neg", "coarse_neg", "rank_neg", "gt_pos")
    return tuple(f"stage{i}_neg" for i in range(n_tags - 1)) + ("gt_pos",)


@dataclass
class Item:
    item_id: int
    features: np.ndarray
    stage: int  # index into the stage-name list; the last index is gt_pos
    rank: int  # within-stage rank, higher = better
    grade: int
    gt: int
    utility: float | None = None

    def __eq__(self, other):
        if not isinstance(other, Item):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and np.array_equal(self.features, other.features)
            and self.stage == other.stage
            and self.rank == other.rank
            and self.grade == other.grade
            and self.gt == other.gt
            and self.utility == other.utility
        )


@dataclass
class ImpressionSample:
    user_features: np.ndarray
    items: list[Item]
    day: int = 0
    user_id: int = -1

    def __eq__(self, other):
        if not isinstance(other, ImpressionSample):
            return NotImplemented
        return (
            np.array_equal(self.user_features, other.user_features)
            and self.items == other.items
            and self.day == other.day
            and self.user_id == other.user_id
        )


def assign_labels(stages: Sequence[int], ranks: Sequence[int], collapse_negatives: bool = False,
                  gt_stage: int | None = None) -> np.ndarray:
    """Dense integer grades ordered by ``(stage, rank)``.

    The item with the lowest stage and rank gets grade 1. With
    ``collapse_negatives`` every non-ground-truth stage shares a single
    grade, mirroring logs that label all negatives of one stage alike;
    ``gt_stage`` defaults to the largest stage present.
    """
    st = np.asarray(stages, dtype=np.int64)
    rk = np.asarray(ranks, dtype=np.int64)
    if st.shape != rk.shape or st.ndim != 1:
        raise InvalidArgument("stages and ranks must be 1-d and equally long")
    if st.size == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = set(zip(st.tolist(), rk.tolist()))
    if len(pairs) != st.size:
        raise InvalidArgument("duplicate (stage, rank) pair")
    if collapse_negatives:
        gts = int(st.max()) if gt_stage is None else gt_stage
        key_rank = np.where(st == gts, rk, 0)
    else:
        key_rank = rk
    keys = sorted(set(zip(st.tolist(), key_rank.tolist())))
    lookup = {k: i + 1 for i, k in enumerate(keys)}
    return np.array([lookup[k] for k in zip(st.tolist(), key_rank.tolist())], dtype=np.int64)


@dataclass
class SynthConfig:
    """Synthetic cascade-log configuration.

    ``stage_counts[t]`` items are sampled per impression from tag ``t``; the
    last tag is the ground truth. ``noise_scales[t]`` is the Gaussian noise of
    reference filter ``t`` (one fewer than tags), and ``reference_quotas[t]``
    is how many items that filter passes on. The last reference quota equals
    the ground-truth count.
    """

    n_users: int = 500
    n_items: int = 5000
    feature_dim: int = 16
    stage_counts: tuple[int, ...] = (5, 5, 5, 5)
    noise_scales: tuple[float, ...] = (1.0, 1.0, 1.0)
    pool_size: int = 200
    reference_quotas: tuple[int, ...] | None = None
    interaction: float = 1.0
    n_days: int = 20
    impressions_per_day: int = 2000
    seed: int = 0
    stage_names: tuple[str, ...] | None = None
    collapse_negative_grades: bool = False

    def __post_init__(self):
        self.stage_counts = tuple(int(c) for c in self.stage_counts)
        self.noise_scales = tuple(float(x) for x in self.noise_scales)
        if self.reference_quotas is None:
            self.reference_quotas = self._default_quotas()
        self.reference_quotas = tuple(int(q) for q in self.reference_quotas)
        if self.stage_names is None:
            self.stage_names = default_stage_names(len(self.stage_counts))
        self.stage_names = tuple(self.stage_names)

    def _default_quotas(self) -> tuple[int, ...]:
        # geometric funnel from the pool down to the ground-truth count
        n_filters = len(self.stage_counts) - 1
        k = self.stage_counts[-1]
        if n_filters <= 0:
            return ()
        ratio = (self.pool_size / max(k, 1)) ** (1.0 / n_filters)
        qs = [int(round(k * ratio ** (n_filters - 1 - i))) for i in range(n_filters)]
        qs[-1] = k
        return tuple(qs)

    @property
    def n_per_impression(self) -> int:
        return int(sum(self.stage_counts))

    @property
    def k(self) -> int:
        return self.stage_counts[-1]

    def validate(self) -> None:
        n_tags = len(self.stage_counts)
        if n_tags < 2:
            raise InvalidArgument("need at least one negative tag and the ground-truth tag")
        if len(self.noise_scales) != n_tags - 1 or len(self.reference_quotas) != n_tags - 1:
            raise InvalidArgument("noise_scales and reference_quotas need one entry per reference filter")
        if len(self.stage_names) != n_tags:
            raise InvalidArgument("stage_names must name every tag")
        if any(c < 0 for c in self.stage_counts) or self.stage_counts[-1] < 1:
            raise InvalidArgument("stage counts must be non-negative with at least one ground-truth item")
        if self.n_per_impression > 64:
            raise InvalidArgument("at most 64 items per impression")
        if self.feature_dim < 2:
            raise InvalidArgument("feature_dim must be at least 2")
        if any(s < 0 for s in self.noise_scales):
            raise InvalidArgument("noise scales must be non-negative")
        qs = (self.pool_size,) + tuple(self.reference_quotas)
        if any(qs[i] <= qs[i + 1] for i in range(len(qs) - 1)):
            raise InvalidArgument("reference quotas must strictly decrease from the pool size")
        if self.reference_quotas[-1] != self.stage_counts[-1]:
            raise InvalidArgument("the final reference quota must equal the ground-truth count")
        for t in range(n_tags - 1):
            died = qs[t] - qs[t + 1]
            if died < self.stage_counts[t]:
                raise InvalidArgument(
                    f"tag {self.stage_names[t]!r} has only {died} candidates per impression, "
                    f"cannot sample {self.stage_counts[t]}"
                )
        if self.pool_size > self.n_items:
            raise InvalidArgument("pool_size exceeds n_items")
        if self.n_days < 1 or self.impressions_per_day < 1:
            raise InvalidArgument("need at least one day with one impression")


@dataclass
class CascadeLog:
    """Column-oriented dataset: one row per impression, ``N`` items per row."""

    user_features: np.ndarray  # (M, d)
    item_features: np.ndarray  # (M, N, d)
    item_ids: np.ndarray  # (M, N)
    stages: np.ndarray  # (M, N) tag index
    ranks: np.ndarray  # (M, N)
    grades: np.ndarray  # (M, N)
    gt: np.ndarray  # (M, N) 0/1
    days: np.ndarray  # (M,)
    user_ids: np.ndarray  # (M,)
    stage_names: tuple[str, ...] = DEFAULT_STAGE_NAMES
    utility: np.ndarray | None = None  # (M, N)

    def __len__(self) -> int:
        return int(self.days.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.stages.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.user_features.shape[1])

    def subset(self, index) -> "CascadeLog":
        idx = np.asarray(index)
        return CascadeLog(
            self.user_features[idx], self.item_features[idx], self.item_ids[idx],
            self.stages[idx], self.ranks[idx], self.grades[idx], self.gt[idx],
            self.days[idx], self.user_ids[idx], self.stage_names,
            None if self.utility is None else self.utility[idx],
        )

    def day_numbers(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.days))

    def select_days(self, days: Iterable[int]) -> "CascadeLog":
        return self.subset(np.flatnonzero(np.isin(self.days, list(days))))

    def to_samples(self) -> list[ImpressionSample]:
        out = []
        for m in range(len(self)):
            items = [
                Item(
                    int(self.item_ids[m, j]), self.item_features[m, j].copy(), int(self.stages[m, j]),
                    int(self.ranks[m, j]), int(self.grades[m, j]), int(self.gt[m, j]),
                    None if self.utility is None else float(self.utility[m, j]),
                )
                for j in range(self.n_items)
            ]
            out.append(ImpressionSample(self.user_features[m].copy(), items, int(self.days[m]), int(self.user_ids[m])))
        return out

    @classmethod
    def from_samples(cls, samples: Sequence[ImpressionSample], stage_names=DEFAULT_STAGE_NAMES) -> "CascadeLog":
        if not samples:
            raise InvalidArgument("no samples")
        n = len(samples[0].items)
        if any(len(s.items) != n for s in samples):
            raise InvalidArgument("impressions must all carry the same number of items")
        has_util = all(it.utility is not None for s in samples for it in s.items)
        return cls(
            np.stack([s.user_features for s in samples]).astype(np.float64),
            np.stack([np.stack([it.features for it in s.items]) for s in samples]).astype(np.float64),
            np.array([[it.item_id for it in s.items] for s in samples], dtype=np.int64),
            np.array([[it.stage for it in s.items] for s in samples], dtype=np.int64),
            np.array([[it.rank for it in s.items] for s in samples], dtype=np.int64),
            np.array([[it.grade for it in s.items] for s in samples], dtype=np.int64),
            np.array([[it.gt for it in s.items] for s in samples], dtype=np.int64),
            np.array([s.day for s in samples], dtype=np.int64),
            np.array([s.user_id for s in samples], dtype=np.int64),
            tuple(stage_names),
            np.array([[it.utility for it in s.items] for s in samples], dtype=np.float64) if has_util else None,
        )


@dataclass
class _World:
    users: np.ndarray
    items: np.ndarray
    interaction_weights: np.ndarray = field(repr=False)


def _make_world(cfg: SynthConfig) -> _World:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    d = cfg.feature_dim
    users = rng.normal(size=(cfg.n_users, d)) / np.sqrt(d) * 2.0
    items = rng.normal(size=(cfg.n_items, d)) / np.sqrt(d) * 2.0
    w = rng.normal(size=d)
    return _World(users, items, w / np.linalg.norm(w) * np.sqrt(d) / 2.0)


def true_utility(user: np.ndarray, items: np.ndarray, interaction_weights: np.ndarray, strength: float) -> np.ndarray:
    """Affinity plus a squared diagonal-bilinear interaction."""
    base = items @ user
    cross = (items * user) @ interaction_weights
    return base + strength * (cross**2 - 1.0)


def generate_impression(cfg: SynthConfig, world: _World, index: int) -> dict:
    rng = np.random.default_rng([cfg.seed, index])
    uid = int(rng.integers(cfg.n_users))
    pool = rng.choice(cfg.n_items, size=cfg.pool_size, replace=False)
    u = world.users[uid]
    util = true_utility(u, world.items[pool], world.interaction_weights, cfg.interaction)

    n_filters = len(cfg.reference_quotas)
    alive = np.arange(cfg.pool_size)
    tag = np.full(cfg.pool_size, n_filters, dtype=np.int64)
    noisy_at_death = np.empty(cfg.pool_size)
    for t, q in enumerate(cfg.reference_quotas):
        noisy = util[alive] + cfg.noise_scales[t] * rng.normal(size=alive.size)
        order = np.argsort(-noisy, kind="stable")
        dead = alive[order[q:]]
        tag[dead] = t
        noisy_at_death[dead] = noisy[order[q:]]
        alive = alive[order[:q]]
        noisy_at_death[alive] = noisy[order[:q]]

    chosen, stages, ranks = [], [], []
    for t, count in enumerate(cfg.stage_counts):
        cand = np.flatnonzero(tag == t)
        pick = cand if count == cand.size else rng.choice(cand, size=count, replace=False)
        # rank within the sampled tag by the noisy utility it was judged on
        r = np.empty(count, dtype=np.int64)
        r[np.argsort(noisy_at_death[pick], kind="stable")] = np.arange(1, count + 1)
        chosen.append(pick)
        stages.append(np.full(count, t))
        ranks.append(r)
    chosen = np.concatenate(chosen)
    stages = np.concatenate(stages)
    ranks = np.concatenate(ranks)
    # shuffle so list position carries no label information
    perm = rng.permutation(chosen.size)
    chosen, stages, ranks = chosen[perm], stages[perm], ranks[perm]
    grades = assign_labels(stages, ranks, cfg.collapse_negative_grades, gt_stage=n_filters)
    return {
        "user_id": uid,
        "user": u,
        "item_ids": pool[chosen],
        "items": world.items[pool[chosen]],
        "stages": stages,
        "ranks": ranks,
        "grades": grades,
        "gt": (stages == n_filters).astype(np.int64),
        "utility": util[chosen],
    }


def generate_dataset(cfg: SynthConfig) -> CascadeLog:
    """Deterministic synthetic log partitioned into ``cfg.n_days`` days."""
    cfg.validate()
    world = _make_world(cfg)
    total = cfg.n_days * cfg.impressions_per_day
    recs = [generate_impression(cfg, world, i) for i in range(total)]
    return CascadeLog(
        user_features=np.stack([r["user"] for r in recs]),
        item_features=np.stack([r["items"] for r in recs]),
        item_ids=np.stack([r["item_ids"] for r in recs]).astype(np.int64),
        stages=np.stack([r["stages"] for r in recs]).astype(np.int64),
        ranks=np.stack([r["ranks"] for r in recs]).astype(np.int64),
        grades=np.stack([r["grades"] for r in recs]).astype(np.int64),
        gt=np.stack([r["gt"] for r in recs]).astype(np.int64),
        days=(np.arange(total) // cfg.impressions_per_day).astype(np.int64),
        user_ids=np.array([r["user_id"] for r in recs], dtype=np.int64),
        stage_names=tuple(cfg.stage_names),
        utility=np.stack([r["utility"] for r in recs]),
    )


# --- line-delimited file format -------------------------------------------------


def _floats(values) -> list[float]:
    return [float(v) for v in values]


def write_dataset(path, samples: Sequence[ImpressionSample] | CascadeLog, stage_names=None) -> None:
    """Write one header line and then one JSON record per impression."""
    if isinstance(samples, CascadeLog):
        stage_names = samples.stage_names
        samples = samples.to_samples()
    names = list(stage_names or DEFAULT_STAGE_NAMES)
    dim = len(samples[0].user_features) if samples else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "feature_dim": dim, "stage_names": names}) + "\n")
        for s in samples:
            rec = {
                "day": s.day,
                "user_id": s.user_id,
                "user_features": _floats(s.user_features),
                "items": [],
            }
            for it in s.items:
                row = {
                    "id": it.item_id,
                    "features": _floats(it.features),
                    "stage": names[it.stage],
                    "rank": it.rank,
                    "grade": it.grade,
                    "gt": it.gt,
                }
                if it.utility is not None:
                    row["utility"] = float(it.utility)
                rec["items"].append(row)
            fh.write(json.dumps(rec) + "\n")


_REQUIRED_ITEM_FIELDS = ("id", "features", "stage", "rank", "grade", "gt")


def read_dataset(path) -> tuple[list[ImpressionSample], tuple[str, ...]]:
    """Read a dataset file; returns the samples and the stage names."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    samples: list[ImpressionSample] = []
    names: tuple[str, ...] = DEFAULT_STAGE_NAMES
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return samples, names
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: invalid header: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported schema_version {header.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    names = tuple(header.get("stage_names", DEFAULT_STAGE_NAMES))
    index = {n: i for i, n in enumerate(names)}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        for key in ("user_features", "items"):
            if key not in rec:
                raise DatasetFormatError(f"line {lineno}: missing field {key!r}")
        items = []
        for j, row in enumerate(rec["items"]):
            for key in _REQUIRED_ITEM_FIELDS:
                if key not in row:
                    raise DatasetFormatError(f"line {lineno}: item {j} missing field {key!r}")
            if row["stage"] not in index:
                raise DatasetFormatError(f"line {lineno}: item {j} has unknown stage {row['stage']!r}")
            items.append(
                Item(
                    int(row["id"]), np.asarray(row["features"], dtype=np.float64), index[row["stage"]],
                    int(row["rank"]), int(row["grade"]), int(row["gt"]),
                    float(row["utility"]) if "utility" in row else None,
                )
            )
        samples.append(
            ImpressionSample(
                np.asarray(rec["user_features"], dtype=np.float64), items,
                int(rec.get("day", 0)), int(rec.get("user_id", -1)),
            )
        )
    return samples, names
