"""Experiment runner: training loops, held-out and day-by-day evaluation, diagnostics.

A run is fully determined by its :class:`ExperimentConfig`. Metrics files
written by :func:`write_report` are bitwise reproducible; wall-clock time is
kept in a separate file so it never perturbs them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .diffsort import OPERATORS, sort_operator
from .evaluation import (
    MAX_ENUMERATION_N,
    CascadeConfig,
    batch_recall,
    bound_gap,
    cascade_filter,
    delta_prime,
    ndcg_at,
    top_q,
)
from .losses import (
    FusionWeights,
    LossOutput,
    loss_bce,
    loss_e2e,
    loss_fixed_weights,
    loss_ranknet,
    loss_single,
    loss_uwl,
    sum_losses,
    topk_select_prob,
)
from .models import AdamState, Mlp, TwoTower, adam_step, load_checkpoint, save_checkpoint
from .numerics import DEFAULT_EPS, InvalidArgument
from .sampling import CascadeLog, SynthConfig, generate_dataset, read_dataset

METHODS = ("lcron", "lcron_fixed_weights", "bce", "ranknet", "e2e_only", "single_only")
EVAL_MODES = ("last_day", "streaming")
USES_TEMPERATURE = {"lcron", "lcron_fixed_weights", "e2e_only", "single_only"}


class ConfigError(InvalidArgument):
    pass


@dataclass
class ExperimentConfig:
    method: str = "lcron"
    operator: str = "neural_sort"
    temperature: float = 1.0
    train_quotas: tuple[int, ...] | None = None  # defaults to K at every stage
    serving_quotas: tuple[int, ...] = (15, 10)
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset_path: str | None = None
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    eval_mode: str = "last_day"
    incremental: bool = False
    fixed_weights: tuple[float, float] = (1.0, 1.0)
    hidden: tuple[int, ...] = (32,)
    embedding_dim: int = 16
    eps: float = DEFAULT_EPS
    diag_impressions: int = 200

    @property
    def n_stages(self) -> int:
        return len(self.serving_quotas)

    def validate(self, k: int | None = None, n_items: int | None = None) -> None:
        """Reject inconsistent settings before any training happens."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")
        if self.method in USES_TEMPERATURE:
            if self.operator not in OPERATORS:
                raise ConfigError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
            if not (math.isfinite(self.temperature) and self.temperature > 0):
                raise ConfigError("temperature must be a positive finite number")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")
        if len(self.fixed_weights) != 2 or any(w < 0 for w in self.fixed_weights):
            raise ConfigError("fixed_weights takes two non-negative numbers")
        if self.train_quotas is not None and len(self.train_quotas) != self.n_stages:
            raise ConfigError("train_quotas needs one entry per serving stage")
        if k is not None:
            try:
                CascadeConfig(self.serving_quotas, k)
            except InvalidArgument as exc:
                raise ConfigError(str(exc)) from None
        if n_items is not None:
            if self.serving_quotas[0] > n_items:
                raise ConfigError(f"first quota {self.serving_quotas[0]} exceeds the {n_items} candidates")
            if any(q < 1 or q > n_items for q in self.resolved_train_quotas(k or 1)):
                raise ConfigError("training quotas must lie in [1, N]")

    def resolved_train_quotas(self, k: int) -> tuple[int, ...]:
        return tuple(self.train_quotas) if self.train_quotas is not None else (k,) * self.n_stages

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["synth"] = dataclasses.asdict(self.synth)
        return d


# --- data -------------------------------------------------------------------------

_DATA_CACHE: dict[str, CascadeLog] = {}


def load_data(cfg: ExperimentConfig) -> CascadeLog:
    """The configured dataset; generated logs are memoised per generator config."""
    if cfg.dataset_path is not None:
        samples, names = read_dataset(cfg.dataset_path)
        if not samples:
            raise ConfigError(f"dataset {cfg.dataset_path} is empty")
        return CascadeLog.from_samples(samples, names)
    key = repr(cfg.synth)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = generate_dataset(cfg.synth)
    return _DATA_CACHE[key]


def gt_count(log: CascadeLog) -> int:
    counts = np.unique(log.gt.sum(axis=1))
    if counts.size != 1 or counts[0] < 1:
        raise ConfigError("every impression must carry the same non-zero number of ground-truth items")
    return int(counts[0])


# --- models and training ----------------------------------------------------------


@dataclass
class Cascade:
    """One scorer per stage plus the fusion log-scales (used by ``lcron`` only)."""

    models: list
    fusion: FusionWeights
    opt_states: list = field(default_factory=list)
    fusion_state: AdamState | None = None

    def scores(self, user: np.ndarray, items: np.ndarray, chunk: int = 2048) -> list[np.ndarray]:
        out = [[] for _ in self.models]
        for start in range(0, user.shape[0], chunk):
            sl = slice(start, start + chunk)
            for i, m in enumerate(self.models):
                out[i].append(m.score(user[sl], items[sl]))
        return [np.concatenate(o, axis=0) for o in out]

    def checkpoint(self, path) -> None:
        spaces = {f"stage{i}": m.params for i, m in enumerate(self.models)}
        spaces["fusion"] = self.fusion.as_params()
        save_checkpoint(path, spaces)


def build_cascade(cfg: ExperimentConfig, feature_dim: int) -> Cascade:
    """Retrieval is a two-tower model; later stages are MLP scorers."""
    models = []
    for i in range(cfg.n_stages):
        seed = [cfg.seed, 100 + i]
        if i == 0:
            models.append(TwoTower.init(seed, feature_dim, cfg.hidden, cfg.embedding_dim))
        else:
            models.append(Mlp.init(seed, feature_dim, cfg.hidden))
    return Cascade(
        models,
        FusionWeights.init(cfg.n_stages),
        [AdamState(lr=cfg.lr) for _ in models],
        AdamState(lr=cfg.lr),
    )


def cascade_from_checkpoint(cfg: ExperimentConfig, path, feature_dim: int) -> Cascade:
    """Rebuild a cascade shaped by ``cfg`` and fill it from a saved checkpoint."""
    cascade = build_cascade(cfg, feature_dim)
    spaces = load_checkpoint(path)
    for i, m in enumerate(cascade.models):
        saved = spaces.get(f"stage{i}")
        if saved is None or set(saved) != set(m.params):
            raise ConfigError(f"checkpoint {path} does not match the configured stage {i} model")
        for name, arr in saved.items():
            if arr.shape != m.params[name].shape:
                raise ConfigError(f"checkpoint tensor stage{i}/{name} has shape {arr.shape}")
        m.params = saved
    if "fusion" in spaces:
        cascade.fusion = FusionWeights.from_params(spaces["fusion"])
    return cascade


def stage_masks(stages: np.ndarray, n_tags: int, n_stages: int) -> list[np.ndarray]:
    """Items each stage would have seen in the logged funnel.

    Stage ``i`` sees every item whose tag reached its depth in the reference
    funnel; the first stage sees the whole list.
    """
    masks = []
    for i in range(n_stages):
        lo = int(math.ceil(i * (n_tags - 1) / n_stages))
        masks.append((stages >= lo).astype(np.float64))
    return masks


def method_loss(cfg: ExperimentConfig, cascade: Cascade, scores: list[np.ndarray], batch: CascadeLog,
                k: int) -> LossOutput:
    """Loss value and per-stage score gradients for the configured method."""
    gt = batch.gt
    quotas = cfg.resolved_train_quotas(k)
    t, op, eps = cfg.temperature, cfg.operator, cfg.eps
    if cfg.method == "bce":
        masks = stage_masks(batch.stages, len(batch.stage_names), cfg.n_stages)
        return sum_losses([loss_bce(s, gt, m) for s, m in zip(scores, masks)])
    if cfg.method == "ranknet":
        return sum_losses([loss_ranknet(s, batch.grades) for s in scores])
    if cfg.method == "single_only":
        return sum_losses([loss_single(s, k, gt, t, op, eps) for s in scores])
    e2e = loss_e2e(scores, quotas, gt, t, op, eps)
    if cfg.method == "e2e_only":
        return e2e
    singles = [loss_single(s, k, gt, t, op, eps) for s in scores]
    if cfg.method == "lcron_fixed_weights":
        return loss_fixed_weights(e2e, singles, *cfg.fixed_weights)
    return loss_uwl(e2e, singles, cascade.fusion)


def train(cfg: ExperimentConfig, data: CascadeLog, cascade: Cascade | None = None) -> tuple[Cascade, list[float]]:
    """Train for ``cfg.epochs`` passes over ``data``; returns the cascade and per-step losses.

    Passing an existing ``cascade`` continues its training (incremental mode).
    """
    k = gt_count(data)
    cfg.validate(k, data.n_items)
    if cascade is None:
        cascade = build_cascade(cfg, data.feature_dim)
    rng = np.random.default_rng([cfg.seed, 7, len(data)])
    curve: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            fwd = [m.forward(batch.user_features, batch.item_features) for m in cascade.models]
            loss = method_loss(cfg, cascade, [f[0] for f in fwd], batch, k)
            for i, (m, (_, cache)) in enumerate(zip(cascade.models, fwd)):
                grads = m.backward(cache, loss.grads[i])
                m.params, cascade.opt_states[i] = adam_step(m.params, grads, cascade.opt_states[i])
            if loss.fusion_grads is not None:
                fp, cascade.fusion_state = adam_step(cascade.fusion.as_params(), loss.fusion_grads,
                                                     cascade.fusion_state)
                cascade.fusion = FusionWeights.from_params(fp)
            curve.append(loss.value)
    return cascade, curve


# --- evaluation -------------------------------------------------------------------


@dataclass
class DayMetrics:
    day: int
    joint_recall: float
    stage_recall: list[float]
    stage_ndcg: list[float]
    mean_delta_prime: float | None

    def row(self) -> dict:
        out = {"day": self.day, "joint_recall": self.joint_recall}
        for i, (r, n) in enumerate(zip(self.stage_recall, self.stage_ndcg)):
            out[f"stage{i}_recall"] = r
            out[f"stage{i}_ndcg"] = n
        out["mean_delta_prime"] = self.mean_delta_prime
        return out


@dataclass
class MetricsReport:
    method: str
    seed: int
    days: list[DayMetrics]
    loss_curves: dict[int, list[float]]
    fusion: dict[str, list[float]] | None = None
    wall_clock: float = 0.0

    @property
    def joint_recall(self) -> float:
        return float(np.mean([d.joint_recall for d in self.days]))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "days": [d.row() for d in self.days],
            "aggregate": {"joint_recall": self.joint_recall},
            "loss_curves": {str(k): v for k, v in self.loss_curves.items()},
            "fusion": self.fusion,
        }


def soft_stage_probs(cascade: Cascade, user, items, quotas, temperature, operator) -> list[np.ndarray]:
    scores = cascade.scores(user, items)
    return [topk_select_prob(sort_operator(operator, s, temperature), q) for s, q in zip(scores, quotas)]


def mean_delta_prime(cascade: Cascade, data: CascadeLog, cfg: ExperimentConfig, k: int) -> float | None:
    """Average closed-form gap over the first two stages, or ``None`` for one stage."""
    if cfg.n_stages < 2:
        return None
    quotas = cfg.resolved_train_quotas(k)
    p = soft_stage_probs(cascade, data.user_features, data.item_features, quotas[:2], cfg.temperature,
                         cfg.operator)
    return float(delta_prime(p[0], p[1], quotas[1]).mean())


def evaluate(cascade: Cascade, data: CascadeLog, cfg: ExperimentConfig, day: int = -1) -> DayMetrics:
    """Hard-funnel joint recall plus each stage's stand-alone recall and NDCG."""
    k = gt_count(data)
    ccfg = CascadeConfig(cfg.serving_quotas, k)
    scores = cascade.scores(data.user_features, data.item_features)
    gt = data.gt.astype(np.float64)
    joint = float(batch_recall(cascade_filter(scores, ccfg), gt).mean())
    stage_recall = [float(batch_recall(top_q(s, q), gt).mean()) for s, q in zip(scores, ccfg.quotas)]
    stage_ndcg = [float(np.mean(ndcg_at(s, gt, k))) for s in scores]
    return DayMetrics(day, joint, stage_recall, stage_ndcg, mean_delta_prime(cascade, data, cfg, k))


def _fusion_summary(cascade: Cascade, cfg: ExperimentConfig):
    if cfg.method != "lcron":
        return None
    return {k: np.asarray(v).tolist() for k, v in cascade.fusion.as_params().items()}


def split_days(days: Sequence[int], holdout: str = "test") -> tuple[list[int], int]:
    """Training days and the evaluated day.

    ``test`` holds out the last day. ``validation`` holds out the
    second-to-last day, trains on everything before it and never touches
    the last day, so hyperparameters can be picked without seeing test data.
    """
    days = sorted(days)
    if holdout == "test":
        if len(days) < 2:
            raise ConfigError("need at least two days: training days plus a held-out day")
        return days[:-1], days[-1]
    if holdout == "validation":
        if len(days) < 3:
            raise ConfigError("validation needs at least three days")
        return days[:-2], days[-2]
    raise ConfigError(f"unknown holdout {holdout!r}")


def run_experiment(cfg: ExperimentConfig, data: CascadeLog | None = None,
                   checkpoint: str | Path | None = None, holdout: str = "test") -> MetricsReport:
    """Train for one pass over the training days, then evaluate the held-out day."""
    data = load_data(cfg) if data is None else data
    cfg.validate(gt_count(data), data.n_items)
    train_days, eval_day = split_days(data.day_numbers(), holdout)
    start = time.perf_counter()
    cascade, curve = train(cfg, data.select_days(train_days))
    metrics = evaluate(cascade, data.select_days([eval_day]), cfg, eval_day)
    if checkpoint is not None:
        cascade.checkpoint(checkpoint)
    return MetricsReport(cfg.method, cfg.seed, [metrics], {eval_day: curve}, _fusion_summary(cascade, cfg),
                         time.perf_counter() - start)


def streaming_eval(cfg: ExperimentConfig, data: CascadeLog | None = None) -> MetricsReport:
    """Evaluate each day ``t`` after training on days before ``t``.

    Retrains from scratch for each day unless ``cfg.incremental`` is set, in
    which case the model from day ``t-1`` continues on the newly added day.
    """
    data = load_data(cfg) if data is None else data
    cfg.validate(gt_count(data), data.n_items)
    days = data.day_numbers()
    if len(days) < 2:
        raise InvalidArgument("streaming evaluation needs at least two days")
    start = time.perf_counter()
    out, curves, cascade = [], {}, None
    for idx in range(1, len(days)):
        if cfg.incremental:
            cascade, curve = train(cfg, data.select_days([days[idx - 1]]), cascade)
        else:
            cascade, curve = train(cfg, data.select_days(days[:idx]))
        curves[days[idx]] = curve
        out.append(evaluate(cascade, data.select_days([days[idx]]), cfg, days[idx]))
    return MetricsReport(cfg.method, cfg.seed, out, curves, _fusion_summary(cascade, cfg),
                         time.perf_counter() - start)


def training_prefixes(days: Sequence[int]) -> list[list[int]]:
    """Training day sets used by streaming evaluation, one per evaluated day."""
    days = sorted(days)
    return [days[:i] for i in range(1, len(days))]


# --- diagnostics ------------------------------------------------------------------


def _gap_summary(cascade: Cascade, sample: CascadeLog, cfg: ExperimentConfig, k: int) -> dict:
    quotas = cfg.resolved_train_quotas(k)
    p1, p2 = soft_stage_probs(cascade, sample.user_features, sample.item_features, quotas[:2],
                              cfg.temperature, cfg.operator)
    dp = delta_prime(p1, p2, quotas[1])
    out = {"mean_delta_prime": float(dp.mean()), "max_delta_prime": float(dp.max())}
    if sample.n_items <= MAX_ENUMERATION_N:
        reps = [bound_gap(a, b, quotas[0], quotas[1]) for a, b in zip(p1, p2)]
        deltas = np.stack([r.delta for r in reps])
        out["mean_delta"] = float(deltas.mean())
        out["max_delta"] = float(deltas.max())
        out["bound_violations"] = int(sum(int((r.delta < -1e-9).any()) for r in reps))
        out["gap_violations"] = int(sum(int((r.delta > r.delta_prime + 1e-9).any()) for r in reps))
        out["max_inclusion_deviation"] = float(max(r.marginal_deviation for r in reps))
    return out


def diagnostics_run(cfg: ExperimentConfig, data: CascadeLog | None = None) -> dict:
    """Gap statistics on held-out impressions before and after training.

    The same impressions are scored by the initial and the trained cascade,
    so the two summaries are paired.
    """
    data = load_data(cfg) if data is None else data
    k = gt_count(data)
    cfg.validate(k, data.n_items)
    if cfg.n_stages < 2:
        raise ConfigError("gap diagnostics need at least two stages")
    days = data.day_numbers()
    held = data.select_days([days[-1]])
    sample = held.subset(np.arange(min(cfg.diag_impressions, len(held))))
    before = _gap_summary(build_cascade(cfg, data.feature_dim), sample, cfg, k)
    train_days = days[:-1] if len(days) > 1 else days
    cascade, _ = train(cfg, data.select_days(train_days))
    after = _gap_summary(cascade, sample, cfg, k)
    return {"method": cfg.method, "seed": cfg.seed, "before": before, "after": after}


# --- multi-seed reporting ---------------------------------------------------------


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return dataclasses.replace(cfg, **kw)


def run_seeds(cfg: ExperimentConfig, seeds: Sequence[int], data: CascadeLog | None = None) -> list[MetricsReport]:
    data = load_data(cfg) if data is None else data
    return [run_experiment(with_overrides(cfg, seed=int(s)), data) for s in seeds]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def compare(a: Sequence[float], b: Sequence[float]) -> dict:
    """Two-sample t-test of ``a`` against ``b``; ``p_value`` is two-sided."""
    res = stats.ttest_ind(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    ma, mb = float(np.mean(a)), float(np.mean(b))
    p = float(res.pvalue) if np.isfinite(res.pvalue) else (0.0 if ma != mb else 1.0)
    return {"mean_a": ma, "mean_b": mb, "t": float(res.statistic), "p_value": p}


def sweep(cfg: ExperimentConfig, temperatures: Sequence[float], data: CascadeLog | None = None,
          holdout: str = "validation") -> list[dict]:
    """One run per temperature, scored on the validation day by default."""
    data = load_data(cfg) if data is None else data
    rows = []
    for t in temperatures:
        rep = run_experiment(with_overrides(cfg, temperature=float(t)), data, holdout=holdout)
        rows.append({"temperature": float(t), **rep.days[0].row()})
    return rows


def select_temperature(cfg: ExperimentConfig, grid: Sequence[float], data: CascadeLog | None = None) -> float:
    """Grid value with the best validation joint recall; earlier entries win ties.

    Methods that ignore the temperature keep the configured value.
    """
    if cfg.method not in USES_TEMPERATURE:
        return cfg.temperature
    rows = sweep(cfg, grid, data, holdout="validation")
    best = max(range(len(rows)), key=lambda i: (rows[i]["joint_recall"], -i))
    return rows[best]["temperature"]


# --- output files -----------------------------------------------------------------


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def summary_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[c for c in cols]] + [
        ["-" if r[c] is None else f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> dict[str, Path]:
    """Write JSON, per-day CSV and a summary table; timing goes to its own file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [d.row() for d in report.days]
    paths = {
        "json": out / f"{stem}.json",
        "csv": out / f"{stem}.csv",
        "summary": out / f"{stem}_summary.txt",
        "timing": out / f"{stem}_timing.json",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    write_rows_csv(paths["csv"], rows)
    paths["summary"].write_text(f"method={report.method} seed={report.seed}\n" + summary_table(rows))
    paths["timing"].write_text(json.dumps({"wall_clock_seconds": report.wall_clock}) + "\n")
    return paths


# --- presets ----------------------------------------------------------------------

TEMPERATURE_GRID = (1.0, 3.0, 10.0, 30.0, 100.0)


def preset(name: str, **overrides) -> ExperimentConfig:
    """Named configurations used by the acceptance suite and the CLI.

    ``benchmark`` is the noisy 20-day log with a low-capacity retrieval tower
    and an interaction term it cannot express, so no method saturates.
    ``noiseless`` removes generator noise and the interaction term and uses
    linear towers, which makes the ground truth exactly learnable.
    """
    if name == "benchmark":
        synth = SynthConfig(n_days=20, impressions_per_day=2000, collapse_negative_grades=True, interaction=3.0)
        base = ExperimentConfig(synth=synth, embedding_dim=4, hidden=(16,), batch_size=64, temperature=30.0)
    elif name == "noiseless":
        synth = SynthConfig(n_days=20, impressions_per_day=2000, noise_scales=(0.0, 0.0, 0.0), interaction=0.0)
        base = ExperimentConfig(synth=synth, hidden=(), batch_size=64, epochs=2, temperature=10.0)
    elif name == "default":
        base = ExperimentConfig()
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return with_overrides(base, **overrides)


PRESETS = ("default", "benchmark", "noiseless")
