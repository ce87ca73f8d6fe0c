"""Batch-level rootkit detection and the offline/online evaluation protocols.

A batch is anomalous as soon as one modelled probe pair yields a p-value
below ``theta``; it is normal only if every computed p-value is at or above
it. Pairs lacking enough test samples are skipped, or force an alert under
``MissingPairPolicy.ALERT``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from tracetime.delta_engine import ProbePair, Strategy, compute_deltas
from tracetime.errors import NotEnoughData, UnusableBatch
from tracetime.stat_model import (
    PairModel,
    chi2_sf,
    fit_from_matrix,
    load_models,
    mahalanobis_sq_rows,
    quantile_levels,
    save_models,
)
from tracetime.trace_model import Batch, Label

logger = logging.getLogger(__name__)

DEFAULT_Q = 9
DEFAULT_THETA = 1e-10
DEFAULT_N_TRAIN = 50
DEFAULT_REPEATS = 100
DEFAULT_WINDOW = 50

Features = dict[ProbePair, np.ndarray]


class MissingPairPolicy(str, Enum):
    SKIP = "skip"
    ALERT = "alert"


def featurize(batch: Batch, strategy: Strategy | str, q: int = DEFAULT_Q) -> Features:
    """Quantile vector of every pair with at least ``q`` deltas in the batch."""
    series = compute_deltas(batch, strategy)
    levels = quantile_levels(q)
    return {
        pair: np.quantile(vals.astype(np.float64), levels, method="linear")
        for pair, vals in series.deltas.items()
        if len(vals) >= q
    }


@dataclass(frozen=True)
class DetectorModel:
    strategy: Strategy
    q: int
    theta: float
    pair_models: dict[ProbePair, PairModel]
    missing_pair_policy: MissingPairPolicy = MissingPairPolicy.SKIP

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        qs = {m.q for m in self.pair_models.values()}
        if qs - {self.q}:
            raise ValueError(f"pair models have q={sorted(qs)}, detector q={self.q}")

    def save(self, path: str | os.PathLike) -> None:
        save_models(
            self.pair_models,
            path,
            strategy=Strategy(self.strategy).value,
            q=self.q,
            theta=self.theta,
            missing_pair_policy=MissingPairPolicy(self.missing_pair_policy).value,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> DetectorModel:
        models, meta = load_models(path)
        return cls(
            strategy=Strategy(meta["strategy"]),
            q=int(meta["q"]),
            theta=float(meta["theta"]),
            pair_models=models,
            missing_pair_policy=MissingPairPolicy(meta.get("missing_pair_policy", "skip")),
        )


def train_from_features(
    features: Sequence[Features],
    strategy: Strategy | str,
    q: int = DEFAULT_Q,
    theta: float = DEFAULT_THETA,
    missing_pair_policy: MissingPairPolicy | str = MissingPairPolicy.SKIP,
) -> DetectorModel:
    """Fit one pair model for every pair featurized in at least two batches."""
    rows: dict[ProbePair, list[np.ndarray]] = defaultdict(list)
    for feats in features:
        for pair, vec in feats.items():
            rows[pair].append(vec)
    pair_models = {pair: fit_from_matrix(np.vstack(vecs), pair=pair) for pair, vecs in sorted(rows.items()) if len(vecs) >= 2}
    if not pair_models:
        raise NotEnoughData("no probe pair appears in at least two training batches")
    return DetectorModel(Strategy(strategy), q, theta, pair_models, MissingPairPolicy(missing_pair_policy))


def train(
    training_batches: Sequence[Batch],
    strategy: Strategy | str = Strategy.FUNCTION,
    q: int = DEFAULT_Q,
    theta: float = DEFAULT_THETA,
    missing_pair_policy: MissingPairPolicy | str = MissingPairPolicy.SKIP,
    unlabeled: bool = False,
) -> DetectorModel:
    """Train a normal-behaviour model from normal batches.

    ``unlabeled=True`` lifts the normal-only check for sliding-window use,
    where the window may straddle a class switch.

    Raises:
        ValueError: a rootkit batch is present and ``unlabeled`` is False.
        NotEnoughData: fewer than two usable batches, or no pair survives.
    """
    if not unlabeled:
        bad = [b.batch_id for b in training_batches if b.label is not Label.NORMAL]
        if bad:
            raise ValueError(f"training batches must be labeled normal; got rootkit batches {bad[:5]}")
    usable = [b for b in training_batches if b.usable]
    for b in training_batches:
        if not b.usable:
            logger.warning("skipping unusable training batch %s", b.batch_id)
    if len(usable) < 2:
        raise NotEnoughData(f"need at least 2 usable training batches, got {len(usable)}")
    return train_from_features([featurize(b, strategy, q) for b in usable], strategy, q, theta, missing_pair_policy)


@dataclass
class DetectionReport:
    batch_id: str
    per_pair_pvalues: dict[ProbePair, float | None]
    min_pvalue: float | None
    triggering_pairs: list[ProbePair]
    anomalous: bool

    @property
    def verdict(self) -> str:
        return "anomalous" if self.anomalous else "normal"

    @property
    def skipped_pairs(self) -> list[ProbePair]:
        return [p for p, v in self.per_pair_pvalues.items() if v is None]

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "verdict": self.verdict,
            "min_pvalue": self.min_pvalue,
            "triggering_pairs": [str(p) for p in self.triggering_pairs],
            "per_pair_pvalues": {str(p): ("skipped" if v is None else v) for p, v in self.per_pair_pvalues.items()},
        }


def _pvalue_table(model: DetectorModel, features: Sequence[Features]) -> tuple[list[ProbePair], np.ndarray]:
    """p-values of ``m`` featurized batches against every modelled pair.

    Returns the pair order and an ``m x P`` array with NaN where the batch
    lacks enough samples for that pair.
    """
    pairs = list(model.pair_models)
    table = np.full((len(features), len(pairs)), np.nan)
    for j, pair in enumerate(pairs):
        rows = [i for i, f in enumerate(features) if pair in f]
        if not rows:
            continue
        mat = np.vstack([features[i][pair] for i in rows])
        table[rows, j] = chi2_sf(mahalanobis_sq_rows(mat, model.pair_models[pair]), model.q)
    return pairs, table


def _summarize(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row minimum computed p-value (NaN if none) and any-missing flag."""
    missing = np.isnan(table).any(axis=1)
    with np.errstate(all="ignore"):
        filled = np.where(np.isnan(table), np.inf, table)
        mins = filled.min(axis=1) if table.shape[1] else np.full(table.shape[0], np.inf)
    mins = np.where(np.isinf(mins), np.nan, mins)
    return mins, missing


def _verdicts(min_p: np.ndarray, missing: np.ndarray, theta: float, policy: MissingPairPolicy) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        flagged = np.nan_to_num(min_p, nan=1.0) < theta
    if policy is MissingPairPolicy.ALERT:
        flagged = flagged | missing
    return flagged


def detect_features(model: DetectorModel, features: Features, batch_id: str = "") -> DetectionReport:
    pairs, table = _pvalue_table(model, [features])
    row = table[0]
    per_pair = {p: (None if math.isnan(v) else float(v)) for p, v in zip(pairs, row)}
    computed = [v for v in per_pair.values() if v is not None]
    triggering = [p for p, v in per_pair.items() if v is not None and v < model.theta]
    anomalous = bool(triggering) or (model.missing_pair_policy is MissingPairPolicy.ALERT and len(computed) < len(pairs))
    return DetectionReport(batch_id, per_pair, min(computed) if computed else None, triggering, anomalous)


def detect(model: DetectorModel, batch: Batch) -> DetectionReport:
    """Score every modelled pair of one batch and combine with the minimum rule.

    Raises:
        UnusableBatch: the batch has fewer than two events.
    """
    if not batch.usable:
        raise UnusableBatch(f"batch {batch.batch_id} has {len(batch.events)} events")
    return detect_features(model, featurize(batch, model.strategy, model.q), batch.batch_id)


@dataclass(frozen=True)
class MetricSet:
    """Confusion counts and derived rates; a rate is ``None`` when undefined."""

    tp: int
    fp: int
    fn: int
    tn: int
    tpr: float | None
    tnr: float | None
    precision: float | None
    accuracy: float | None
    f1: float | None

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("tp", "fp", "fn", "tn", "tpr", "tnr", "precision", "accuracy", "f1")}


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def compute_metrics(tp: int, fp: int, fn: int, tn: int) -> MetricSet:
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("counts must be non-negative")
    tpr = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    if tpr is None or prec is None:
        f1 = None
    elif prec + tpr > 0:
        f1 = 2 * prec * tpr / (prec + tpr)
    else:
        f1 = 0.0
    return MetricSet(tp, fp, fn, tn, tpr, _ratio(tn, tn + fp), prec, _ratio(tp + tn, tp + tn + fp + fn), f1)


def _confusion(flagged: np.ndarray, is_rootkit: np.ndarray) -> tuple[int, int, int, int]:
    tp = int(np.sum(flagged & is_rootkit))
    fp = int(np.sum(flagged & ~is_rootkit))
    fn = int(np.sum(~flagged & is_rootkit))
    tn = int(np.sum(~flagged & ~is_rootkit))
    return tp, fp, fn, tn


def _median(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.median(defined)) if defined else None


@dataclass
class OfflineResult:
    """Aggregated and per-repeat outcome of the offline protocol.

    ``min_pvalues``, ``missing`` and ``is_rootkit`` keep one array per repeat
    (aligned with that repeat's test batches) so other thresholds can be
    evaluated without re-training.
    """

    metrics: MetricSet
    per_repeat: list[MetricSet]
    median_f1: float | None
    theta: float
    policy: MissingPairPolicy
    min_pvalues: list[np.ndarray] = field(repr=False, default_factory=list)
    missing: list[np.ndarray] = field(repr=False, default_factory=list)
    is_rootkit: list[np.ndarray] = field(repr=False, default_factory=list)

    def metrics_at(self, theta: float) -> tuple[MetricSet, float | None]:
        """Aggregated metrics and median F1 at another threshold."""
        total = np.zeros(4, dtype=int)
        f1s = []
        for mins, miss, rk in zip(self.min_pvalues, self.missing, self.is_rootkit):
            counts = _confusion(_verdicts(mins, miss, theta, self.policy), rk)
            total += counts
            f1s.append(compute_metrics(*counts).f1)
        return compute_metrics(*map(int, total)), _median(f1s)

    def to_json(self) -> dict:
        return {
            "theta": self.theta,
            "missing_pair_policy": self.policy.value,
            "repeats": len(self.per_repeat),
            "median_f1": self.median_f1,
            "aggregate": self.metrics.to_json(),
            "per_repeat": [m.to_json() for m in self.per_repeat],
        }


def sweep_theta(result: OfflineResult, thetas: Sequence[float]) -> list[dict]:
    """Metrics of an offline evaluation over a grid of thresholds."""
    out = []
    for theta in thetas:
        metrics, median_f1 = result.metrics_at(theta)
        out.append({"theta": theta, "median_f1": median_f1, **metrics.to_json()})
    return out


def eval_offline(
    batches: Sequence[Batch],
    strategy: Strategy | str = Strategy.FUNCTION,
    q: int = DEFAULT_Q,
    theta: float = DEFAULT_THETA,
    n_train: int = DEFAULT_N_TRAIN,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
    missing_pair_policy: MissingPairPolicy | str = MissingPairPolicy.SKIP,
) -> OfflineResult:
    """Repeated random-split evaluation on the batches of one scenario.

    Each repeat draws ``n_train`` normal batches without replacement, trains
    on them and classifies every remaining batch. Confusion counts are summed
    across repeats; per-repeat metrics are kept for the median F1.

    Raises:
        NotEnoughData: not more than ``n_train`` usable normal batches.
    """
    policy = MissingPairPolicy(missing_pair_policy)
    usable = [b for b in batches if b.usable]
    if len(usable) < len(batches):
        logger.warning("skipping %d unusable batches", len(batches) - len(usable))
    normal_idx = np.array([i for i, b in enumerate(usable) if b.label is Label.NORMAL])
    if len(normal_idx) <= n_train:
        raise NotEnoughData(f"{len(normal_idx)} normal batches, need more than n_train={n_train}")
    features = [featurize(b, strategy, q) for b in usable]
    is_rootkit = np.array([b.label is Label.ROOTKIT for b in usable])

    result = OfflineResult(compute_metrics(0, 0, 0, 0), [], None, theta, policy)
    total = np.zeros(4, dtype=int)
    for child in np.random.SeedSequence(seed).spawn(repeats):
        rng = np.random.default_rng(child)
        train_idx = set(rng.choice(normal_idx, size=n_train, replace=False).tolist())
        test_idx = [i for i in range(len(usable)) if i not in train_idx]
        model = train_from_features([features[i] for i in sorted(train_idx)], strategy, q, theta, policy)
        _, table = _pvalue_table(model, [features[i] for i in test_idx])
        mins, missing = _summarize(table)
        rk = is_rootkit[test_idx]
        counts = _confusion(_verdicts(mins, missing, theta, policy), rk)
        total += counts
        result.per_repeat.append(compute_metrics(*counts))
        result.min_pvalues.append(mins)
        result.missing.append(missing)
        result.is_rootkit.append(rk)
    result.metrics = compute_metrics(*map(int, total))
    result.median_f1 = _median([m.f1 for m in result.per_repeat])
    return result


@dataclass
class OnlineStep:
    index: int
    batch_id: str
    label: Label
    role: str  # "positive", "negative" or "excluded"
    anomalous: bool
    min_pvalue: float | None
    pvalues: dict[ProbePair, float | None]

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "batch_id": self.batch_id,
            "label": self.label.value,
            "role": self.role,
            "verdict": "anomalous" if self.anomalous else "normal",
            "min_pvalue": self.min_pvalue,
        }


@dataclass
class OnlineResult:
    metrics: MetricSet
    steps: list[OnlineStep]
    window: int

    def to_json(self) -> dict:
        return {
            "window": self.window,
            "metrics": self.metrics.to_json(),
            "steps": [s.to_json() for s in self.steps],
        }

    def write_trace_csv(self, path: str | os.PathLike) -> None:
        """One row per step and modelled pair: ``index,batch_id,label,role,pair,pvalue``."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "batch_id", "label", "role", "pair", "pvalue"])
            for s in self.steps:
                for pair, p in s.pvalues.items():
                    writer.writerow([s.index, s.batch_id, s.label.value, s.role, str(pair), "" if p is None else repr(p)])


def online_role(labels: Sequence[Label], t: int, window: int) -> str:
    """Counting role of step ``t`` under the sliding-window protocol.

    The first batch after a class switch is a positive; a batch whose
    ``window`` predecessors all share its class is a negative; anything else
    is excluded from the counts.
    """
    if t < window or t >= len(labels):
        raise IndexError(t)
    if labels[t] != labels[t - 1]:
        return "positive"
    if all(lab == labels[t] for lab in labels[t - window : t]):
        return "negative"
    return "excluded"


def eval_online(
    batches: Sequence[Batch],
    strategy: Strategy | str = Strategy.FUNCTION,
    q: int = DEFAULT_Q,
    theta: float = DEFAULT_THETA,
    window: int = DEFAULT_WINDOW,
    missing_pair_policy: MissingPairPolicy | str = MissingPairPolicy.SKIP,
) -> OnlineResult:
    """Sliding-window evaluation over chronologically ordered batches.

    At every step ``t >= window`` the model is retrained, labels ignored, on
    batches ``[t - window, t)`` and applied to batch ``t``.

    Raises:
        NotEnoughData: fewer than ``window + 1`` batches.
    """
    if len(batches) < window + 1:
        raise NotEnoughData(f"{len(batches)} batches, need at least window + 1 = {window + 1}")
    policy = MissingPairPolicy(missing_pair_policy)
    features = [featurize(b, strategy, q) if b.usable else None for b in batches]
    labels = [b.label for b in batches]
    steps = []
    counts = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for t in range(window, len(batches)):
        role = online_role(labels, t, window)
        batch = batches[t]
        window_feats = [f for f in features[t - window : t] if f is not None]
        if features[t] is None:
            logger.warning("step %d: batch %s is unusable, excluded", t, batch.batch_id)
            steps.append(OnlineStep(t, batch.batch_id, batch.label, "excluded", False, None, {}))
            continue
        try:
            model = train_from_features(window_feats, strategy, q, theta, policy)
        except NotEnoughData:
            logger.warning("step %d: window yields no trainable pair, excluded", t)
            steps.append(OnlineStep(t, batch.batch_id, batch.label, "excluded", False, None, {}))
            continue
        report = detect_features(model, features[t], batch.batch_id)
        if role == "positive":
            counts["tp" if report.anomalous else "fn"] += 1
        elif role == "negative":
            counts["fp" if report.anomalous else "tn"] += 1
        steps.append(
            OnlineStep(t, batch.batch_id, batch.label, role, report.anomalous, report.min_pvalue, report.per_pair_pvalues)
        )
    return OnlineResult(compute_metrics(**counts), steps, window)


def write_json(obj, path: str | os.PathLike | None) -> str:
    text = json.dumps(obj, indent=1, sort_keys=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
