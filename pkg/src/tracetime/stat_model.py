"""Quantile features, normal-behaviour models and chi-square p-values.

Each batch's delta distribution for a probe pair is summarised by ``q``
sample quantiles at levels ``k / (q + 1)``. A :class:`PairModel` holds the
mean and covariance of those vectors over ``n`` normal training batches; an
unseen vector is scored by its squared Mahalanobis distance, converted into
a p-value with a chi-square survival function of ``q`` degrees of freedom.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, special

from tracetime.delta_engine import ProbePair
from tracetime.errors import NotEnoughData

RIDGE_ABS = 1e-12
RIDGE_REL = 1e-9


def quantile_levels(q: int) -> np.ndarray:
    """Equidistant interior levels; q=1 gives the median, q=4 gives 0.2..0.8."""
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    return np.arange(1, q + 1) / (q + 1)


@dataclass(frozen=True)
class QuantileVector:
    values: np.ndarray
    pair: ProbePair | None = None
    batch_id: str | None = None

    @property
    def q(self) -> int:
        return len(self.values)


def quantile_vector(
    deltas: Sequence[float] | np.ndarray,
    q: int,
    pair: ProbePair | None = None,
    batch_id: str | None = None,
) -> QuantileVector:
    """Sample quantiles with linear interpolation between order statistics.

    Raises:
        NotEnoughData: fewer than ``q`` deltas.
    """
    levels = quantile_levels(q)
    data = np.asarray(deltas, dtype=np.float64)
    if data.size < q:
        raise NotEnoughData(f"{data.size} deltas for q={q}")
    return QuantileVector(np.quantile(data, levels, method="linear"), pair, batch_id)


@dataclass(frozen=True)
class PairModel:
    """Mean and regularised covariance of training quantile vectors for one pair.

    ``precision`` is the inverse of ``covariance + ridge_used * I``.
    """

    pair: ProbePair | None
    n: int
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    ridge_used: float

    @property
    def q(self) -> int:
        return len(self.mean)

    @classmethod
    def from_covariance(
        cls, mean, covariance, ridge: float = 0.0, n: int = 0, pair: ProbePair | None = None
    ) -> PairModel:
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        cov = (cov + cov.T) / 2
        precision = _spd_inverse(cov + ridge * np.eye(mean.size))
        return cls(pair, n, mean, cov, precision, float(ridge))

    def to_json(self) -> dict:
        return {
            "pair": str(self.pair) if self.pair is not None else None,
            "n": self.n,
            "q": self.q,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.ravel().tolist(),
            "ridge_used": self.ridge_used,
        }

    @classmethod
    def from_json(cls, obj: dict) -> PairModel:
        q = int(obj["q"])
        cov = np.asarray(obj["covariance"], dtype=np.float64).reshape(q, q)
        pair = ProbePair.parse(obj["pair"]) if obj.get("pair") else None
        return cls.from_covariance(obj["mean"], cov, ridge=float(obj["ridge_used"]), n=int(obj["n"]), pair=pair)


def _spd_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        factor = linalg.cho_factor(matrix, lower=True)
        inv = linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    except linalg.LinAlgError:
        inv = np.linalg.pinv(matrix, hermitian=True)
    return (inv + inv.T) / 2


def ridge_for(covariance: np.ndarray, abs_eps: float = RIDGE_ABS, rel_eps: float = RIDGE_REL) -> float:
    q = covariance.shape[0]
    return max(abs_eps, rel_eps * float(np.trace(covariance)) / q)


def fit_pair_model(
    training_vectors: Iterable[QuantileVector | np.ndarray],
    ridge_abs: float = RIDGE_ABS,
    ridge_rel: float = RIDGE_REL,
) -> PairModel:
    """Fit mean and unbiased covariance over ``n >= 2`` training vectors.

    The ridge ``max(ridge_abs, ridge_rel * trace(cov) / q)`` is always added
    before inversion; pass zeros to disable it.

    Raises:
        NotEnoughData: fewer than two vectors.
        ValueError: vectors disagree on pair or length.
    """
    vectors = list(training_vectors)
    if len(vectors) < 2:
        raise NotEnoughData(f"need at least 2 training vectors, got {len(vectors)}")
    pairs = {v.pair for v in vectors if isinstance(v, QuantileVector)}
    if len(pairs) > 1:
        raise ValueError(f"training vectors mix probe pairs: {sorted(map(str, pairs))}")
    matrix = np.vstack([v.values if isinstance(v, QuantileVector) else np.asarray(v, dtype=np.float64) for v in vectors])
    return fit_from_matrix(matrix, pair=pairs.pop() if pairs else None, ridge_abs=ridge_abs, ridge_rel=ridge_rel)


def fit_from_matrix(
    matrix: np.ndarray,
    pair: ProbePair | None = None,
    ridge_abs: float = RIDGE_ABS,
    ridge_rel: float = RIDGE_REL,
) -> PairModel:
    """Fit a model from an ``n x q`` training matrix (one row per batch)."""
    n = matrix.shape[0]
    if n < 2:
        raise NotEnoughData(f"need at least 2 training vectors, got {n}")
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    cov = centered.T @ centered / (n - 1)
    ridge = ridge_for(cov, ridge_abs, ridge_rel) if (ridge_abs or ridge_rel) else 0.0
    return PairModel.from_covariance(mean, cov, ridge=ridge, n=n, pair=pair)


def mahalanobis_sq(x: QuantileVector | np.ndarray, model: PairModel) -> float:
    """Squared Mahalanobis distance ``(x - mean)^T precision (x - mean)``."""
    values = x.values if isinstance(x, QuantileVector) else np.asarray(x, dtype=np.float64)
    if values.shape != model.mean.shape:
        raise ValueError(f"vector of length {values.size} does not match model q={model.q}")
    diff = values - model.mean
    return max(float(diff @ model.precision @ diff), 0.0)


def mahalanobis_sq_rows(matrix: np.ndarray, model: PairModel) -> np.ndarray:
    """Row-wise squared distances for an ``m x q`` matrix."""
    diff = np.atleast_2d(matrix) - model.mean
    return np.maximum(np.einsum("ij,jk,ik->i", diff, model.precision, diff), 0.0)


def chi2_sf(d2, q: int):
    """Upper tail probability of a chi-square variable with ``q`` degrees of freedom.

    Evaluated as the regularised upper incomplete gamma ``Q(q/2, d2/2)``.
    Accepts scalars or arrays; very large ``d2`` underflows to exactly 0.
    """
    if q < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {q}")
    arr = np.asarray(d2, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("d2 must be non-negative")
    p = np.clip(special.gammaincc(q / 2.0, arr / 2.0), 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def pair_pvalue(deltas, model: PairModel) -> float:
    """p-value of one batch's deltas under a fitted pair model."""
    x = quantile_vector(deltas, model.q)
    return chi2_sf(mahalanobis_sq(x, model), model.q)


def save_models(models: dict[ProbePair, PairModel], path: str | os.PathLike, **meta) -> None:
    doc = dict(meta)
    doc["pairs"] = [m.to_json() for _, m in sorted(models.items())]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_models(path: str | os.PathLike) -> tuple[dict[ProbePair, PairModel], dict]:
    doc = json.loads(Path(path).read_text())
    models = {}
    for obj in doc.pop("pairs"):
        model = PairModel.from_json(obj)
        models[model.pair] = model
    return models, doc
