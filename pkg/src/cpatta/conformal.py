"""Split conformal prediction with a weighted calibration quantile.

Scores are ``1 - p(label)``. Calibration points share a scalar weight ``w``
(or carry a per-point weight vector) and the test point carries weight 1.
When the requested quantile falls on the test point's mass the threshold is
the +inf sentinel, meaning "predict the full label space".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

SIMPLEX_TOL = 1e-9
# relative slack for cumulative-mass comparisons; masses are sums of floats
_MASS_TOL = 1e-12

ModelTag = Literal["pretrained", "realtime"]
WeightSpec = Union[float, np.ndarray]


class ConformalInputError(ValueError):
    """Raised for invalid inputs to conformal operations."""


@dataclass(frozen=True)
class NonconformityScores:
    values: np.ndarray
    model_tag: ModelTag = "pretrained"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ConformalInputError("nonconformity scores must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Threshold:
    tau: float
    alpha: float
    weight_used: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConformalInputError(f"alpha must be in (0, 1), got {self.alpha}")

    @property
    def is_sentinel(self) -> bool:
        return math.isinf(self.tau)


@dataclass(frozen=True)
class SmoothedScoreConfig:
    temperature: float = 0.1
    k: int = 1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConformalInputError("temperature must be positive")
        if self.k < 1:
            raise ConformalInputError("k must be >= 1")


def _check_simplex(probabilities) -> np.ndarray:
    p = np.asarray(probabilities, dtype=float)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ConformalInputError("probability vector is empty")
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ConformalInputError("probabilities must form a simplex vector (sum to 1)")
    return p


def nonconformity(probabilities, label: int) -> float:
    p = _check_simplex(probabilities)
    if p.ndim != 1:
        raise ConformalInputError("expected a single probability vector")
    if not 0 <= label < p.size:
        raise ConformalInputError(f"label {label} out of range for {p.size} classes")
    return float(min(max(1.0 - p[label], 0.0), 1.0))


def nonconformity_batch(probabilities: np.ndarray, labels) -> np.ndarray:
    """Vectorised ``1 - p[i, labels[i]]`` over the rows of ``probabilities``."""
    p = _check_simplex(probabilities)
    labels = np.asarray(labels, dtype=int)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise ConformalInputError("expected (n, L) probabilities and n labels")
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise ConformalInputError("label out of range")
    return np.clip(1.0 - p[np.arange(p.shape[0]), labels], 0.0, 1.0)


def weighted_threshold(
    scores: Union[NonconformityScores, Sequence[float], np.ndarray],
    weight: WeightSpec,
    alpha: float,
) -> Threshold:
    """Weighted (1 - alpha) quantile of calibration scores plus a test point at +inf.

    ``weight`` is either a positive scalar shared by every calibration point or
    a positive vector aligned with ``scores``. Calibration point ``i`` gets mass
    ``w_i / (sum(w) + 1)`` and the test point gets ``1 / (sum(w) + 1)``.
    """
    values = scores.values if isinstance(scores, NonconformityScores) else np.asarray(scores, dtype=float).ravel()
    if values.size == 0:
        raise ConformalInputError("calibration score list is empty")
    if not 0.0 < alpha < 1.0:
        raise ConformalInputError(f"alpha must be in (0, 1), got {alpha}")

    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        if not (w > 0 and np.isfinite(w)):
            raise ConformalInputError("weight must be a positive finite number")
        weights = np.full(values.size, float(w))
        weight_used = float(w)
    else:
        if w.shape != values.shape:
            raise ConformalInputError("weight vector must align with the scores")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ConformalInputError("weights must be positive and finite")
        weights = w
        weight_used = float(w.sum())

    order = np.argsort(values, kind="stable")
    sorted_scores = values[order]
    total = weights.sum() + 1.0
    cum = np.cumsum(weights[order]) / total
    target = 1.0 - alpha
    reached = np.flatnonzero(cum >= target * (1.0 - _MASS_TOL))
    if reached.size == 0:
        return Threshold(math.inf, alpha, weight_used)
    # ties: the mass of every equal score counts once the value is reached
    return Threshold(float(sorted_scores[reached[0]]), alpha, weight_used)


def prediction_set(probabilities, tau: Threshold | float) -> set[int]:
    p = _check_simplex(probabilities)
    t = tau.tau if isinstance(tau, Threshold) else float(tau)
    if math.isinf(t):
        return set(range(p.size))
    return {int(y) for y in np.flatnonzero(1.0 - p <= t)}


def prediction_set_mask(probabilities: np.ndarray, tau: Threshold | float) -> np.ndarray:
    """Boolean (n, L) membership matrix for a batch of probability rows."""
    p = np.asarray(probabilities, dtype=float)
    t = tau.tau if isinstance(tau, Threshold) else float(tau)
    if math.isinf(t):
        return np.ones(p.shape, dtype=bool)
    return 1.0 - p <= t


def soft_score(nonconformity: float, tau: float, temperature: float):
    """Sigmoid of ``(tau - S) / T``; the +inf sentinel maps to 1."""
    if not temperature > 0:
        raise ConformalInputError("temperature must be positive")
    if np.isscalar(tau) and math.isinf(tau):
        return np.ones_like(nonconformity, dtype=float) if np.ndim(nonconformity) else 1.0
    z = (tau - np.asarray(nonconformity, dtype=float)) / temperature
    # numerically stable logistic
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return float(out) if out.ndim == 0 else out


def cert_topk_batch(probabilities: np.ndarray, tau: Threshold | float, cfg: SmoothedScoreConfig) -> np.ndarray:
    """Top-K certainty for each row of an (n, L) probability matrix."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=float))
    n_labels = p.shape[1]
    if not 1 <= cfg.k <= n_labels:
        raise ConformalInputError(f"k={cfg.k} out of range for {n_labels} labels")
    t = tau.tau if isinstance(tau, Threshold) else float(tau)
    if math.isinf(t):
        return np.ones(p.shape[0])
    soft = soft_score(1.0 - p, t, cfg.temperature)
    # descending sort; a stable sort on the negation keeps ascending label order among ties
    ranked = -np.sort(-soft, axis=1, kind="stable")
    return ranked[:, : cfg.k].mean(axis=1)


def cert_topk(probabilities, tau: Threshold | float, cfg: SmoothedScoreConfig) -> float:
    p = _check_simplex(probabilities)
    if p.ndim != 1:
        raise ConformalInputError("expected a single probability vector")
    return float(cert_topk_batch(p[None, :], tau, cfg)[0])
