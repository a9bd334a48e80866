"""Pseudo coverage and online reweighting of the conformal calibration mass."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

logger = logging.getLogger(__name__)

W_MIN = 1e-6
W_MAX = 1e6
# keeps the accumulator finite on very long streams
T_MIN = 1e-300
T_MAX = 1e300
LOG_T_MIN = math.log(T_MIN)
LOG_T_MAX = math.log(T_MAX)

StrategyKind = Literal["adaptive", "uniform", "geometric_decay"]


class WeightingInputError(ValueError):
    pass


@dataclass(frozen=True)
class WeightState:
    """Calibration weight ``w`` and its multiplicative accumulator ``t_acc``.

    ``history`` holds ``(step, pseudo_coverage, w, t_acc)`` tuples, one per
    update, and is shared structurally between successive states.
    ``log_t`` is the running log of the accumulator; summing in log space
    keeps rounding error from compounding over long streams.
    """

    alpha: float
    w: float = 1.0
    t_acc: float = 1.0
    step: int = 0
    history: tuple = field(default_factory=tuple)
    log_t: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise WeightingInputError("alpha must be in (0, 1)")
        if not (self.w > 0 and self.t_acc > 0):
            raise WeightingInputError("w and t_acc must be positive")
        if self.log_t is None:
            object.__setattr__(self, "log_t", math.log(self.t_acc))


@dataclass(frozen=True)
class WeightingStrategy:
    kind: StrategyKind = "adaptive"
    rho: float = 0.9

    def __post_init__(self):
        if self.kind not in ("adaptive", "uniform", "geometric_decay"):
            raise WeightingInputError(f"unknown weighting strategy {self.kind!r}")
        if self.kind == "geometric_decay" and not 0.0 < self.rho < 1.0:
            raise WeightingInputError("rho must be in (0, 1) for geometric decay")


def pseudo_coverage(predicted_labels: Sequence[int], prediction_sets: Sequence) -> float:
    """Fraction of positions whose predicted label lies in its prediction set.

    ``prediction_sets`` may be a sequence of label sets or an (n, L) boolean
    membership matrix.
    """
    labels = np.asarray(predicted_labels, dtype=int)
    if labels.size == 0:
        raise WeightingInputError("empty batch")
    if isinstance(prediction_sets, np.ndarray) and prediction_sets.ndim == 2:
        if prediction_sets.shape[0] != labels.size:
            raise WeightingInputError("labels and prediction sets differ in length")
        return float(prediction_sets[np.arange(labels.size), labels].mean())
    if len(prediction_sets) != labels.size:
        raise WeightingInputError("labels and prediction sets differ in length")
    hits = sum(int(y) in s for y, s in zip(labels, prediction_sets))
    return hits / labels.size


def update_weight(state: WeightState, pc_prev: float) -> WeightState:
    """One exponential step: ``t_acc *= exp((1 - alpha) - pc)``, ``w /= t_acc``.

    Under-coverage (pc below 1 - alpha) grows the accumulator and shrinks the
    weight, pushing mass onto the test point and widening the sets.
    """
    if not 0.0 <= pc_prev <= 1.0 or math.isnan(pc_prev):
        raise WeightingInputError(f"pseudo coverage must be in [0, 1], got {pc_prev}")
    log_t = state.log_t + ((1.0 - state.alpha) - pc_prev)
    if not LOG_T_MIN <= log_t <= LOG_T_MAX:
        logger.info("accumulator exp(%.3g) clamped at step %d", log_t, state.step + 1)
        log_t = min(max(log_t, LOG_T_MIN), LOG_T_MAX)
    t_acc = math.exp(log_t)
    w = state.w / t_acc
    if not W_MIN <= w <= W_MAX:
        clamped = min(max(w, W_MIN), W_MAX)
        logger.info("calibration weight %.3g clamped to %.3g at step %d", w, clamped, state.step + 1)
        w = clamped
        # back-calculate the accumulator so w * t_acc == w_prev still holds and it cannot wind up
        t_acc = state.w / w
        log_t = math.log(t_acc)
    step = state.step + 1
    return replace(state, w=w, t_acc=t_acc, log_t=log_t, step=step, history=state.history + ((step, pc_prev, w, t_acc),))


def calibration_weight(strategy: WeightingStrategy, state: WeightState | None, n: int):
    """Weight argument for :func:`cpatta.conformal.weighted_threshold`.

    Geometric decay returns the vector ``rho ** (n + 1 - i)`` for ``i = 1..n``,
    so the last calibration point weighs the most.
    """
    if n < 1:
        raise WeightingInputError("n must be >= 1")
    if strategy.kind == "uniform":
        return 1.0
    if strategy.kind == "adaptive":
        if state is None:
            raise WeightingInputError("adaptive weighting needs a WeightState")
        return state.w
    i = np.arange(1, n + 1)
    return strategy.rho ** (n + 1 - i)
