"""Annotation allocation, shift detection and buffer bookkeeping."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .classifier import ClassifierParams, LabeledExample, predict
from .conformal import SmoothedScoreConfig, Threshold, cert_topk_batch
from .stream import Batch, Oracle


class SelectionError(ValueError):
    pass


class BudgetOverflowError(RuntimeError):
    """Raised when more human labels are requested than the budget allows."""


@dataclass(frozen=True)
class SelectionConfig:
    n_human: int = 3
    n_human_shift: int = 6
    n_model: int = 3
    budget_total: int = 300
    k: int = 1

    def __post_init__(self):
        if self.n_human < 1:
            raise SelectionError("n_human must be positive")
        if self.n_human_shift < self.n_human:
            raise SelectionError("n_human_shift must be >= n_human")
        if self.n_model < 0:
            raise SelectionError("n_model must be nonnegative")
        if self.budget_total < 0:
            raise SelectionError("budget_total must be nonnegative")
        if self.k < 1:
            raise SelectionError("k must be positive")


@dataclass(frozen=True)
class ShiftDetectorState:
    decay: float = 0.9
    z_threshold: float = 3.0
    ema_mean: float = 0.0
    ema_var: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise SelectionError("decay must be in (0, 1)")
        if not self.z_threshold > 0:
            raise SelectionError("z_threshold must be positive")
        if self.ema_var < 0:
            raise SelectionError("ema_var must be nonnegative")


def detect_shift(state: ShiftDetectorState, batch_scores) -> tuple[bool, ShiftDetectorState]:
    """EMA z-test on the batch-mean nonconformity of the pretrained model.

    The first batch seeds the mean with its own mean and the variance with
    the standard error of that mean, and never flags.
    """
    s = np.asarray(batch_scores, dtype=float)
    if s.size == 0:
        raise SelectionError("empty batch")
    m = float(s.mean())
    if not state.initialized:
        var0 = float(s.var()) / s.size
        return False, replace(state, ema_mean=m, ema_var=var0, initialized=True)
    diff = m - state.ema_mean
    flag = abs(diff) > state.z_threshold * math.sqrt(state.ema_var + 1e-8)
    a = 1.0 - state.decay
    mean = state.ema_mean + a * diff
    var = state.decay * (state.ema_var + a * diff * diff)
    return flag, replace(state, ema_mean=mean, ema_var=var)


def _lowest(values: np.ndarray, count: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``count`` smallest values, ties by ascending position."""
    idx = np.arange(values.size)
    if exclude is not None and exclude.size:
        idx = np.setdiff1d(idx, exclude)
    order = idx[np.lexsort((idx, values[idx]))]
    return order[:count]


def effective_human_count(cfg: SelectionConfig, shift: bool, budget_remaining: int, batch_size: int) -> int:
    return max(0, min(cfg.n_human_shift if shift else cfg.n_human, budget_remaining, batch_size))


def allocate_from_certainty(
    cert_rt: np.ndarray,
    cert_pre: np.ndarray,
    cfg: SelectionConfig,
    shift: bool,
    budget_remaining: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Least-certain (real-time) go to humans; most-certain (pretrained) get pseudo-labels.

    Returns batch positions, not sample ids.
    """
    cert_rt = np.asarray(cert_rt, dtype=float)
    cert_pre = np.asarray(cert_pre, dtype=float)
    n_h = effective_human_count(cfg, shift, budget_remaining, cert_rt.size)
    human = _lowest(cert_rt, n_h)
    model = _lowest(-cert_pre, cfg.n_model, exclude=human)
    return human, model


def allocate(
    probs_rt: np.ndarray,
    probs_pre: np.ndarray,
    tau_rt: Threshold,
    tau_pre: Threshold,
    cfg: SelectionConfig,
    shift: bool,
    budget_remaining: int,
    temperature: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    score_cfg = SmoothedScoreConfig(temperature=temperature, k=cfg.k)
    cert_rt = cert_topk_batch(probs_rt, tau_rt, score_cfg)
    cert_pre = cert_topk_batch(probs_pre, tau_pre, score_cfg)
    return allocate_from_certainty(cert_rt, cert_pre, cfg, shift, budget_remaining)


def allocate_random(
    batch_size: int,
    cfg: SelectionConfig,
    shift: bool,
    budget_remaining: int,
    rng: np.random.Generator,
    n_model: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws without replacement; humans first, then pseudo-labels from the rest."""
    n_h = effective_human_count(cfg, shift, budget_remaining, batch_size)
    perm = rng.permutation(batch_size)
    human = np.sort(perm[:n_h])
    model = np.sort(perm[n_h : n_h + n_model])
    return human, model


@dataclass
class AnnotationBuffers:
    """FIFO training buffers plus a complete annotation log.

    ``buf_h`` and ``buf_m`` feed the parameter update and evict their oldest
    entries at capacity. ``log_h`` and ``log_m`` keep every annotation ever
    made and back the efficiency metrics.
    """

    capacity: int = 512
    budget_total: int = 300
    budget_used: int = 0
    buf_h: deque = field(default_factory=deque)
    buf_m: deque = field(default_factory=deque)
    log_h: list = field(default_factory=list)
    log_m: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise SelectionError("capacity must be positive")
        self.buf_h = deque(self.buf_h, maxlen=self.capacity)
        self.buf_m = deque(self.buf_m, maxlen=self.capacity)

    @property
    def budget_remaining(self) -> int:
        return self.budget_total - self.budget_used

    def arrays(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        buf = self.buf_h if which == "human" else self.buf_m
        if not buf:
            return np.zeros((0, 0)), np.zeros(0, dtype=int)
        return np.stack([e.features for e in buf]), np.array([e.label for e in buf], dtype=int)


def annotate(
    batch: Batch,
    human_pos,
    model_pos,
    oracle: Oracle,
    pretrained: ClassifierParams,
    buffers: AnnotationBuffers,
    realtime_predictions=None,
) -> AnnotationBuffers:
    """Label the selected batch positions and append them to the buffers.

    Humans answer through ``oracle.query``; pseudo-labels are the pretrained
    model's argmax. ``realtime_predictions`` (the predictions made at batch
    arrival) are stored on each entry for the efficiency metrics.
    """
    human_pos = np.asarray(human_pos, dtype=int)
    model_pos = np.asarray(model_pos, dtype=int)
    if np.intersect1d(human_pos, model_pos).size:
        raise SelectionError("human and model selections overlap")
    n = len(batch)
    for pos in (human_pos, model_pos):
        if pos.size and (pos.min() < 0 or pos.max() >= n):
            raise SelectionError("selection outside the batch")
    if buffers.budget_used + human_pos.size > buffers.budget_total:
        raise BudgetOverflowError(
            f"requested {human_pos.size} labels with {buffers.budget_remaining} budget remaining"
        )
    rt_pred = np.full(n, -1) if realtime_predictions is None else np.asarray(realtime_predictions)

    if human_pos.size:
        labels = oracle.query(batch.sample_ids[human_pos])
        buffers.budget_used += human_pos.size
        for pos, y in zip(human_pos.tolist(), labels.tolist()):
            ex = LabeledExample(batch.features[pos], y, "human", batch.domain_id, int(batch.sample_ids[pos]), int(rt_pred[pos]))
            buffers.buf_h.append(ex)
            buffers.log_h.append(ex)
    if model_pos.size:
        pseudo = np.atleast_1d(predict(pretrained, batch.features[model_pos]))
        for pos, y in zip(model_pos.tolist(), pseudo.tolist()):
            ex = LabeledExample(batch.features[pos], int(y), "model", batch.domain_id, int(batch.sample_ids[pos]), int(rt_pred[pos]))
            buffers.buf_m.append(ex)
            buffers.log_m.append(ex)
    return buffers
