"""The adaptation loop, its metrics and result files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import classifier as clf
from .config import ConfigError, RunConfig
from .conformal import SmoothedScoreConfig, Threshold, cert_topk_batch, nonconformity_batch, prediction_set_mask, weighted_threshold
from .selection import (
    AnnotationBuffers,
    SelectionConfig,
    ShiftDetectorState,
    allocate_from_certainty,
    allocate_random,
    annotate,
    detect_shift,
)
from .stream import (
    Batch,
    DomainSpec,
    FeatureFileSpec,
    Oracle,
    SourceTask,
    Split,
    StreamError,
    StreamSchedule,
    SyntheticStream,
    default_schedule,
    generate_source,
    load_feature_file,
)
from .weighting import WeightingStrategy, WeightState, calibration_weight, pseudo_coverage, update_weight

logger = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


@dataclass
class BatchRecord:
    batch_index: int
    domain_id: int
    realtime_correct_count: int
    batch_size: int
    tau_rt: float
    tau_pre: float
    pc_rt: float
    pc_pre: float
    w_rt: float
    w_pre: float
    shift_flag: bool
    n_human_used: int
    n_model_used: int
    true_coverage_rt: float
    true_coverage_pre: float
    human_ids: list = field(default_factory=list)
    model_ids: list = field(default_factory=list)


RECORD_FIELDS = [f.name for f in dataclasses.fields(BatchRecord)]


@dataclass
class RunSummary:
    seed: int
    realtime_accuracy: float
    realtime_accuracy_per_domain: dict
    post_adaptation_accuracy: float
    post_adaptation_accuracy_per_domain: dict
    coverage_gap_rt: float
    coverage_gap_pre: float
    eff_h: float | None
    eff_m: float | None
    budget_used: int
    budget_total: int
    pretrained_source_accuracy: float
    num_batches: int


# ---- metrics ---------------------------------------------------------------


def efficiency(buffers: AnnotationBuffers, oracle: Oracle) -> tuple[float | None, float | None]:
    """Share of human labels the model had wrong, and of pseudo-labels that are right.

    Uses the full annotation log, so FIFO eviction does not affect the result.
    ``None`` marks an empty log.
    """
    eff_h = eff_m = None
    if buffers.log_h:
        truth = np.array([e.label for e in buffers.log_h])
        pred = np.array([e.predicted_at_selection for e in buffers.log_h])
        eff_h = float(np.mean(pred != truth))
    if buffers.log_m:
        truth = oracle.reveal_for_evaluation([e.sample_id for e in buffers.log_m])
        pseudo = np.array([e.label for e in buffers.log_m])
        eff_m = float(np.mean(pseudo == truth))
    return eff_h, eff_m


def format_efficiency(value: float | None) -> str:
    return "N/A" if value is None else f"{100 * value:.2f}"


def coverage_gap(records: Sequence[BatchRecord], alpha: float) -> tuple[float, float]:
    """Mean absolute deviation of per-batch true coverage from ``1 - alpha`` (rt, pre)."""
    if not records:
        raise RunError("coverage_gap needs at least one record")
    target = 1.0 - alpha
    rt = np.mean([abs(r.true_coverage_rt - target) for r in records])
    pre = np.mean([abs(r.true_coverage_pre - target) for r in records])
    return float(rt), float(pre)


# ---- setup -----------------------------------------------------------------


@dataclass
class Environment:
    """Everything the loop needs that is fixed before the first batch."""

    train: Split
    calibration: Split
    source_eval: Split
    batches: Iterable[Batch]
    eval_splits: dict
    oracle: Oracle
    num_classes: int
    feature_dim: int


def build_schedule(cfg: RunConfig, seed: int) -> StreamSchedule:
    if not cfg.domains:
        return default_schedule(cfg.feature_dim, cfg.num_domains, cfg.batches_per_domain, cfg.batch_size, seed, cfg.class_cov_scale)
    direction = np.random.default_rng([seed, 0x7A45]).normal(size=cfg.feature_dim)
    direction /= np.linalg.norm(direction)
    entries = []
    for k, raw in enumerate(cfg.domains):
        try:
            dc = raw if isinstance(raw, dict) else dataclasses.asdict(raw)
            nb = int(dc.get("num_batches", cfg.batches_per_domain))
            t = dc.get("translation", 0.0)
            t = np.asarray(t, dtype=float) if isinstance(t, (list, tuple)) else float(t) * direction
            spec = DomainSpec(
                domain_id=int(dc.get("domain_id", k)),
                rotation=float(dc.get("rotation", 0.0)),
                translation=tuple(t.tolist()),
                noise_scale=float(dc.get("noise_scale", cfg.class_cov_scale)),
                label_flip_prob=float(dc.get("label_flip_prob", 0.0)),
            )
        except (TypeError, ValueError, StreamError) as exc:
            raise ConfigError(f"domains[{k}]: {exc}") from exc
        entries.append((spec, nb))
    return StreamSchedule(tuple(entries), batch_size=cfg.batch_size, seed=seed)


def build_environment(cfg: RunConfig, seed: int) -> Environment:
    if cfg.stream == "file":
        spec = FeatureFileSpec(source_domain=cfg.source_domain, calibration_per_class=cfg.calibration_per_class, eval_fraction=cfg.eval_fraction, seed=seed)
        data = load_feature_file(cfg.features, spec)
        return Environment(
            data.train, data.calibration, data.source_eval, data.batches(cfg.batch_size),
            data.eval_splits, data.oracle, data.num_classes, data.feature_dim,
        )
    task = SourceTask(
        num_classes=cfg.num_classes,
        feature_dim=cfg.feature_dim,
        radius=cfg.radius,
        class_cov_scale=cfg.class_cov_scale,
        train_per_class=cfg.train_per_class,
        calibration_per_class=cfg.calibration_per_class,
        eval_per_class=max(1, cfg.eval_per_domain // cfg.num_classes),
    )
    train, cal, src_eval = generate_source(task, seed)
    stream = SyntheticStream(build_schedule(cfg, seed), task)
    return Environment(train, cal, src_eval, stream, stream.eval_splits(cfg.eval_per_domain), stream.oracle, cfg.num_classes, cfg.feature_dim)


def pretrain(cfg: RunConfig, env: Environment, rng: np.random.Generator) -> clf.ClassifierParams:
    init = clf.init_params(cfg.architecture, env.feature_dim, env.num_classes, cfg.hidden_dim, rng)
    return clf.fit(init, env.train.features, env.train.labels, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.pretrain_tol)


# ---- the loop --------------------------------------------------------------


def _accuracy(params: clf.ClassifierParams, split: Split) -> float:
    if len(split) == 0:
        return float("nan")
    return float(np.mean(clf.predict(params, split.features) == split.labels))


def run(cfg: RunConfig, seed: int | None = None) -> tuple[list[BatchRecord], RunSummary]:
    """Run one seed end to end and return the per-batch records and the summary."""
    cfg.validate()
    seed = cfg.seeds()[0] if seed is None else int(seed)
    ss = np.random.SeedSequence(seed)
    init_rng, select_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    env = build_environment(cfg, seed)
    if cfg.k > env.num_classes:
        raise ConfigError(f"k={cfg.k} exceeds the number of classes ({env.num_classes})")
    phi = pretrain(cfg, env, init_rng)
    theta = phi

    sel_cfg = SelectionConfig(cfg.n_human, cfg.resolved_n_human_shift(), cfg.resolved_n_model(), cfg.budget, cfg.k)
    score_cfg = SmoothedScoreConfig(cfg.temperature, cfg.k)
    strategy = WeightingStrategy({"geometric": "geometric_decay"}.get(cfg.weighting, cfg.weighting), cfg.rho)
    ws_rt = ws_pre = WeightState(cfg.alpha)
    detector = ShiftDetectorState(decay=cfg.shift_decay, z_threshold=cfg.shift_z)
    buffers = AnnotationBuffers(capacity=cfg.buffer_capacity, budget_total=cfg.budget)

    X_cal, y_cal = env.calibration.features, env.calibration.labels
    n_cal = len(y_cal)
    cal_pre = nonconformity_batch(clf.forward(phi, X_cal), y_cal)
    static_weight = None if strategy.kind == "adaptive" else calibration_weight(strategy, None, n_cal)

    records: list[BatchRecord] = []
    rt_correct: dict[int, list[int]] = {}
    for batch in env.batches:
        try:
            X = batch.features
            # (1) real-time predictions, before any update on this batch
            probs_rt = clf.forward(theta, X)
            pred_rt = probs_rt.argmax(axis=1)
            probs_pre = clf.forward(phi, X)

            # (2) shift detection on pretrained nonconformity of the predicted label
            shift, detector = detect_shift(detector, 1.0 - probs_pre.max(axis=1))
            if shift and cfg.reset_weights_on_shift and strategy.kind == "adaptive":
                ws_rt = ws_pre = WeightState(cfg.alpha)

            # (3) thresholds; real-time calibration scores follow the current parameters
            cal_rt = nonconformity_batch(clf.forward(theta, X_cal), y_cal)
            w_rt = calibration_weight(strategy, ws_rt, n_cal) if static_weight is None else static_weight
            w_pre = calibration_weight(strategy, ws_pre, n_cal) if static_weight is None else static_weight
            tau_rt = weighted_threshold(cal_rt, w_rt, cfg.alpha)
            tau_pre = weighted_threshold(cal_pre, w_pre, cfg.alpha)

            # (4) allocation
            if cfg.selection == "cp":
                cert_rt = cert_topk_batch(probs_rt, tau_rt, score_cfg)
                cert_pre = cert_topk_batch(probs_pre, tau_pre, score_cfg)
                human, model = allocate_from_certainty(cert_rt, cert_pre, sel_cfg, shift, buffers.budget_remaining)
            else:
                human, model = allocate_random(len(batch), sel_cfg, shift, buffers.budget_remaining, select_rng, sel_cfg.n_model)

            # (5) annotation
            annotate(batch, human, model, env.oracle, phi, buffers, pred_rt)

            # (6) pseudo coverage and weight update
            set_rt = prediction_set_mask(probs_rt, tau_rt)
            set_pre = prediction_set_mask(probs_pre, tau_pre)
            pc_rt = pseudo_coverage(pred_rt, set_rt)
            pc_pre = pseudo_coverage(pred_rt, set_pre)
            if strategy.kind == "adaptive":
                ws_rt = update_weight(ws_rt, pc_rt)
                ws_pre = update_weight(ws_pre, pc_pre)

            # (7) staged parameter update
            if buffers.buf_h or buffers.buf_m:
                Xh, yh = buffers.arrays("human")
                Xm, ym = buffers.arrays("model")
                if yh.size:
                    theta = clf.descend(theta, Xh, yh, cfg.eta_h, cfg.steps_h)
                if ym.size:
                    theta = clf.descend(theta, Xm, ym, cfg.eta_m, cfg.steps_m)

            # (8) telemetry; ground truth used for evaluation only
            truth = env.oracle.reveal_for_evaluation(batch.sample_ids)
            rows = np.arange(len(batch))
            correct = int(np.sum(pred_rt == truth))
            rt_correct.setdefault(batch.domain_id, [0, 0])
            rt_correct[batch.domain_id][0] += correct
            rt_correct[batch.domain_id][1] += len(batch)
            records.append(
                BatchRecord(
                    batch_index=batch.index,
                    domain_id=batch.domain_id,
                    realtime_correct_count=correct,
                    batch_size=len(batch),
                    tau_rt=tau_rt.tau,
                    tau_pre=tau_pre.tau,
                    pc_rt=pc_rt,
                    pc_pre=pc_pre,
                    w_rt=tau_rt.weight_used,
                    w_pre=tau_pre.weight_used,
                    shift_flag=bool(shift),
                    n_human_used=int(human.size),
                    n_model_used=int(model.size),
                    true_coverage_rt=float(set_rt[rows, truth].mean()),
                    true_coverage_pre=float(set_pre[rows, truth].mean()),
                    human_ids=[int(i) for i in batch.sample_ids[human]],
                    model_ids=[int(i) for i in batch.sample_ids[model]],
                )
            )
        except (StreamError, ValueError) as exc:
            raise RunError(f"batch {batch.index}: {exc}") from exc

    if not records:
        raise RunError("the stream produced no batches")

    post = {dom: _accuracy(theta, split) for dom, split in sorted(env.eval_splits.items()) if len(split)}
    n_post = sum(len(env.eval_splits[d]) for d in post)
    post_overall = sum(post[d] * len(env.eval_splits[d]) for d in post) / n_post if n_post else float("nan")
    gap_rt, gap_pre = coverage_gap(records, cfg.alpha)
    eff_h, eff_m = efficiency(buffers, env.oracle)
    total_correct = sum(c for c, _ in rt_correct.values())
    total = sum(n for _, n in rt_correct.values())
    summary = RunSummary(
        seed=seed,
        realtime_accuracy=total_correct / total,
        realtime_accuracy_per_domain={d: c / n for d, (c, n) in sorted(rt_correct.items())},
        post_adaptation_accuracy=post_overall,
        post_adaptation_accuracy_per_domain=post,
        coverage_gap_rt=gap_rt,
        coverage_gap_pre=gap_pre,
        eff_h=eff_h,
        eff_m=eff_m,
        budget_used=buffers.budget_used,
        budget_total=cfg.budget,
        pretrained_source_accuracy=_accuracy(phi, env.source_eval),
        num_batches=len(records),
    )
    return records, summary


def run_all(cfg: RunConfig) -> list[tuple[list[BatchRecord], RunSummary]]:
    """One independent run per configured seed."""
    return [run(cfg, s) for s in cfg.seeds()]


# ---- emission --------------------------------------------------------------


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return None  # +inf threshold sentinel
    return v


def record_to_json(rec: BatchRecord) -> str:
    return json.dumps({k: _json_value(v) for k, v in dataclasses.asdict(rec).items()}, separators=(",", ":"))


def record_from_dict(d: dict) -> BatchRecord:
    d = dict(d)
    for key in ("tau_rt", "tau_pre"):
        d[key] = math.inf if d[key] is None else float(d[key])
    return BatchRecord(**d)


def _csv_row(rec: BatchRecord) -> list:
    row = []
    for name in RECORD_FIELDS:
        v = getattr(rec, name)
        if isinstance(v, list):
            v = " ".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = int(v)
        elif isinstance(v, float):
            v = repr(v)
        row.append(v)
    return row


def _from_csv_row(row: dict) -> BatchRecord:
    ints = {"batch_index", "domain_id", "realtime_correct_count", "batch_size", "n_human_used", "n_model_used"}
    out = {}
    for name in RECORD_FIELDS:
        v = row[name]
        if name in ints:
            out[name] = int(v)
        elif name == "shift_flag":
            out[name] = bool(int(v))
        elif name in ("human_ids", "model_ids"):
            out[name] = [int(i) for i in v.split()]
        else:
            out[name] = float(v)
    return BatchRecord(**out)


def emit(records: Sequence[BatchRecord], summary: RunSummary, path, format: str = "jsonl") -> tuple[Path, Path]:
    """Write ``records.<format>`` and ``summary.json`` into directory ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rec_path = out / f"records.{format}"
        if format == "jsonl":
            rec_path.write_text("".join(record_to_json(r) + "\n" for r in records), encoding="utf-8")
        elif format == "csv":
            with rec_path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(RECORD_FIELDS)
                writer.writerows(_csv_row(r) for r in records)
        else:
            raise ValueError(f"unknown format {format!r}")
        sum_path = out / "summary.json"
        sum_path.write_text(json.dumps(dataclasses.asdict(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise RunError(f"cannot write results to {out}: {exc.strerror or exc}") from exc
    return rec_path, sum_path


def read_records(path) -> list[BatchRecord]:
    path = Path(path)
    if path.suffix == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            return [_from_csv_row(row) for row in csv.DictReader(fh)]
    with path.open(encoding="utf-8") as fh:
        return [record_from_dict(json.loads(line)) for line in fh if line.strip()]


def read_summary(path) -> RunSummary:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("realtime_accuracy_per_domain", "post_adaptation_accuracy_per_domain"):
        data[key] = {int(k): v for k, v in data[key].items()}
    return RunSummary(**data)
