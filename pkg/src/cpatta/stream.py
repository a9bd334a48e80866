"""Synthetic domain-shift streams and the precomputed-feature ingestion path.

Labels never travel with a :class:`Batch`. They live in an :class:`Oracle`
keyed by sample id, which the adaptation loop may query only for the samples
it sends to a human; evaluation code reads them through
:meth:`Oracle.reveal_for_evaluation`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class StreamError(ValueError):
    pass


class EndOfStream(Exception):
    pass


class FeatureFileError(StreamError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    rotation: float = 0.0
    translation: tuple = ()
    noise_scale: float = 1.0
    label_flip_prob: float = 0.0

    def __post_init__(self):
        if not self.noise_scale > 0:
            raise StreamError("noise_scale must be positive")
        if not 0.0 <= self.label_flip_prob < 0.5:
            raise StreamError("label_flip_prob must be in [0, 0.5)")


@dataclass(frozen=True)
class StreamSchedule:
    entries: tuple  # ((DomainSpec, num_batches), ...)
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.entries:
            raise StreamError("schedule needs at least one entry")
        if self.batch_size < 1:
            raise StreamError("batch_size must be >= 1")
        if any(nb < 1 for _, nb in self.entries):
            raise StreamError("each schedule entry needs at least one batch")

    @property
    def num_batches(self) -> int:
        return sum(nb for _, nb in self.entries)


@dataclass(frozen=True)
class SourceTask:
    num_classes: int = 7
    feature_dim: int = 16
    radius: float = 3.0
    class_cov_scale: float = 1.0
    train_per_class: int = 200
    calibration_per_class: int = 50
    eval_per_class: int = 30
    class_means: np.ndarray | None = None

    def __post_init__(self):
        if self.num_classes < 2 or self.feature_dim < 2:
            raise StreamError("need at least 2 classes and 2 feature dimensions")
        if not self.class_cov_scale > 0 or not self.radius > 0:
            raise StreamError("radius and class_cov_scale must be positive")
        if min(self.train_per_class, self.calibration_per_class, self.eval_per_class) < 1:
            raise StreamError("per-class split sizes must be >= 1")
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=float)
            if means.shape != (self.num_classes, self.feature_dim):
                raise StreamError("class_means must have shape (num_classes, feature_dim)")
            object.__setattr__(self, "class_means", means)

    def means(self, seed: int) -> np.ndarray:
        """Class means on the radius-R sphere, fixed by ``seed`` unless given explicitly."""
        if self.class_means is not None:
            return self.class_means
        rng = np.random.default_rng([seed, 0xC1A55])
        raw = rng.normal(size=(self.num_classes, self.feature_dim))
        return self.radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass(frozen=True)
class Split:
    """Labeled features; used for the source splits and per-domain eval sets."""

    features: np.ndarray
    labels: np.ndarray
    domain_id: int = 0

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Batch:
    """Unlabeled test batch as seen by the adaptation loop."""

    index: int
    domain_id: int
    sample_ids: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)


class Oracle:
    """Ground-truth labels keyed by sample id.

    ``query`` is the human annotator and counts every call; ``reveal_for_evaluation``
    serves metrics and never counts toward the budget.
    """

    def __init__(self):
        self._labels: dict[int, int] = {}
        self.queries = 0

    def register(self, sample_ids, labels) -> None:
        for i, y in zip(np.asarray(sample_ids).tolist(), np.asarray(labels).tolist()):
            self._labels[int(i)] = int(y)

    def query(self, sample_ids) -> np.ndarray:
        ids = np.asarray(sample_ids, dtype=int)
        self.queries += ids.size
        return np.array([self._labels[int(i)] for i in ids], dtype=int)

    def reveal_for_evaluation(self, sample_ids) -> np.ndarray:
        return np.array([self._labels[int(i)] for i in np.asarray(sample_ids, dtype=int)], dtype=int)


def _rotate_first_two(X: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return X
    c, s = math.cos(angle), math.sin(angle)
    out = X.copy()
    out[:, 0] = c * X[:, 0] - s * X[:, 1]
    out[:, 1] = s * X[:, 0] + c * X[:, 1]
    return out


def _draw(means: np.ndarray, labels: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    return means[labels] + scale * rng.normal(size=(labels.size, means.shape[1]))


def generate_source(task: SourceTask, seed: int) -> tuple[Split, Split, Split]:
    """Train, calibration and eval splits from the source Gaussian mixture.

    Each split holds exactly its configured number of samples per class, in a
    seeded random order.
    """
    means = task.means(seed)
    rng = np.random.default_rng([seed, 0x50C])
    splits = []
    for per_class in (task.train_per_class, task.calibration_per_class, task.eval_per_class):
        labels = rng.permutation(np.repeat(np.arange(task.num_classes), per_class))
        splits.append(Split(_draw(means, labels, task.class_cov_scale, rng), labels, domain_id=-1))
    return tuple(splits)


def corrupt(
    means: np.ndarray,
    labels: np.ndarray,
    domain: DomainSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw features for ``labels`` under ``domain`` and apply label flips.

    Features are ``rotate(mean) + translation + noise_scale * N(0, I)``; the
    rotation acts on the first two coordinates only.
    """
    d = means.shape[1]
    shifted = _rotate_first_two(means, domain.rotation)
    if len(domain.translation):
        t = np.asarray(domain.translation, dtype=float)
        if t.shape != (d,):
            raise StreamError(f"domain {domain.domain_id}: translation must have length {d}")
        shifted = shifted + t
    X = _draw(shifted, labels, domain.noise_scale, rng)
    y = labels.copy()
    if domain.label_flip_prob > 0:
        flip = rng.random(y.size) < domain.label_flip_prob
        offset = rng.integers(1, means.shape[0], size=y.size)
        y = np.where(flip, (y + offset) % means.shape[0], y)
    return X, y


@dataclass
class StreamCursor:
    entry: int = 0
    batch_in_entry: int = 0
    batch_index: int = 0
    next_id: int = 0


@dataclass
class SyntheticStream:
    """Cursor-driven generator over a :class:`StreamSchedule`.

    Each batch draws balanced-at-random class labels and corrupts them with
    the active domain. The RNG is derived from ``(schedule.seed, batch_index)``
    so batches do not depend on how the stream was consumed.
    """

    schedule: StreamSchedule
    task: SourceTask
    oracle: Oracle = field(default_factory=Oracle)

    def __post_init__(self):
        self._means = self.task.means(self.schedule.seed)

    def next_batch(self, cursor: StreamCursor) -> tuple[Batch, StreamCursor]:
        if cursor.entry >= len(self.schedule.entries):
            raise EndOfStream
        domain, nb = self.schedule.entries[cursor.entry]
        rng = np.random.default_rng([self.schedule.seed, 0xB47C, cursor.batch_index])
        labels = rng.integers(0, self.task.num_classes, size=self.schedule.batch_size)
        X, y = corrupt(self._means, labels, domain, rng)
        ids = np.arange(cursor.next_id, cursor.next_id + labels.size)
        self.oracle.register(ids, y)
        batch = Batch(cursor.batch_index, domain.domain_id, ids, X)
        if cursor.batch_in_entry + 1 >= nb:
            nxt = StreamCursor(cursor.entry + 1, 0, cursor.batch_index + 1, ids[-1] + 1)
        else:
            nxt = StreamCursor(cursor.entry, cursor.batch_in_entry + 1, cursor.batch_index + 1, ids[-1] + 1)
        return batch, nxt

    def __iter__(self) -> Iterator[Batch]:
        cursor = StreamCursor()
        while True:
            try:
                batch, cursor = self.next_batch(cursor)
            except EndOfStream:
                return
            yield batch

    def eval_splits(self, per_domain: int = 200) -> dict[int, Split]:
        """Held-out labeled samples per domain, drawn from an RNG separate from the batches."""
        out = {}
        for domain, _ in self.schedule.entries:
            if domain.domain_id in out:
                continue
            rng = np.random.default_rng([self.schedule.seed, 0xE7A1, domain.domain_id])
            labels = rng.permutation(np.resize(np.arange(self.task.num_classes), per_domain))
            X, y = corrupt(self._means, labels, domain, rng)
            out[domain.domain_id] = Split(X, y, domain.domain_id)
        return out


def next_batch(schedule: StreamSchedule, task: SourceTask, cursor: StreamCursor, oracle: Oracle | None = None):
    """Functional form of :meth:`SyntheticStream.next_batch`."""
    stream = SyntheticStream(schedule, task, oracle if oracle is not None else Oracle())
    return stream.next_batch(cursor)


def default_schedule(
    feature_dim: int = 16,
    num_domains: int = 8,
    batches_per_domain: int = 50,
    batch_size: int = 32,
    seed: int = 0,
    source_scale: float = 1.0,
) -> StreamSchedule:
    """Graded shifts of growing severity: rotation, translation and extra noise.

    Domain ``k`` (0-based) rotates by ``k * pi / num_domains`` in the first two
    coordinates, translates along a fixed seeded direction by ``0.5 * k`` and
    scales the noise to ``source_scale * (1 + 0.05 * k)``.
    """
    direction = np.random.default_rng([seed, 0x7A45]).normal(size=feature_dim)
    direction /= np.linalg.norm(direction)
    entries = []
    for k in range(num_domains):
        spec = DomainSpec(
            domain_id=k,
            rotation=k * math.pi / num_domains,
            translation=tuple((0.5 * k * direction).tolist()),
            noise_scale=source_scale * (1.0 + 0.05 * k),
        )
        entries.append((spec, batches_per_domain))
    return StreamSchedule(tuple(entries), batch_size=batch_size, seed=seed)


# ---- precomputed embeddings -------------------------------------------------


@dataclass(frozen=True)
class FeatureFileSpec:
    """How to split a feature file into source and target parts.

    Rows whose domain equals ``source_domain`` become the source pool: per
    class, ``calibration_per_class`` rows go to calibration, ``eval_fraction``
    of the rest to the source eval split and the remainder to pretraining.
    Every other domain is streamed in ``seq`` order, except an
    ``eval_fraction`` share of its rows that is held out for post-adaptation
    evaluation.
    """

    delimiter: str = ","
    source_domain: int = 0
    calibration_per_class: int = 50
    eval_fraction: float = 0.2
    domains: tuple | None = None  # allowed domain ids; None accepts any
    seed: int = 0


@dataclass
class FeatureData:
    train: Split
    calibration: Split
    source_eval: Split
    stream_ids: np.ndarray
    stream_features: np.ndarray
    stream_domains: np.ndarray
    eval_splits: dict
    oracle: Oracle
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return self.stream_features.shape[1]

    def batches(self, batch_size: int) -> Iterator[Batch]:
        """Consecutive batches in ``seq`` order; a batch never straddles two domains."""
        index, start, n = 0, 0, len(self.stream_ids)
        while start < n:
            dom = self.stream_domains[start]
            stop = start
            while stop < n and stop - start < batch_size and self.stream_domains[stop] == dom:
                stop += 1
            yield Batch(index, int(dom), self.stream_ids[start:stop], self.stream_features[start:stop])
            index += 1
            start = stop


@dataclass(frozen=True)
class FeatureRows:
    ids: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    seqs: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def read_feature_rows(path, spec: FeatureFileSpec = FeatureFileSpec()) -> FeatureRows:
    """Parse and validate ``id,label,domain,seq,f0..f{d-1}`` rows."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FeatureFileError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh, delimiter=spec.delimiter)
        header = next(reader, None)
        if header is None:
            raise FeatureFileError(f"{path}: no samples")
        header = [h.strip() for h in header]
        if header[:4] != ["id", "label", "domain", "seq"]:
            raise FeatureFileError(f"{path}, line 1: header must start with id,label,domain,seq")
        d = len(header) - 4
        if d < 1 or header[4:] != [f"f{j}" for j in range(d)]:
            raise FeatureFileError(f"{path}, line 1: feature columns must be f0..f{{d-1}}")
        ids, labels, domains, seqs, feats = [], [], [], [], []
        prev_seq = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 4:
                raise FeatureFileError(f"{path}, line {lineno}: expected {d} features, found {len(row) - 4}")
            try:
                i, y, dom, s = (int(c) for c in row[:4])
                x = [float(c) for c in row[4:]]
            except ValueError as exc:
                raise FeatureFileError(f"{path}, line {lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in x):
                raise FeatureFileError(f"{path}, line {lineno}: non-finite feature value")
            if y < 0:
                raise FeatureFileError(f"{path}, line {lineno}: negative label {y}")
            if spec.domains is not None and dom not in spec.domains:
                raise FeatureFileError(f"{path}, line {lineno}: unknown domain id {dom}")
            if prev_seq is not None and s < prev_seq:
                raise FeatureFileError(f"{path}, line {lineno}: rows must be sorted by seq")
            prev_seq = s
            ids.append(i)
            labels.append(y)
            domains.append(dom)
            seqs.append(s)
            feats.append(x)
    if not ids:
        raise FeatureFileError(f"{path}: no samples")
    if len(set(ids)) != len(ids):
        raise FeatureFileError(f"{path}: duplicate sample ids")
    return FeatureRows(
        np.array(ids, dtype=int), np.array(labels, dtype=int), np.array(domains, dtype=int),
        np.array(seqs, dtype=int), np.array(feats, dtype=float),
    )


def load_feature_file(path, spec: FeatureFileSpec = FeatureFileSpec()) -> FeatureData:
    """Read a feature file and split it into source splits, a stream and eval sets."""
    parsed = read_feature_rows(path, spec)
    ids_a, y_a, dom_a, X = parsed.ids, parsed.labels, parsed.domains, parsed.features
    domains = dom_a.tolist()
    num_classes = int(y_a.max()) + 1
    rng = np.random.default_rng([spec.seed, 0xF17E])

    src = np.flatnonzero(dom_a == spec.source_domain)
    if src.size == 0:
        raise FeatureFileError(f"{path}: no rows for source domain {spec.source_domain}")
    cal_idx, rest = [], []
    for c in range(num_classes):
        rows = rng.permutation(src[y_a[src] == c])
        cal_idx.extend(rows[: spec.calibration_per_class].tolist())
        rest.extend(rows[spec.calibration_per_class :].tolist())
    rest = rng.permutation(np.array(rest, dtype=int))
    n_eval = int(round(spec.eval_fraction * rest.size))
    src_eval, train = np.sort(rest[:n_eval]), np.sort(rest[n_eval:])
    cal_idx = np.sort(np.array(cal_idx, dtype=int))
    if cal_idx.size == 0 or train.size == 0:
        raise FeatureFileError(f"{path}: source domain too small for calibration and pretraining")

    stream_rows, eval_splits = [], {}
    for dom in sorted(set(domains) - {spec.source_domain}):
        rows = np.flatnonzero(dom_a == dom)
        held = np.zeros(rows.size, dtype=bool)
        held[rng.permutation(rows.size)[: int(round(spec.eval_fraction * rows.size))]] = True
        eval_splits[dom] = Split(X[rows[held]], y_a[rows[held]], dom)
        stream_rows.extend(rows[~held].tolist())
    stream_rows = np.array(sorted(stream_rows), dtype=int)  # file order is seq order

    oracle = Oracle()
    oracle.register(ids_a[stream_rows], y_a[stream_rows])
    return FeatureData(
        train=Split(X[train], y_a[train], spec.source_domain),
        calibration=Split(X[cal_idx], y_a[cal_idx], spec.source_domain),
        source_eval=Split(X[src_eval], y_a[src_eval], spec.source_domain),
        stream_ids=ids_a[stream_rows],
        stream_features=X[stream_rows] if stream_rows.size else np.zeros((0, X.shape[1])),
        stream_domains=dom_a[stream_rows],
        eval_splits=eval_splits,
        oracle=oracle,
        num_classes=num_classes,
    )


def write_feature_file(path, ids: Sequence[int], labels, domains, seqs, features, delimiter: str = ",") -> None:
    """Write rows in the feature-file format (handy for exporting embeddings)."""
    features = np.asarray(features, dtype=float)
    d = features.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["id", "label", "domain", "seq"] + [f"f{j}" for j in range(d)])
        for i, y, dom, s, x in zip(ids, labels, domains, seqs, features):
            w.writerow([int(i), int(y), int(dom), int(s)] + [repr(float(v)) for v in x])
