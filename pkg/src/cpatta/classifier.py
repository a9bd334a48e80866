"""Small softmax classifiers with hand-written backprop.

Two architectures: ``linear`` (one affine layer) and ``mlp1`` (affine, ReLU,
affine). Parameters are stored as a list of ``(W, b)`` pairs with ``W`` of
shape ``(out, in)``. A gradient is returned as another ``ClassifierParams``
of identical shape, so updates are plain elementwise arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

Architecture = Literal["linear", "mlp1"]
Provenance = Literal["human", "model"]

NLL_FLOOR = 1e-12


class ClassifierInputError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierParams:
    architecture: Architecture
    layers: tuple  # ((W, b), ...)

    def __post_init__(self):
        layers = tuple((np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in self.layers)
        object.__setattr__(self, "layers", layers)
        expected = {"linear": 1, "mlp1": 2}.get(self.architecture)
        if expected is None:
            raise ClassifierInputError(f"unknown architecture {self.architecture!r}")
        if len(layers) != expected:
            raise ClassifierInputError(f"{self.architecture} expects {expected} layer(s)")
        for (W, b), nxt in zip(layers, layers[1:] + ((None, None),)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ClassifierInputError("layer shapes are inconsistent")
            if nxt[0] is not None and nxt[0].shape[1] != W.shape[0]:
                raise ClassifierInputError("layer shapes are inconsistent")
        for W, b in layers:
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ClassifierInputError("parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden_dim(self) -> int | None:
        return self.layers[0][0].shape[0] if self.architecture == "mlp1" else None

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_flat(self, vec: np.ndarray) -> "ClassifierParams":
        out, pos = [], 0
        for W, b in self.layers:
            nw = W.size
            out.append((vec[pos : pos + nw].reshape(W.shape), vec[pos + nw : pos + nw + b.size].copy()))
            pos += nw + b.size
        return ClassifierParams(self.architecture, tuple(out))

    def axpy(self, scale: float, other: "ClassifierParams") -> "ClassifierParams":
        """Return ``self + scale * other``."""
        return ClassifierParams(
            self.architecture,
            tuple((W + scale * gW, b + scale * gb) for (W, b), (gW, gb) in zip(self.layers, other.layers)),
        )

    def is_zero(self) -> bool:
        return all(not W.any() and not b.any() for W, b in self.layers)


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    provenance: Provenance = "human"
    domain_id: int = 0
    sample_id: int = -1
    # realtime prediction when the sample was selected; evaluation-only
    predicted_at_selection: int = -1


def init_params(
    architecture: Architecture,
    feature_dim: int,
    num_classes: int,
    hidden_dim: int = 32,
    rng: np.random.Generator | None = None,
) -> ClassifierParams:
    if architecture == "linear":
        return ClassifierParams("linear", ((np.zeros((num_classes, feature_dim)), np.zeros(num_classes)),))
    if architecture == "mlp1":
        rng = rng if rng is not None else np.random.default_rng(0)
        W1 = rng.normal(0.0, np.sqrt(2.0 / feature_dim), (hidden_dim, feature_dim))
        W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), (num_classes, hidden_dim))
        return ClassifierParams("mlp1", ((W1, np.zeros(hidden_dim)), (W2, np.zeros(num_classes))))
    raise ClassifierInputError(f"unknown architecture {architecture!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(params: ClassifierParams, features) -> tuple[np.ndarray, bool]:
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.feature_dim:
        raise ClassifierInputError(f"feature dimension {X.shape[1]} does not match model dimension {params.feature_dim}")
    return X, single


def logits(params: ClassifierParams, features) -> np.ndarray:
    X, single = _as_batch(params, features)
    if params.architecture == "linear":
        (W, b), = params.layers
        out = X @ W.T + b
    else:
        (W1, b1), (W2, b2) = params.layers
        out = np.maximum(X @ W1.T + b1, 0.0) @ W2.T + b2
    return out[0] if single else out


def forward(params: ClassifierParams, features) -> np.ndarray:
    """Softmax probabilities for one feature vector or an (n, d) batch."""
    return _softmax(logits(params, features))


def predict(params: ClassifierParams, features):
    probs = forward(params, features)
    # np.argmax returns the first maximal index
    out = np.argmax(probs, axis=-1)
    return int(out) if out.ndim == 0 else out


def _stack(buffer: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(e.features, dtype=float) for e in buffer])
    y = np.array([e.label for e in buffer], dtype=int)
    return X, y


def loss_xy(params: ClassifierParams, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    p = forward(params, X)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], NLL_FLOOR))))


def gradient_xy(params: ClassifierParams, X: np.ndarray, y: np.ndarray) -> ClassifierParams:
    n = len(y)
    if n == 0:
        return ClassifierParams(params.architecture, tuple((np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers))
    X, _ = _as_batch(params, X)
    if y.min() < 0 or y.max() >= params.num_classes:
        raise ClassifierInputError("label out of range")
    onehot = np.zeros((n, params.num_classes))
    onehot[np.arange(n), y] = 1.0
    if params.architecture == "linear":
        (W, b), = params.layers
        delta = (_softmax(X @ W.T + b) - onehot) / n
        return ClassifierParams("linear", ((delta.T @ X, delta.sum(axis=0)),))
    (W1, b1), (W2, b2) = params.layers
    pre = X @ W1.T + b1
    h = np.maximum(pre, 0.0)
    delta2 = (_softmax(h @ W2.T + b2) - onehot) / n
    delta1 = (delta2 @ W2) * (pre > 0)
    return ClassifierParams("mlp1", ((delta1.T @ X, delta1.sum(axis=0)), (delta2.T @ h, delta2.sum(axis=0))))


def buffer_loss(params: ClassifierParams, buffer: Sequence[LabeledExample]) -> float:
    """Mean cross-entropy over the buffer; an empty buffer has loss 0."""
    if not buffer:
        return 0.0
    return loss_xy(params, *_stack(buffer))


def gradient(params: ClassifierParams, buffer: Sequence[LabeledExample]) -> ClassifierParams:
    if not buffer:
        return gradient_xy(params, np.zeros((0, params.feature_dim)), np.zeros(0, dtype=int))
    return gradient_xy(params, *_stack(buffer))


def descend(params: ClassifierParams, X: np.ndarray, y: np.ndarray, eta: float, steps: int) -> ClassifierParams:
    if len(y) == 0:
        return params
    for _ in range(steps):
        params = params.axpy(-eta, gradient_xy(params, X, y))
    return params


def staged_update(
    params: ClassifierParams,
    buf_h: Sequence[LabeledExample],
    buf_m: Sequence[LabeledExample],
    eta_h: float,
    eta_m: float,
    steps_h: int = 1,
    steps_m: int = 1,
) -> ClassifierParams:
    """Gradient steps on the human buffer at ``eta_h``, then on the model buffer at ``eta_m``."""
    if not (eta_h > 0 and eta_m > 0):
        raise ClassifierInputError("learning rates must be positive")
    half = descend(params, *_stack(buf_h), eta_h, steps_h) if buf_h else params
    return descend(half, *_stack(buf_m), eta_m, steps_m) if buf_m else half


def fit(
    params: ClassifierParams,
    X: np.ndarray,
    y: np.ndarray,
    lr: float = 0.5,
    max_epochs: int = 500,
    tol: float = 1e-4,
) -> ClassifierParams:
    """Full-batch gradient descent until the loss changes by less than ``tol``."""
    prev = loss_xy(params, X, y)
    for _ in range(max_epochs):
        params = params.axpy(-lr, gradient_xy(params, X, y))
        cur = loss_xy(params, X, y)
        if abs(prev - cur) < tol:
            break
        prev = cur
    return params


# ---- checkpoints -----------------------------------------------------------
# Text format:
#   cpatta-params v1
#   architecture <linear|mlp1>
#   layers <k>
#   W <rows> <cols>        followed by rows lines of cols floats (row-major)
#   b <size>               followed by one line of floats


def save_params(params: ClassifierParams, path) -> None:
    lines = ["cpatta-params v1", f"architecture {params.architecture}", f"layers {len(params.layers)}"]
    for W, b in params.layers:
        lines.append(f"W {W.shape[0]} {W.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in W)
        lines.append(f"b {b.size}")
        lines.append(" ".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ClassifierParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(lines)
    try:
        if next(it).strip() != "cpatta-params v1":
            raise ClassifierInputError(f"{path}: not a cpatta checkpoint")
        arch = next(it).split()[1]
        n_layers = int(next(it).split()[1])
        layers = []
        for _ in range(n_layers):
            _, r, c = next(it).split()
            W = np.array([[float(v) for v in next(it).split()] for _ in range(int(r))]).reshape(int(r), int(c))
            _, size = next(it).split()
            b = np.array([float(v) for v in next(it).split()]).reshape(int(size))
            layers.append((W, b))
    except (StopIteration, IndexError, ValueError) as exc:
        raise ClassifierInputError(f"{path}: malformed checkpoint ({exc})") from exc
    return ClassifierParams(arch, tuple(layers))
