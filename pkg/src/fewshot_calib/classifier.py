"""Prototype classifier: class-mean prototypes, temperature-scaled cosine logits.

Two heads are supported. ``"cosine"`` is the production head,
``tau * <f/|f|, w/|w|>``. ``"dot"`` is the plain ``<w, f>`` score without a
temperature; the bias-decomposition diagnostics are defined in that form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DiagnosticsUnavailable,
    EstimationError,
    NumericError,
    ShapeError,
)

PROB_FLOOR = 1e-30
HEAD_MODES = ("cosine", "dot")


@dataclass
class Prototypes:
    weights: np.ndarray  # (C, d), stored unnormalized
    augmented: bool = False
    counts: np.ndarray | None = None  # features averaged per class

    @property
    def num_ways(self) -> int:
        return self.weights.shape[0]


@dataclass
class ClassifierHead:
    temperature: float = 10.0
    mode: str = "cosine"

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ConfigurationError(f"unknown head mode {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


def compute_prototypes(features: np.ndarray, labels: np.ndarray, num_ways: int, augmented: bool = False) -> Prototypes:
    """Row ``c`` is the mean of the features labeled ``c``."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError("features must be (N, d) with one label per row")
    counts = np.bincount(labels, minlength=num_ways)
    if counts.shape[0] > num_ways:
        raise EstimationError(f"label {counts.shape[0] - 1} outside 0..{num_ways - 1}", int(counts.shape[0] - 1))
    for c in range(num_ways):
        if counts[c] == 0:
            raise EstimationError(f"class {c} has no features to estimate a prototype from", c)
    sums = np.zeros((num_ways, features.shape[1]))
    np.add.at(sums, labels, features)
    return Prototypes(sums / counts[:, None], augmented=augmented, counts=counts)


def _unit_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm {what} cannot be normalized")
    return x / norms, norms


def as_weights(prototypes) -> np.ndarray:
    return prototypes.weights if isinstance(prototypes, Prototypes) else np.asarray(prototypes, dtype=np.float64)


def logits(features: np.ndarray, prototypes, head: ClassifierHead) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    w = as_weights(prototypes)
    if f.shape[1] != w.shape[1]:
        raise ShapeError(f"feature dim {f.shape[1]} != prototype dim {w.shape[1]}")
    if head.mode == "dot":
        return f @ w.T
    fu, _ = _unit_rows(f, "feature")
    wu, _ = _unit_rows(w, "prototype")
    return head.temperature * (fu @ wu.T)


def logits_backward(features, prototypes, head: ClassifierHead, grad_logits: np.ndarray):
    """Chain ``dL/dlogits`` back to features, prototypes and temperature.

    Returns ``(d_features, d_prototypes, d_temperature)``.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    w = as_weights(prototypes)
    g = np.asarray(grad_logits, dtype=np.float64)
    if head.mode == "dot":
        return g @ w, g.T @ f, 0.0
    fu, fn = _unit_rows(f, "feature")
    wu, wn = _unit_rows(w, "prototype")
    cos = fu @ wu.T
    d_tau = float(np.sum(g * cos))
    gc = head.temperature * g
    # d(u/|u|) = (I - uu^T) / |u|
    a = gc @ wu
    d_f = (a - fu * np.sum(a * fu, axis=1, keepdims=True)) / fn
    b = gc.T @ fu
    d_w = (b - wu * np.sum(b * wu, axis=1, keepdims=True)) / wn
    return d_f, d_w, d_tau


def probabilities(logit_rows: np.ndarray) -> np.ndarray:
    z = np.asarray(logit_rows, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(features, prototypes, head: ClassifierHead) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits(features, prototypes, head), axis=1)


class CrossEntropy(NamedTuple):
    loss: float
    grad_logits: np.ndarray
    clamped: int  # rows whose true-class probability hit the floor


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> CrossEntropy:
    """Mean negative log-likelihood and its gradient ``(p - onehot) / N`` w.r.t. the logits."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n, c = p.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= c)):
        raise ShapeError("invalid labels for cross-entropy")
    rows = np.arange(n)
    py = p[rows, labels]
    clamped = int(np.sum(py < PROB_FLOOR))
    loss = float(-np.mean(np.log(np.maximum(py, PROB_FLOOR))))
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return CrossEntropy(loss, grad / n, clamped)


def feature_gradient(feature: np.ndarray, label: int, prototypes, head: ClassifierHead) -> np.ndarray:
    """Gradient of ``-log p(label | feature)`` w.r.t. the feature, prototypes held fixed.

    In ``dot`` mode this is ``(p_y - 1) w_y + sum_{j != y} p_j w_j``.
    """
    f = np.asarray(feature, dtype=np.float64)
    if head.mode == "cosine" and np.linalg.norm(f) == 0:
        raise DegenerateInputError("zero-norm feature")
    w = as_weights(prototypes)
    p = probabilities(logits(f, w, head))[0]
    coeff = p.copy()
    coeff[label] -= 1.0
    d_f, _, _ = logits_backward(f, w, head, coeff[None, :])
    return d_f[0]


class BiasDecomposition(NamedTuple):
    bias_component: np.ndarray
    mean_component: np.ndarray


@dataclass
class BiasDiagnostics:
    delta: np.ndarray  # (C, d): prototype minus true mean
    norms: np.ndarray  # (C,)
    true_means: np.ndarray

    @property
    def mean_norm(self) -> float:
        return float(self.norms.mean())


def bias_diagnostics(prototypes, true_means) -> BiasDiagnostics:
    if true_means is None:
        raise DiagnosticsUnavailable("true class means are not known for this data")
    w = as_weights(prototypes)
    m = np.asarray(true_means, dtype=np.float64)
    if m.shape != w.shape:
        raise ShapeError(f"true means {m.shape} do not match prototypes {w.shape}")
    delta = w - m
    return BiasDiagnostics(delta, np.linalg.norm(delta, axis=1), m)


def bias_decomposition(feature: np.ndarray, label: int, prototypes, true_means) -> BiasDecomposition:
    """Split the dot-head feature gradient into a prototype-bias part and a true-mean part.

    ``bias_component = (p_y - 1) delta_y`` and
    ``mean_component = (p_y - 1) m_y + sum_{j != y} p_j w_j``.
    """
    if true_means is None:
        raise DiagnosticsUnavailable("true class means are not known for this data")
    w = as_weights(prototypes)
    m = np.asarray(true_means, dtype=np.float64)
    f = np.asarray(feature, dtype=np.float64)
    p = probabilities(f @ w.T)
    delta = w[label] - m[label]
    others = np.delete(np.arange(w.shape[0]), label)
    bias = (p[label] - 1.0) * delta
    mean = (p[label] - 1.0) * m[label] + p[others] @ w[others]
    return BiasDecomposition(bias, mean)
