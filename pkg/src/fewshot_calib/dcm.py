"""Distribution calibration: support-set normalization followed by a learnable scale vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ShapeError

DEFAULT_EPSILON = 1e-6


@dataclass
class DcmState:
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    scale: np.ndarray | None = None
    epsilon: float = DEFAULT_EPSILON

    @property
    def fitted(self) -> bool:
        return self.mu is not None and self.sigma is not None

    def refit(self, support_features: np.ndarray) -> None:
        self.mu, self.sigma = fit_stats(support_features, self.epsilon)
        if self.scale is None:
            self.scale = np.ones_like(self.mu)


def fit_stats(support_features: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population standard deviation, the latter floored at ``epsilon``."""
    f = np.atleast_2d(np.asarray(support_features, dtype=np.float64))
    if f.shape[0] < 1:
        raise ShapeError("need at least one support feature")
    mu = f.mean(axis=0)
    sigma = np.sqrt(np.mean((f - mu) ** 2, axis=0))
    return mu, np.maximum(sigma, epsilon)


def fit(support_features: np.ndarray, scale: np.ndarray | None = None, epsilon: float = DEFAULT_EPSILON) -> DcmState:
    mu, sigma = fit_stats(support_features, epsilon)
    if scale is None:
        scale = np.ones_like(mu)
    return DcmState(mu, sigma, np.asarray(scale, dtype=np.float64), epsilon)


def _check(state: DcmState, features: np.ndarray) -> np.ndarray:
    if not state.fitted:
        raise ContractViolation("DCM state has not been fitted on a support set")
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != state.mu.shape[0]:
        raise ShapeError(f"feature dim {f.shape[-1]} != calibration dim {state.mu.shape[0]}")
    return f


def normalize(features: np.ndarray, state: DcmState) -> np.ndarray:
    f = _check(state, features)
    return (f - state.mu) / state.sigma


def calibrate(features: np.ndarray, state: DcmState) -> np.ndarray:
    scale = np.ones_like(state.mu) if state.scale is None else state.scale
    return normalize(features, state) * scale


def scale_gradient(upstream: np.ndarray, normalized: np.ndarray) -> np.ndarray:
    """dL/ds given dL/d(calibrated) and the pre-scale normalized features."""
    g = np.atleast_2d(upstream)
    n = np.atleast_2d(normalized)
    if g.shape != n.shape:
        raise ShapeError(f"upstream {g.shape} and normalized {n.shape} differ")
    return np.sum(g * n, axis=0)


def stats_gradient_passthrough(upstream: np.ndarray, state: DcmState) -> np.ndarray:
    """dL/df with mu and sigma treated as constants: ``upstream * s / sigma``."""
    _check(state, upstream)
    scale = np.ones_like(state.mu) if state.scale is None else state.scale
    return np.asarray(upstream) * (scale / state.sigma)


def stats_gradient_full(upstream: np.ndarray, features: np.ndarray, state: DcmState) -> np.ndarray:
    """dL/df when mu and sigma are themselves functions of ``features``.

    Only valid when ``state`` was fitted on exactly ``features``. Dimensions
    whose deviation sits at the epsilon floor have a constant sigma.
    """
    f = _check(state, features)
    scale = np.ones_like(state.mu) if state.scale is None else state.scale
    g = np.asarray(upstream) * scale  # dL/d(normalized)
    z = (f - state.mu) / state.sigma
    g_mean = g.mean(axis=0)
    gz_mean = np.mean(g * z, axis=0)
    floored = np.sqrt(np.mean((f - state.mu) ** 2, axis=0)) <= state.epsilon
    gz_mean = np.where(floored, 0.0, gz_mean)
    return (g - g_mean - z * gz_mean) / state.sigma
