"""Independent oracles shared by the test modules."""

import numpy as np


def numeric_grad(fn, x: np.ndarray, h: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor: float = 1e-6) -> float:
    """Norm-based relative error. ``floor`` keeps exactly-zero gradients from
    turning finite-difference round-off (~1e-12) into a relative error of 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def naive_mlp(layers, x):
    """Straight-line re-evaluation of an MLP with explicit loops."""
    h = [float(v) for v in x]
    for li, (w, b) in enumerate(layers):
        out = []
        for r in range(w.shape[0]):
            s = float(b[r])
            for c in range(w.shape[1]):
                s += float(w[r, c]) * h[c]
            if li != len(layers) - 1:
                s = s if s > 0 else 0.0
            out.append(s)
        h = out
    return np.array(h)
