"""Shared test utilities: finite differences and random probability tables."""

from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f() w.r.t. array x,
    perturbing x in place."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f()
        flat_x[i] = orig - h
        down = f()
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference normalized by the larger magnitude scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-10)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def random_log_probs(rng: np.random.Generator, T: int, cols: int) -> np.ndarray:
    """A random normalized (T, cols) log-probability table."""
    x = rng.normal(size=(T, cols))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def peaked_log_probs(col_per_frame, cols: int, peak: float = 0.999) -> np.ndarray:
    """Rows nearly one-hot on the given column per frame."""
    T = len(col_per_frame)
    rest = (1.0 - peak) / (cols - 1)
    table = np.full((T, cols), np.log(rest))
    for t, c in enumerate(col_per_frame):
        table[t, c] = np.log(peak)
    return table
