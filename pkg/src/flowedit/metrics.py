"""Evaluation statistics: energy distance, cycle error, edit efficacy."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def pairwise_mean_distance(x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    """Mean Euclidean distance over all pairs, fp64, chunked to bound memory."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = 0.0
    for i in range(0, len(x), chunk):
        block = x[i:i + chunk]
        d = np.sqrt(((block[:, None, :] - y[None, :, :]) ** 2).sum(-1))
        total += d.sum()
    return total / (len(x) * len(y))


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """V-statistic energy distance: 2 E|X-Y| - E|X-X'| - E|Y-Y'|."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"energy distance expects (n, d) arrays, got {x.shape}, {y.shape}")
    return (2.0 * pairwise_mean_distance(x, y)
            - pairwise_mean_distance(x, x)
            - pairwise_mean_distance(y, y))


def pixel_l2_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b|| over flattened pixels, fp64."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(b)
    if denom == 0.0:
        raise ShapeError("reference image has zero norm")
    return float(np.linalg.norm(a - b) / denom)


def directional_flip_rate(values_edited: np.ndarray, values_base: np.ndarray,
                          direction: int) -> float:
    """Fraction of pairs where the edited measurement moved in `direction` (+1/-1)."""
    diff = np.asarray(values_edited, dtype=np.float64) - np.asarray(values_base, dtype=np.float64)
    if direction not in (1, -1):
        raise ShapeError("direction must be +1 or -1")
    return float(np.mean(diff * direction > 0))


def monotone_fraction(series: np.ndarray, direction: int, tol: float = 0.0) -> float:
    """Fraction of rows of (n, k) whose k values are monotone in `direction`."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("expected (n_series, n_points)")
    step = np.diff(arr, axis=1) * direction
    return float(np.mean(np.all(step >= -tol, axis=1)))
