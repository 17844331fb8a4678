"""Reconstruction quality metrics."""

from __future__ import annotations

import math

import numpy as np


def mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    return float(np.mean((estimate - truth) ** 2))


def psnr(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, with peak = max(truth) - min(truth).

    Returns +inf when the estimate matches the truth exactly.
    """
    err = mse(estimate, truth)
    if err == 0.0:
        return math.inf
    peak = float(np.max(truth) - np.min(truth))
    if peak == 0.0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / err)


def fit_scale_shift(estimate: np.ndarray, truth: np.ndarray):
    """Least-squares (a, b) minimizing ||a*estimate + b - truth||^2."""
    e = np.asarray(estimate, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    var = e.var()
    if var == 0.0:
        return 0.0, float(t.mean())
    a = float(np.cov(e, t, bias=True)[0, 1] / var)
    b = float(t.mean() - a * e.mean())
    return a, b


def psnr_gauge_aligned(estimate: np.ndarray, truth: np.ndarray) -> float:
    """PSNR after removing the global scale/shift gauge freedom of blind
    gain/offset estimation."""
    a, b = fit_scale_shift(estimate, truth)
    return psnr(a * np.asarray(estimate, dtype=np.float64) + b, truth)
