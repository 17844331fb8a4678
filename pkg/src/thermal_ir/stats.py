"""Jitter planning statistics: how far to shift the camera and how many
frames share one non-uniformity.

The variance of a register-and-average estimate under a correlated gain
field follows the variance-of-sum law

    var = (X0^2 / L^2) (sum_k Var(g_k) + 2 sum_{p<q} Cov(g_p, g_q)),

so the spatial autocorrelation of the gain dictates the minimum useful
shift, and its temporal autocorrelation bounds how many frames may be
treated as sharing one gain/offset pair.  Both are estimated empirically
from a flat-field stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .sensor import FrameStack

FLATNESS_THRESHOLD = 0.05


class StatsError(ValueError):
    pass


def averaging_variance(gain_autocorr, gain_var: float, x0_val: float,
                       shifts) -> float:
    """Predicted variance of the L-frame registered average of a constant
    scene x0 under a stationary gain field.

    gain_autocorr maps a 2D lag (dx, dy) to a correlation; shifts are the
    per-frame sampling offsets of the gain (one 2D offset per frame).
    """
    if abs(float(gain_autocorr((0.0, 0.0))) - 1.0) > 1e-9:
        raise StatsError("autocorrelation at lag 0 must equal 1")
    shifts = [np.asarray(s, dtype=np.float64) for s in shifts]
    n = len(shifts)
    if n < 1:
        raise StatsError("need at least one shift")
    total = n * gain_var
    for p in range(n):
        for qi in range(p + 1, n):
            lag = shifts[p] - shifts[qi]
            total += 2.0 * gain_var * float(gain_autocorr(tuple(lag)))
    return (x0_val * x0_val) / (n * n) * total


@dataclass
class JitterStats:
    spatial_autocorr: np.ndarray      # (2m+1, 2m+1), lag 0 at the center
    temporal_autocorr: np.ndarray     # per-lag, lag 0 first
    recommended_shift_px: float
    recommended_max_frames: int
    max_lag: int
    warnings: list = field(default_factory=list)


def _patch_autocorr(patch: np.ndarray, m: int) -> np.ndarray:
    """Mean-removed, overlap-normalized autocorrelation of one patch,
    cropped to lags within +-m.  Exactly 1 at lag 0 and point symmetric."""
    p = patch - patch.mean()
    var = p.var()
    if var <= 0:
        out = np.zeros((2 * m + 1, 2 * m + 1))
        out[m, m] = 1.0
        return out
    corr = signal.fftconvolve(p, p[::-1, ::-1], mode="full")
    ones = np.ones_like(p)
    counts = signal.fftconvolve(ones, ones, mode="full")
    corr = corr / (np.maximum(counts, 1.0) * var)
    cy, cx = patch.shape[0] - 1, patch.shape[1] - 1
    out = corr[cy - m: cy + m + 1, cx - m: cx + m + 1]
    # enforce exact lag-0 normalization and symmetry against fft round-off
    out = 0.5 * (out + out[::-1, ::-1])
    out[m, m] = 1.0
    return out


def _temporal_profile(frames: np.ndarray, max_lag: int,
                      pairs_per_lag: int = 32) -> np.ndarray:
    """Mean over start times of the across-pixel correlation between frames
    lag apart."""
    n = frames.shape[0]
    flat = frames.reshape(n, -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(flat, axis=1)
    out = np.ones(min(max_lag, n - 1) + 1)
    for lag in range(1, out.size):
        starts = np.unique(np.linspace(0, n - 1 - lag, pairs_per_lag, dtype=int))
        vals = []
        for t in starts:
            denom = norms[t] * norms[t + lag]
            if denom <= 0:
                vals.append(1.0)
            else:
                vals.append(float(flat[t] @ flat[t + lag]) / denom)
        out[lag] = np.mean(vals)
    return out


def _crossing(profile: np.ndarray, level: float) -> float:
    """First (linearly interpolated) index where the profile drops below
    `level`; the last index if it never does."""
    below = np.nonzero(profile < level)[0]
    if below.size == 0:
        return float(profile.size - 1)
    i = int(below[0])
    if i == 0:
        return 0.0
    c0, c1 = profile[i - 1], profile[i]
    if c0 == c1:
        return float(i)
    return (i - 1) + float((c0 - level) / (c0 - c1))


def estimate_jitter_stats(stack: FrameStack, max_lag: int = 50,
                          n_patches: int = 32, seed: int = 0) -> JitterStats:
    """Estimate spatial/temporal autocorrelation of the fixed pattern from a
    flat-field stack and derive jitter recommendations.

    recommended_shift_px is the smallest diagonal lag d where the spatial
    autocorrelation at (d, d) falls below 0.1; recommended_max_frames is
    the largest temporal lag with inter-frame pattern correlation >= 0.8.
    """
    frames = stack.frames
    if frames.shape[0] < 2:
        raise StatsError("need at least 2 frames")
    h, w = frames.shape[1:]
    warnings_list = []

    mean_frame = frames.mean(axis=0)
    smooth = ndimage.gaussian_filter(mean_frame, 5.0, mode="nearest")
    level = max(abs(float(smooth.mean())), 1e-12)
    if smooth.std() / level > FLATNESS_THRESHOLD:
        warnings_list.append(
            "input does not look like a flat field; statistics are "
            "confounded by scene structure")

    patch = min(h, w, 2 * max_lag + 32)
    m = min(max_lag, patch - 2)
    rng = np.random.default_rng(seed)
    n_patches = max(n_patches, 32)
    acc = np.zeros((2 * m + 1, 2 * m + 1))
    for _ in range(n_patches):
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        acc += _patch_autocorr(mean_frame[y0:y0 + patch, x0:x0 + patch], m)
    spatial = acc / n_patches
    spatial[m, m] = 1.0

    diag = np.array([spatial[m + d, m + d] for d in range(0, m + 1)])
    shift = _crossing(diag, 0.1)
    if diag[-1] >= 0.1:
        warnings_list.append(
            f"spatial autocorrelation stays above 0.1 within lag {m}; "
            "recommended shift is a lower bound")

    temporal = _temporal_profile(frames, max_lag)
    below = np.nonzero(temporal < 0.8)[0]
    max_frames = int(below[0] - 1) if below.size else int(temporal.size - 1)
    max_frames = max(max_frames, 0)

    return JitterStats(spatial_autocorr=spatial, temporal_autocorr=temporal,
                       recommended_shift_px=float(shift),
                       recommended_max_frames=max_frames,
                       max_lag=m, warnings=warnings_list)
