"""Image-space geometry: warping, box downsampling, Gaussian pyramids and
coarse-to-fine Gauss-Newton registration."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import transforms as tf
from .transforms import TransformParams

MIN_PYRAMID_SIZE = 16


class GeometryError(ValueError):
    pass


def worker_count() -> int:
    """Worker cap from THERMAL_IR_THREADS (0 or unset = auto)."""
    raw = os.environ.get("THERMAL_IR_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


def warp(image: np.ndarray, t: TransformParams):
    """Resample `image` through the transform: output(x, y) = image(t(x, y)).

    Returns (warped, valid) where valid marks samples that landed inside
    [0, W-1] x [0, H-1]; out-of-bounds outputs are 0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise GeometryError(f"warp expects a non-empty 2D image, got {image.shape}")
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    X, Y = tf.map_coords(t.kind, t.params, xs, ys, image.shape)
    grid = tf.sample_grid(image.shape, X, Y)
    return tf.sample_values(image, grid), grid.valid


def box_downsample(image: np.ndarray, q: int) -> np.ndarray:
    """Mean over non-overlapping QxQ blocks.  Shapes not divisible by Q are
    cropped to the largest divisible region (with a warning)."""
    if q < 1:
        raise GeometryError(f"downsample factor must be >= 1, got {q}")
    image = np.asarray(image, dtype=np.float64)
    if q == 1:
        return image.copy()
    h, w = image.shape
    hq, wq = (h // q) * q, (w // q) * q
    if (hq, wq) != (h, w):
        warnings.warn(f"box_downsample: cropping {image.shape} to ({hq}, {wq}) "
                      f"for Q={q}", stacklevel=2)
        image = image[:hq, :wq]
    return image.reshape(hq // q, q, wq // q, q).mean(axis=(1, 3))


@dataclass
class Pyramid:
    levels: list  # level 0 = full resolution

    def __len__(self):
        return len(self.levels)


def gaussian_pyramid(image: np.ndarray, levels: int = None, sigma: float = 1.0,
                     min_size: int = MIN_PYRAMID_SIZE) -> Pyramid:
    """Blur-then-decimate pyramid; each level is ceil(previous / 2) and at
    least min_size x min_size."""
    image = np.asarray(image, dtype=np.float64)
    out = [image]
    while True:
        if levels is not None and len(out) >= levels:
            break
        cur = out[-1]
        nh, nw = -(-cur.shape[0] // 2), -(-cur.shape[1] // 2)
        if min(nh, nw) < min_size:
            break
        blurred = ndimage.gaussian_filter(cur, sigma, mode="nearest")
        out.append(blurred[::2, ::2])
    return Pyramid(out)


def _normalize(image: np.ndarray) -> np.ndarray:
    std = image.std()
    if std <= 0:
        return image - image.mean()
    return (image - image.mean()) / std


def _gn_level(reference, moving, kind, params, max_iter, tol):
    """One pyramid level of Gauss-Newton minimization of
    sum((reference(t(x,y)) - moving(x,y))^2) over transform parameters."""
    h, w = moving.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    best = params.copy()
    best_ssd = np.inf
    worse_streak = 0
    converged = False
    for _ in range(max_iter):
        X, Y = tf.map_coords(kind, params, xs, ys, moving.shape)
        grid = tf.sample_grid(reference.shape, X, Y)
        warped = tf.sample_values(reference, grid)
        v = grid.valid
        if v.sum() < 16:
            break
        r = np.where(v, warped - moving, 0.0)
        ssd = float((r * r).sum() / max(int(v.sum()), 1))
        if ssd < best_ssd:
            best_ssd = ssd
            best = params.copy()
            worse_streak = 0
        else:
            worse_streak += 1
            if worse_streak >= 5:
                return best, False
        gx, gy = tf.sample_spatial_gradient(reference, grid)
        dX, dY = tf.coord_jacobian(kind, params, xs, ys, moving.shape)
        j = dX * gx + dY * gy            # (P, H, W)
        jm = (j * v).reshape(j.shape[0], -1)
        rhs = -(jm @ r.ravel())
        jtj = jm @ jm.T
        jtj[np.diag_indices_from(jtj)] += 1e-9 * max(np.trace(jtj), 1e-12)
        try:
            delta = np.linalg.solve(jtj, rhs)
        except np.linalg.LinAlgError:
            return best, False
        params = params + delta
        if tf.max_corner_displacement(kind, delta, moving.shape) < tol:
            converged = True
            best = params.copy()
            break
    return best, converged


def register_pair(reference: np.ndarray, moving: np.ndarray,
                  kind: str = "affine", levels: int = 4,
                  max_iter: int = 50, tol: float = 1e-4) -> TransformParams:
    """Estimate the transform t with moving(x, y) ~= reference(t(x, y)).

    The returned transform maps moving-frame pixel coordinates into the
    reference frame (the convention TransformParams uses for jittered
    frames), found by coarse-to-fine Gauss-Newton on SSD after per-image
    mean/std normalization.  `converged=False` flags divergence; the best
    parameters seen are still returned.
    """
    reference = np.asarray(reference, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if reference.shape != moving.shape:
        raise GeometryError(
            f"register_pair: shape mismatch {reference.shape} vs {moving.shape}")
    if levels < 1:
        raise GeometryError("levels must be >= 1")
    pyr_ref = gaussian_pyramid(_normalize(reference), levels=levels)
    pyr_mov = gaussian_pyramid(_normalize(moving), levels=levels)
    n = min(len(pyr_ref), len(pyr_mov))
    params = tf.identity_params(kind)
    converged = True
    for level in range(n - 1, -1, -1):
        params, converged = _gn_level(pyr_ref.levels[level], pyr_mov.levels[level],
                                      kind, params, max_iter, tol)
        if level > 0:
            up = pyr_ref.levels[level - 1].shape[0] / pyr_ref.levels[level].shape[0]
            params = tf.scale_params(kind, params, up)
    return TransformParams(kind, params, converged=converged)


def register_stack(frames, kind: str = "affine", levels: int = 4) -> list:
    """Per-frame transform to frame 0 (frame 0 gets the identity)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise GeometryError("register_stack needs a (L>=2, H, W) stack")
    ref = frames[0]

    def _one(k):
        try:
            return register_pair(ref, frames[k], kind=kind, levels=levels)
        except GeometryError as exc:
            raise GeometryError(f"registration of frame {k} failed: {exc}") from exc

    n_workers = min(worker_count(), frames.shape[0] - 1)
    out = [TransformParams.identity(kind)]
    if n_workers <= 1:
        out.extend(_one(k) for k in range(1, frames.shape[0]))
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            out.extend(pool.map(_one, range(1, frames.shape[0])))
    return out
