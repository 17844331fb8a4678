"""Parametric 2D geometric transforms and bilinear sampling.

A transform maps pixel coordinates (x, y) of a jittered frame into the
reference frame: a frame pixel at (x, y) sees the scene at position
t(x, y) of the reference image.  Coordinates are (x=column, y=row), and
the linear/projective part of every kind acts on coordinates relative to
the image center ((W-1)/2, (H-1)/2), which keeps rotation and scale
parameters well conditioned and makes pyramid rescaling exact.

Kinds and their parameter vectors:

    translation  [tx, ty]
    rigid        [theta, tx, ty]                 (theta in radians)
    affine       [a11, a12, a21, a22, tx, ty]
    perspective  [p0..p7], denominator p6*x~ + p7*y~ + 1
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_COUNTS = {"translation": 2, "rigid": 3, "affine": 6, "perspective": 8}

_IDENTITY = {
    "translation": np.zeros(2),
    "rigid": np.zeros(3),
    "affine": np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
    "perspective": np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
}

PERSPECTIVE_MIN_DENOM = 1e-8


class TransformError(ValueError):
    pass


@dataclass
class TransformParams:
    """A geometric map from frame-k pixel coordinates to reference coordinates."""

    kind: str
    params: np.ndarray
    converged: bool = True

    def __post_init__(self):
        if self.kind not in PARAM_COUNTS:
            raise TransformError(f"unknown transform kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.params.shape != (PARAM_COUNTS[self.kind],):
            raise TransformError(
                f"{self.kind} expects {PARAM_COUNTS[self.kind]} parameters, "
                f"got shape {self.params.shape}"
            )

    @classmethod
    def identity(cls, kind: str) -> "TransformParams":
        return cls(kind, _IDENTITY[kind].copy())

    def is_identity(self, atol: float = 0.0) -> bool:
        return bool(np.allclose(self.params, _IDENTITY[self.kind], atol=atol, rtol=0.0))

    def copy(self) -> "TransformParams":
        return TransformParams(self.kind, self.params.copy(), self.converged)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": [float(p) for p in self.params],
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformParams":
        return cls(d["kind"], np.asarray(d["params"], dtype=np.float64),
                   bool(d.get("converged", True)))


def identity_params(kind: str) -> np.ndarray:
    return _IDENTITY[kind].copy()


def _center(shape) -> tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def map_coords(kind, params, xs, ys, shape):
    """Map pixel coordinates (xs, ys) through the transform.

    `shape` is the (H, W) grid the coordinates live on; it fixes the
    center of the linear part.  Returns arrays (X, Y) of mapped positions.
    """
    cx, cy = _center(shape)
    xr = xs - cx
    yr = ys - cy
    p = params
    if kind == "translation":
        return xs + p[0], ys + p[1]
    if kind == "rigid":
        c, s = np.cos(p[0]), np.sin(p[0])
        return c * xr - s * yr + cx + p[1], s * xr + c * yr + cy + p[2]
    if kind == "affine":
        return (p[0] * xr + p[1] * yr + cx + p[4],
                p[2] * xr + p[3] * yr + cy + p[5])
    if kind == "perspective":
        denom = p[6] * xr + p[7] * yr + 1.0
        if np.any(np.abs(denom) <= PERSPECTIVE_MIN_DENOM):
            raise TransformError("perspective transform denominator vanishes in-frame")
        return ((p[0] * xr + p[1] * yr + p[2]) / denom + cx,
                (p[3] * xr + p[4] * yr + p[5]) / denom + cy)
    raise TransformError(f"unknown transform kind {kind!r}")


def coord_jacobian(kind, params, xs, ys, shape):
    """Derivatives of the mapped position w.r.t. each parameter.

    Returns (dX, dY), each an array of shape (P,) + xs.shape.
    """
    cx, cy = _center(shape)
    xr = np.asarray(xs, dtype=np.float64) - cx
    yr = np.asarray(ys, dtype=np.float64) - cy
    grid = np.broadcast(xr, yr).shape
    one = np.ones(grid)
    zero = np.zeros(grid)
    p = params
    if kind == "translation":
        dX = np.stack([one, zero])
        dY = np.stack([zero, one])
    elif kind == "rigid":
        c, s = np.cos(p[0]), np.sin(p[0])
        dX = np.stack([-s * xr - c * yr, one, zero])
        dY = np.stack([c * xr - s * yr, zero, one])
    elif kind == "affine":
        dX = np.stack([xr, yr, zero, zero, one, zero])
        dY = np.stack([zero, zero, xr, yr, zero, one])
    elif kind == "perspective":
        denom = p[6] * xr + p[7] * yr + 1.0
        nx = p[0] * xr + p[1] * yr + p[2]
        ny = p[3] * xr + p[4] * yr + p[5]
        inv = 1.0 / denom
        inv2 = inv * inv
        dX = np.stack([xr * inv, yr * inv, inv, zero, zero, zero,
                       -nx * xr * inv2, -nx * yr * inv2])
        dY = np.stack([zero, zero, zero, xr * inv, yr * inv, inv,
                       -ny * xr * inv2, -ny * yr * inv2])
    else:
        raise TransformError(f"unknown transform kind {kind!r}")
    return dX, dY


def scale_params(kind, params, factor: float) -> np.ndarray:
    """Rescale a transform to a grid `factor` times larger.

    With center-relative coordinates the linear part is unchanged,
    translations scale by `factor` and projective terms by 1/factor.
    """
    p = np.asarray(params, dtype=np.float64).copy()
    if kind == "translation":
        p *= factor
    elif kind == "rigid":
        p[1:] *= factor
    elif kind == "affine":
        p[4:] *= factor
    elif kind == "perspective":
        p[2] *= factor
        p[5] *= factor
        p[6:] /= factor
    else:
        raise TransformError(f"unknown transform kind {kind!r}")
    return p


def to_matrix(t: TransformParams, shape) -> np.ndarray:
    """Homogeneous 3x3 matrix acting on absolute (x, y, 1) coordinates."""
    cx, cy = _center(shape)
    p = t.params
    if t.kind == "translation":
        m = np.array([[1.0, 0.0, p[0]], [0.0, 1.0, p[1]], [0.0, 0.0, 1.0]])
        return m
    if t.kind == "rigid":
        c, s = np.cos(p[0]), np.sin(p[0])
        core = np.array([[c, -s, p[1]], [s, c, p[2]], [0.0, 0.0, 1.0]])
    elif t.kind == "affine":
        core = np.array([[p[0], p[1], p[4]], [p[2], p[3], p[5]], [0.0, 0.0, 1.0]])
    elif t.kind == "perspective":
        core = np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])
    else:
        raise TransformError(f"unknown transform kind {t.kind!r}")
    shift = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    unshift = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return shift @ core @ unshift


def from_matrix(kind: str, m: np.ndarray, shape) -> TransformParams:
    """Inverse of to_matrix for the given kind (matrix must be representable)."""
    cx, cy = _center(shape)
    shift = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    unshift = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    core = unshift @ m @ shift
    if abs(core[2, 2]) <= PERSPECTIVE_MIN_DENOM:
        raise TransformError("degenerate homogeneous matrix")
    core = core / core[2, 2]
    if kind == "translation":
        return TransformParams(kind, np.array([core[0, 2], core[1, 2]]))
    if kind == "rigid":
        theta = np.arctan2(core[1, 0], core[0, 0])
        return TransformParams(kind, np.array([theta, core[0, 2], core[1, 2]]))
    if kind == "affine":
        return TransformParams(kind, np.array(
            [core[0, 0], core[0, 1], core[1, 0], core[1, 1], core[0, 2], core[1, 2]]))
    if kind == "perspective":
        return TransformParams(kind, np.array(
            [core[0, 0], core[0, 1], core[0, 2],
             core[1, 0], core[1, 1], core[1, 2], core[2, 0], core[2, 1]]))
    raise TransformError(f"unknown transform kind {kind!r}")


_PROMOTION = {"translation": 0, "rigid": 1, "affine": 2, "perspective": 3}
_KIND_ORDER = ["translation", "rigid", "affine", "perspective"]


def compose(outer: TransformParams, inner: TransformParams, shape) -> TransformParams:
    """Composite transform equal to applying `inner` first, then `outer`.

    warp(warp(x, outer), inner) == warp(x, compose(outer, inner, shape)).
    """
    kind = _KIND_ORDER[max(_PROMOTION[outer.kind], _PROMOTION[inner.kind])]
    m = to_matrix(outer, shape) @ to_matrix(inner, shape)
    return from_matrix(kind, m, shape)


def invert(t: TransformParams, shape) -> TransformParams:
    """Transform mapping reference coordinates back to frame coordinates."""
    m = to_matrix(t, shape)
    det = np.linalg.det(m)
    if abs(det) <= 1e-12:
        raise TransformError("transform is not invertible")
    return from_matrix(t.kind, np.linalg.inv(m), shape)


def max_corner_displacement(kind, delta, shape) -> float:
    """Largest displacement (px) the parameter change `delta` induces on the
    image corners; used as a pixel-equivalent step norm."""
    h, w = shape
    xs = np.array([0.0, w - 1.0, 0.0, w - 1.0])
    ys = np.array([0.0, 0.0, h - 1.0, h - 1.0])
    dX, dY = coord_jacobian(kind, identity_params(kind), xs, ys, shape)
    # Jacobian at identity is exact for translation/affine and a first-order
    # bound otherwise; adequate for convergence tests on small updates.
    dx = np.tensordot(delta, dX, axes=1)
    dy = np.tensordot(delta, dY, axes=1)
    return float(np.max(np.hypot(dx, dy)))


# ----------------------------------------------------------------------------
# Bilinear sampling


@dataclass
class SampleGrid:
    """Precomputed corner indices and weights for bilinear sampling."""

    ix0: np.ndarray
    ix1: np.ndarray
    iy0: np.ndarray
    iy1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    valid: np.ndarray
    shape: tuple = field(default=None)


def sample_grid(shape, X, Y) -> SampleGrid:
    """Corner indices, fractional weights and validity for sampling an
    (H, W) image at float positions (X, Y)."""
    h, w = shape
    valid = (X >= 0.0) & (X <= w - 1.0) & (Y >= 0.0) & (Y <= h - 1.0)
    x0 = np.floor(X)
    y0 = np.floor(Y)
    fx = X - x0
    fy = Y - y0
    ix0 = np.clip(x0.astype(np.int64), 0, w - 1)
    iy0 = np.clip(y0.astype(np.int64), 0, h - 1)
    ix1 = np.minimum(ix0 + 1, w - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)
    return SampleGrid(ix0, ix1, iy0, iy1, fx, fy, valid, (h, w))


def sample_values(image, g: SampleGrid) -> np.ndarray:
    """Bilinear interpolation; out-of-bounds samples are 0."""
    flat = image.ravel()
    w = image.shape[1]
    v00 = flat[g.iy0 * w + g.ix0]
    v01 = flat[g.iy0 * w + g.ix1]
    v10 = flat[g.iy1 * w + g.ix0]
    v11 = flat[g.iy1 * w + g.ix1]
    top = v00 + g.fx * (v01 - v00)
    bot = v10 + g.fx * (v11 - v10)
    out = top + g.fy * (bot - top)
    return np.where(g.valid, out, 0.0)


def sample_spatial_gradient(image, g: SampleGrid):
    """d(sampled value)/dX and /dY of the bilinear interpolant.

    Piecewise constant per cell in X; at integer positions this is the
    right-limit subgradient.
    """
    flat = image.ravel()
    w = image.shape[1]
    v00 = flat[g.iy0 * w + g.ix0]
    v01 = flat[g.iy0 * w + g.ix1]
    v10 = flat[g.iy1 * w + g.ix0]
    v11 = flat[g.iy1 * w + g.ix1]
    gx = (v01 - v00) * (1.0 - g.fy) + (v11 - v10) * g.fy
    gy = (v10 - v00) * (1.0 - g.fx) + (v11 - v01) * g.fx
    zero = 0.0
    return np.where(g.valid, gx, zero), np.where(g.valid, gy, zero)


def scatter_adjoint(grad_out, g: SampleGrid) -> np.ndarray:
    """Adjoint of sample_values: scatter weighted gradients back onto the
    source image grid."""
    h, w = g.shape
    go = np.where(g.valid, grad_out, 0.0).ravel()
    fx = g.fx.ravel()
    fy = g.fy.ravel()
    i00 = (g.iy0 * w + g.ix0).ravel()
    i01 = (g.iy0 * w + g.ix1).ravel()
    i10 = (g.iy1 * w + g.ix0).ravel()
    i11 = (g.iy1 * w + g.ix1).ravel()
    n = h * w
    acc = np.bincount(i00, weights=go * (1 - fx) * (1 - fy), minlength=n)
    acc += np.bincount(i01, weights=go * fx * (1 - fy), minlength=n)
    acc += np.bincount(i10, weights=go * (1 - fx) * fy, minlength=n)
    acc += np.bincount(i11, weights=go * fx * fy, minlength=n)
    return acc.reshape(h, w)
