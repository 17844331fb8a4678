"""Microbolometer sensor physics and synthetic jittered-capture simulation.

The measurement model for frame k of a stack is

    y_k = g * (D_Q(warp(x0, T_k)) + o) + noise

with a gain map g and offset map o shared by all frames, per-frame
geometric transforms T_k, an optional QxQ box downsampling D_Q, and
Poisson (photon) plus Gaussian (readout) noise.  The same model is used
by the solvers, so a noiseless identity capture is exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import geometry
from .transforms import TransformParams


class SimulationError(ValueError):
    pass


@dataclass
class BolometerParams:
    """Single-pixel thermal model: conversion efficiency alpha, thermal
    capacitance C (J/K), conductance G (W/K), temperature coefficient beta
    (1/K), average resistance (ohm) and bias current (A)."""

    alpha: float = 0.8
    C: float = 2e-9
    G: float = 2e-7
    beta: float = 0.02
    R_avg: float = 1e5
    I_bias: float = 1e-4

    def __post_init__(self):
        if self.C <= 0 or self.G <= 0:
            raise SimulationError("C and G must be positive")
        if not 0 < self.alpha <= 1:
            raise SimulationError("alpha must be in (0, 1]")

    @property
    def tau(self) -> float:
        """Thermal time constant C/G in seconds."""
        return self.C / self.G


def step_response(params: BolometerParams, phi1: float, phi2: float,
                  t) -> np.ndarray | float:
    """Pixel temperature change at time t after the incident flux steps from
    phi1 to phi2 (W): (a*phi1/G) exp(-t/tau) + (a*phi2/G)(1 - exp(-t/tau))."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise SimulationError("step_response: t must be >= 0")
    decay = np.exp(-t / params.tau)
    scale = params.alpha / params.G
    out = scale * (phi1 * decay + phi2 * (1.0 - decay))
    return float(out) if out.ndim == 0 else out


def gain_offset_from_physics(params: BolometerParams, phi_fpa: float):
    """Steady-state linear response coefficients mapping flux to counts:
    g = I*alpha*beta*R_avg/G and o = -g*phi_fpa."""
    g = params.I_bias * params.alpha * params.beta * params.R_avg / params.G
    return g, -g * phi_fpa


@dataclass
class NonUniformity:
    """Per-pixel multiplicative gain and additive offset maps."""

    gain: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.gain.shape != self.offset.shape:
            raise SimulationError("gain and offset must share the sensor shape")
        if np.any(self.gain <= 0):
            raise SimulationError("gain must be strictly positive everywhere")

    @property
    def shape(self):
        return self.gain.shape


@dataclass
class NoiseConfig:
    """Noise and non-uniformity synthesis settings.

    poisson_scale is photons per count (0 disables shot noise);
    poisson_stage selects whether shot noise hits the pre-gain radiance or
    the post-gain counts.  Gain structure combines independent per-column
    and per-row deviations with an AR(1) spatially correlated field
    (corr length in pixels, marginal std corr_gain_sigma).  The offset is
    a Gaussian-blurred unit-variance field scaled by offset_amplitude,
    plus an optional radial narcissus-style bump.
    """

    poisson_scale: float = 0.0
    read_sigma: float = 0.0
    column_gain_sigma: float = 0.0
    row_gain_sigma: float = 0.0
    gain_correlation_length: float = 0.0
    corr_gain_sigma: float = 0.0
    offset_smoothness: float = 0.0
    offset_amplitude: float = 0.0
    narcissus_amplitude: float = 0.0
    poisson_stage: str = "post"
    seed: int = 0

    def __post_init__(self):
        for name in ("poisson_scale", "read_sigma", "column_gain_sigma",
                     "row_gain_sigma", "gain_correlation_length",
                     "corr_gain_sigma", "offset_smoothness", "offset_amplitude",
                     "narcissus_amplitude"):
            if getattr(self, name) < 0:
                raise SimulationError(f"{name} must be >= 0")
        if self.poisson_stage not in ("pre", "post"):
            raise SimulationError("poisson_stage must be 'pre' or 'post'")
        if int(self.seed) < 0:
            raise SimulationError("seed must be a non-negative integer")
        self.seed = int(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


GAIN_FLOOR = 0.05


def ar1_field(shape, corr_length: float, rng) -> np.ndarray:
    """Stationary separable AR(1) random field with unit marginal variance
    and autocorrelation exp(-(|dx| + |dy|)/corr_length)."""
    h, w = shape
    x = rng.standard_normal((h, w))
    if corr_length <= 0:
        return x
    rho = float(np.exp(-1.0 / corr_length))
    innov = np.sqrt(1.0 - rho * rho)
    for axis in (0, 1):
        x = np.moveaxis(x, axis, 0)
        for i in range(1, x.shape[0]):
            x[i] = rho * x[i - 1] + innov * x[i]
        x = np.moveaxis(x, 0, axis)
    return x


def _radial_bump(shape) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / (0.35 * min(h, w)) ** 2
    return np.exp(-0.5 * r2)


def sample_nonuniformity(shape, cfg: NoiseConfig) -> NonUniformity:
    """Draw a gain/offset pair: gain = 1 + column + row + correlated terms
    (clamped at 0.05), offset = amplitude x blurred unit-variance field plus
    the optional narcissus bump.  Deterministic per cfg.seed."""
    h, w = shape
    if h < 8 or w < 8:
        raise SimulationError("sensor must be at least 8x8")
    rng = np.random.default_rng(cfg.seed)
    gain = np.ones((h, w))
    if cfg.column_gain_sigma > 0:
        gain += cfg.column_gain_sigma * rng.standard_normal(w)[None, :]
    if cfg.row_gain_sigma > 0:
        gain += cfg.row_gain_sigma * rng.standard_normal(h)[:, None]
    if cfg.corr_gain_sigma > 0:
        gain += cfg.corr_gain_sigma * ar1_field(
            (h, w), cfg.gain_correlation_length, rng)
    gain = np.maximum(gain, GAIN_FLOOR)

    offset = np.zeros((h, w))
    if cfg.offset_amplitude > 0:
        fieldv = rng.standard_normal((h, w))
        if cfg.offset_smoothness > 0:
            fieldv = ndimage.gaussian_filter(fieldv, cfg.offset_smoothness,
                                             mode="nearest")
            std = fieldv.std()
            if std > 0:
                fieldv /= std
        offset = cfg.offset_amplitude * fieldv
    if cfg.narcissus_amplitude > 0:
        offset = offset + cfg.narcissus_amplitude * _radial_bump((h, w))
    return NonUniformity(gain, offset)


@dataclass
class GroundTruth:
    scene: np.ndarray                 # clean radiance (high-res when Q > 1)
    nu: NonUniformity
    transforms: list


@dataclass
class FrameStack:
    """Measured frames with validity masks and, for simulations, the
    generating ground truth."""

    frames: np.ndarray                # (L, H, W)
    masks: np.ndarray                 # (L, H, W) bool
    truth: GroundTruth = None
    noise: NoiseConfig = None
    downsample_q: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise SimulationError("frames must be (L, H, W)")
        if self.masks is None:
            self.masks = np.ones(self.frames.shape, dtype=bool)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.shape != self.frames.shape:
            raise SimulationError("masks must match frames shape")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]


def _downsample_mask(mask: np.ndarray, q: int) -> np.ndarray:
    if q == 1:
        return mask
    h, w = mask.shape
    return mask.reshape(h // q, q, w // q, q).all(axis=(1, 3))


def simulate_capture(x0: np.ndarray, nu: NonUniformity, transforms: list,
                     cfg: NoiseConfig, downsample_q: int = 1) -> FrameStack:
    """Generate a corrupted frame stack from a clean scene.

    Per frame: warp the scene by its transform, box-downsample by Q,
    apply gain/offset, then Poisson and readout noise (per-frame RNG
    streams derived from (cfg.seed, frame index)).  Fails if any transform
    pushes more than half the pixels out of bounds.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if np.any(x0 <= 0):
        raise SimulationError("scene must be positive-valued")
    if len(transforms) < 1:
        raise SimulationError("need at least one transform")
    if not transforms[0].is_identity(atol=1e-12):
        raise SimulationError("first transform must be the identity")
    q = int(downsample_q)
    if q < 1:
        raise SimulationError("downsample_q must be >= 1")
    if x0.shape[0] % q or x0.shape[1] % q:
        raise SimulationError(f"scene shape {x0.shape} not divisible by Q={q}")
    lr_shape = (x0.shape[0] // q, x0.shape[1] // q)
    if nu.shape != lr_shape:
        raise SimulationError(
            f"non-uniformity shape {nu.shape} does not match sensor {lr_shape}")

    frames = np.empty((len(transforms),) + lr_shape)
    masks = np.empty((len(transforms),) + lr_shape, dtype=bool)
    for k, t in enumerate(transforms):
        warped, valid = geometry.warp(x0, t)
        if valid.mean() < 0.5:
            raise SimulationError(
                f"transform {k} warps more than 50% of pixels out of bounds")
        if q > 1:
            h, w = warped.shape
            sig = warped.reshape(h // q, q, w // q, q).mean(axis=(1, 3))
            mask = _downsample_mask(valid, q)
        else:
            sig, mask = warped, valid
        rng = np.random.default_rng([cfg.seed, k])
        if cfg.poisson_scale > 0 and cfg.poisson_stage == "pre":
            sig = rng.poisson(np.clip(sig, 0, None) * cfg.poisson_scale) \
                / cfg.poisson_scale
        y = nu.gain * (sig + nu.offset)
        if cfg.poisson_scale > 0 and cfg.poisson_stage == "post":
            y = rng.poisson(np.clip(y, 0, None) * cfg.poisson_scale) \
                / cfg.poisson_scale
        if cfg.read_sigma > 0:
            y = y + cfg.read_sigma * rng.standard_normal(lr_shape)
        frames[k] = y
        masks[k] = mask
    truth = GroundTruth(scene=x0.copy(), nu=nu, transforms=[t.copy() for t in transforms])
    return FrameStack(frames=frames, masks=masks, truth=truth, noise=cfg,
                      downsample_q=q, meta={"seed": cfg.seed})


def sample_jitter_transforms(count: int, kind: str, max_shift_px: float,
                             max_rot_deg: float = 2.0, seed: int = 0) -> list:
    """Random small camera motions: the identity first, then translations
    uniform in [-s, s]^2 with rotations up to max_rot_deg for the rigid and
    affine kinds."""
    rng = np.random.default_rng(seed)
    out = [TransformParams.identity(kind)]
    for _ in range(count - 1):
        tx, ty = rng.uniform(-max_shift_px, max_shift_px, size=2)
        theta = 0.0
        if kind in ("rigid", "affine") and max_rot_deg > 0:
            theta = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        if kind == "translation":
            params = np.array([tx, ty])
        elif kind == "rigid":
            params = np.array([theta, tx, ty])
        elif kind == "affine":
            c, s = np.cos(theta), np.sin(theta)
            params = np.array([c, -s, s, c, tx, ty])
        elif kind == "perspective":
            params = np.array([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0])
        else:
            raise SimulationError(f"unknown transform kind {kind!r}")
        out.append(TransformParams(kind, params))
    return out


def synthetic_scene(shape, seed: int = 0, contrast: float = 1.0) -> np.ndarray:
    """Positive test scene mixing smooth thermal blobs, a gradient background
    and a few sharp-edged objects (texture for registration)."""
    h, w = shape
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.15 + 0.1 * (xs / max(w - 1, 1)) + 0.05 * (ys / max(h - 1, 1))
    for _ in range(6):
        cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
        sx, sy = rng.uniform(0.05, 0.25) * w, rng.uniform(0.05, 0.25) * h
        amp = rng.uniform(0.1, 0.5)
        img += amp * np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))
    for _ in range(4):
        x0b = int(rng.uniform(0.05, 0.7) * w)
        y0b = int(rng.uniform(0.05, 0.7) * h)
        bw = int(rng.uniform(0.08, 0.25) * w)
        bh = int(rng.uniform(0.08, 0.25) * h)
        img[y0b:y0b + bh, x0b:x0b + bw] += rng.uniform(0.15, 0.4)
    img = 0.1 + contrast * (img - img.min()) / (img.max() - img.min())
    return img
