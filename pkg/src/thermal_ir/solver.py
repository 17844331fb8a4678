"""Joint recovery of scene radiance, gain/offset maps and frame transforms.

Three methods share one forward model (y_k = g * (D_Q(warp(x0, T_k)) + o)):

  average_baseline   register frames to frame 0 and average (no sensor model)
  solve_physics_tv   direct pixel-grid x0 with TV regularization
  solve_deepir       x0 parameterized by a neural scene model
  solve_superres     solve_deepir with the box-downsampling operator
                     between warp and gain (x0 recovered at Q x resolution)

The joint loss is  sum_k MSE_valid(y_k, pred_k)
                   + tv_image_weight * TV(x0) + tv_offset_weight * TV(o),
minimized with Adam from a register-and-average initialization.  The
multiplicative scale gauge is fixed by renormalizing the gain to mean 1
after every step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import geometry, scene_models, transforms as tf
from .diffengine import Tape, Tensor
from .metrics import mse, psnr, psnr_gauge_aligned  # noqa: F401  (psnr is API)
from .optim import Adam
from .sensor import FrameStack, NonUniformity

GAIN_PROJECT_FLOOR = 1e-3
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class SolverError(ValueError):
    pass


class SolverDivergence(RuntimeError):
    """Optimization aborted: exploding data loss or NaN."""


@dataclass
class SolveConfig:
    scene_kind: str = "deep-decoder"
    transform_kind: str = "affine"
    iters: int = 2000
    lr: float = 1e-3
    tv_image_weight: float = 1e-5
    tv_offset_weight: float = 10.0
    downsample_q: int = 1
    optimize_transforms: bool = True
    gain_mean_constraint: bool = True
    seed: int = 0
    warmup_iters: int = 200
    scene_config: object = None
    # slower steps for calibration maps and geometry keep the scene model
    # from chasing a moving forward model
    lr_scale_scene: float = 1.0
    lr_scale_gain_offset: float = 0.1
    lr_scale_transforms: float = 0.01
    registration_levels: int = 4
    # step decay sharpens the final estimate once the coarse structure is in;
    # the reported image is the mean render over the post-decay iterations
    # (iterate averaging suppresses optimization chatter)
    lr_decay_at: float = 0.7
    lr_decay_factor: float = 0.3
    average_output: bool = True

    def __post_init__(self):
        if self.iters < 1:
            raise SolverError("iters must be >= 1")
        if self.downsample_q < 1:
            raise SolverError("downsample_q must be >= 1")
        if self.tv_image_weight < 0 or self.tv_offset_weight < 0:
            raise SolverError("TV weights must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.scene_config is not None:
            d["scene_config"] = asdict(self.scene_config)
        return d


@dataclass
class SolveReport:
    method: str
    x0_hat: np.ndarray
    nu_hat: NonUniformity
    transforms_hat: list
    loss_curve: dict
    unknown_count: int
    equation_count: int
    psnr_vs_truth: float = None
    psnr_gauge_aligned: float = None
    config: SolveConfig = None
    warnings: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def unknown_equation_counts(n_latent_pixels: int, n_frames: int,
                            transform_kind: str, n_valid: int):
    """Dense-model accounting: gain, offset and latent image contribute
    n_latent_pixels unknowns each, plus P parameters per non-reference
    frame; the measurements contribute one equation per valid pixel."""
    p = tf.PARAM_COUNTS[transform_kind]
    unknowns = 3 * n_latent_pixels + p * (n_frames - 1)
    return unknowns, int(n_valid)


def average_baseline(stack: FrameStack, transforms: list = None) -> np.ndarray:
    """Inverse-warp every frame to the reference and average over valid
    pixels.  Removes temporal noise where jitter decorrelates the fixed
    pattern, but none of the non-uniformity without jitter."""
    if len(stack) < 1:
        raise SolverError("empty stack")
    if transforms is None:
        transforms = (geometry.register_stack(stack.frames)
                      if len(stack) > 1 else [tf.TransformParams.identity("affine")])
    if len(transforms) != len(stack):
        raise SolverError("transforms must align with frames")
    shape = stack.shape
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    for k in range(len(stack)):
        inv = tf.invert(transforms[k], shape)
        warped, valid = geometry.warp(stack.frames[k], inv)
        mask_w, _ = geometry.warp(stack.masks[k].astype(np.float64), inv)
        m = valid & (mask_w >= 0.999)
        acc += np.where(m, warped, 0.0)
        cnt += m
    out = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    if np.any(cnt == 0):
        out = np.where(cnt > 0, out, stack.frames[0])
    return out


def _bicubic_upsample(image: np.ndarray, q: int) -> np.ndarray:
    if q == 1:
        return image.copy()
    return ndimage.zoom(image, q, order=3, mode="nearest", grid_mode=True)


def _check_subpixel_diversity(transforms_hat, q: int, warn_sink: list):
    if q <= 1 or len(transforms_hat) < 2:
        return
    offsets = []
    for t in transforms_hat[1:]:
        p = t.params
        if t.kind == "translation":
            txy = p
        elif t.kind == "rigid":
            txy = p[1:]
        elif t.kind == "affine":
            txy = p[4:]
        else:
            txy = p[2:6:3]  # perspective numerator constants
        offsets.append(txy)
    offsets = np.asarray(offsets)
    frac = np.abs(offsets - q * np.round(offsets / q))
    if np.all(frac.max(axis=1) < 0.1):
        msg = ("insufficient sub-pixel jitter: all recovered shifts are within "
               "0.1 px of integer multiples of the downsampling factor")
        warn_sink.append(msg)
        warnings.warn(msg, stacklevel=3)


def _ratio_gain_init(stack: FrameStack, init_lr: np.ndarray,
                     transforms: list) -> np.ndarray:
    """First-order gain estimate: per-pixel ratio of the mean measurement to
    the mean predicted radiance under the registered average scene."""
    num = np.zeros(init_lr.shape)
    den = np.zeros(init_lr.shape)
    cnt = np.zeros(init_lr.shape)
    for k in range(len(stack)):
        pred, valid = geometry.warp(init_lr, transforms[k])
        m = valid & stack.masks[k]
        num += np.where(m, stack.frames[k], 0.0)
        den += np.where(m, pred, 0.0)
        cnt += m
    ok = (cnt > 0) & (den > 1e-6 * max(float(init_lr.max()), 1e-12) * cnt)
    g = np.divide(num, den, out=np.ones(init_lr.shape), where=ok)
    g = np.clip(g, 0.2, 5.0)
    return g / g.mean()


def _solve_joint(stack: FrameStack, config: SolveConfig, method: str,
                 x0_init: np.ndarray = None, transforms_init: list = None,
                 gain_init: np.ndarray = None,
                 offset_init: np.ndarray = None) -> SolveReport:
    frames = stack.frames
    n_frames, h, w = frames.shape
    q = config.downsample_q
    if n_frames < 2:
        raise SolverError("underdetermined: L*N < 3N + P(L-1) for L < 2")
    if q >= 2 and n_frames < 4:
        raise SolverError(f"super-resolution with Q={q} needs at least 4 frames")
    report_warnings = []
    if q >= 4 and n_frames < 8:
        report_warnings.append(f"Q={q} with only {n_frames} frames; 8+ recommended")
    hr_shape = (h * q, w * q)
    kind = config.transform_kind

    # -- initialization: registration, averaging, scene model warm-up
    if transforms_init is None:
        transforms_init = geometry.register_stack(
            frames, kind=kind, levels=config.registration_levels)
    else:
        transforms_init = [t.copy() for t in transforms_init]
    avg = average_baseline(stack, transforms_init)
    init_hr = _bicubic_upsample(avg, q)
    if x0_init is not None:
        init_hr = np.asarray(x0_init, dtype=np.float64).copy()
    radiance_max = 1.2 * float(init_hr.max())
    model = scene_models.build(config.scene_kind, hr_shape, seed=config.seed,
                               config=config.scene_config,
                               radiance_max=radiance_max,
                               init_image=init_hr if config.scene_kind == "pixel-grid" else None)
    if config.scene_kind != "pixel-grid" and config.warmup_iters > 0:
        scene_models.fit_direct(model, init_hr, config.warmup_iters, lr=config.lr)

    if gain_init is None:
        gain_init = _ratio_gain_init(stack, avg, transforms_init)

    # -- tape: shared gain/offset/scene, one warped prediction per frame
    tape = Tape()
    x0_node = scene_models.render(model, tape)
    g_tensor = Tensor(gain_init, requires_grad=True)
    o_tensor = Tensor(np.zeros((h, w)) if offset_init is None else offset_init,
                      requires_grad=True)
    g_node = tape.leaf(g_tensor)
    o_node = tape.leaf(o_tensor)
    t_tensors = []
    data_nodes = []
    for k in range(n_frames):
        y_node = tape.leaf(frames[k])
        if k == 0:
            # reference frame: identity transform, never optimized
            pred_src = tape.box_downsample(x0_node, q) if q > 1 else x0_node
            d = tape.mse(tape.mul(g_node, tape.add(pred_src, o_node)), y_node)
        else:
            params = tf.scale_params(kind, transforms_init[k].params, q)
            t_tensor = Tensor(params, requires_grad=config.optimize_transforms)
            t_tensors.append(t_tensor)
            t_node = tape.leaf(t_tensor)
            warped = tape.warp(x0_node, t_node, kind)
            pred_src = tape.box_downsample(warped, q) if q > 1 else warped
            pred = tape.mul(g_node, tape.add(pred_src, o_node))
            d = tape.mse(pred, y_node, mask_from=warped, mask_block=q)
        data_nodes.append(d)
    data_total = data_nodes[0]
    for d in data_nodes[1:]:
        data_total = tape.add(data_total, d)
    # Charbonnier TV exerts a constant force per difference while the MSE
    # data term's per-pixel force scales as (residual scale)/N, so the raw
    # weights are unit- and resolution-dependent.  Normalizing each TV term
    # by 32 * n_diffs / (frame scale) makes the configured weights
    # dimensionless shrinkage strengths: the default offset weight sits just
    # above the smooth-offset slope scale (letting smooth structure through
    # while rejecting high-frequency patterns the gain should explain).
    tv_img = tape.charbonnier_tv(x0_node)
    tv_off = tape.charbonnier_tv(o_node)
    scale_hat = max(float(frames.std()), 1e-12)
    img_norm = scale_hat / (32.0 * (2 * hr_shape[0] * hr_shape[1]
                                    - hr_shape[0] - hr_shape[1]))
    off_norm = scale_hat / (32.0 * (2 * h * w - h - w))
    loss = tape.add(data_total,
                    tape.add(tape.scalar_mul(tv_img, config.tv_image_weight * img_norm),
                             tape.scalar_mul(tv_off, config.tv_offset_weight * off_norm)))

    params = [(p, config.lr_scale_scene) for p in model.parameters]
    params += [(g_tensor, config.lr_scale_gain_offset),
               (o_tensor, config.lr_scale_gain_offset)]
    if config.optimize_transforms:
        params += [(t, config.lr_scale_transforms) for t in t_tensors]
    opt = Adam(params, lr=config.lr)

    curve = {"data": [], "tv_image": [], "tv_offset": [], "total": []}
    initial_data = None
    high_since = None
    decay_iter = int(config.lr_decay_at * config.iters) \
        if 0 < config.lr_decay_at < 1 else None
    x0_accum = None
    x0_count = 0
    for it in range(config.iters):
        if decay_iter is not None and it == decay_iter:
            opt.lr *= config.lr_decay_factor
        total_v, data_v, tvi_v, tvo_v = tape.forward([loss, data_total, tv_img, tv_off])
        if config.average_output and (decay_iter is None or it >= decay_iter):
            val = tape.nodes[x0_node].value
            x0_accum = val.copy() if x0_accum is None else x0_accum + val
            x0_count += 1
        total_f = float(total_v[0])
        data_f = float(data_v[0])
        if np.isnan(total_f):
            raise SolverDivergence(f"{method}: NaN loss at iteration {it}")
        curve["total"].append(total_f)
        curve["data"].append(data_f)
        curve["tv_image"].append(float(tvi_v[0]))
        curve["tv_offset"].append(float(tvo_v[0]))
        if initial_data is None:
            initial_data = max(data_f, 1e-300)
        if data_f > DIVERGENCE_FACTOR * initial_data:
            high_since = it if high_since is None else high_since
            if it - high_since >= DIVERGENCE_PATIENCE:
                raise SolverDivergence(
                    f"{method}: data loss exceeded {DIVERGENCE_FACTOR}x its "
                    f"initial value for {DIVERGENCE_PATIENCE} iterations "
                    f"(iteration {it})")
        else:
            high_since = None
        tape.backward(loss)
        opt.step()
        np.maximum(g_tensor.value, GAIN_PROJECT_FLOOR, out=g_tensor.value)
        if config.gain_mean_constraint:
            g_tensor.value /= g_tensor.value.mean()

    x0_hat, = tape.forward([x0_node])
    x0_hat = x0_hat.copy()
    if x0_count > 0:
        x0_hat = x0_accum / x0_count
    transforms_hat = [tf.TransformParams.identity(kind)]
    for t_tensor in t_tensors:
        transforms_hat.append(tf.TransformParams(kind, t_tensor.value.copy()))
    gain_hat = np.maximum(g_tensor.value.copy(), GAIN_PROJECT_FLOOR)
    nu_hat = NonUniformity(gain_hat, o_tensor.value.copy())

    unknowns, equations = unknown_equation_counts(
        x0_hat.size, n_frames, kind, stack.masks.sum())
    report = SolveReport(
        method=method, x0_hat=x0_hat, nu_hat=nu_hat,
        transforms_hat=transforms_hat, loss_curve=curve,
        unknown_count=unknowns, equation_count=equations, config=config,
        warnings=report_warnings,
        extras={"average_baseline_lr": avg, "initialization": init_hr,
                "radiance_max": radiance_max})
    if stack.truth is not None:
        report.psnr_vs_truth = psnr(x0_hat, stack.truth.scene)
        report.psnr_gauge_aligned = psnr_gauge_aligned(x0_hat, stack.truth.scene)
    _check_subpixel_diversity(transforms_hat, q, report.warnings)
    return report


def solve_physics_tv(stack: FrameStack, config: SolveConfig = None,
                     **init) -> SolveReport:
    """Joint gradient descent on a direct pixel-grid x0 with gain, offset
    and transforms (the physics + total-variation baseline)."""
    config = config or SolveConfig()
    cfg = SolveConfig(**{**config.to_dict(), "scene_kind": "pixel-grid",
                         "scene_config": None})
    return _solve_joint(stack, cfg, "physics-tv", **init)


def solve_deepir(stack: FrameStack, config: SolveConfig = None,
                 **init) -> SolveReport:
    """Joint optimization with a neural scene representation (deep decoder
    by default) standing in for the latent image."""
    config = config or SolveConfig()
    if config.scene_kind not in scene_models.SCENE_KINDS:
        raise SolverError(f"unknown scene model kind {config.scene_kind!r}")
    return _solve_joint(stack, config, "deepir", **init)


def solve_superres(stack: FrameStack, config: SolveConfig = None,
                   **init) -> SolveReport:
    """solve_deepir with box downsampling in the forward model: the latent
    image is recovered at Q times the measured resolution.  Q=1 reduces
    exactly to solve_deepir."""
    config = config or SolveConfig()
    report = _solve_joint(stack, config, "superres", **init)
    return report
