"""Microbolometer thermal image simulation and joint scene/non-uniformity
recovery from jittered frame stacks."""

from .diffengine import (GradCheckReport, Tape, Tensor, grad_check)
from .geometry import (box_downsample, gaussian_pyramid, register_pair,
                       register_stack, warp)
from .metrics import mse, psnr, psnr_gauge_aligned
from .scene_models import (CoordMlpConfig, DeepDecoderConfig, SceneModel,
                           build as build_scene_model, fit_direct, render,
                           render_image)
from .sensor import (BolometerParams, FrameStack, GroundTruth, NoiseConfig,
                     NonUniformity, gain_offset_from_physics,
                     sample_jitter_transforms, sample_nonuniformity,
                     simulate_capture, step_response, synthetic_scene)
from .solver import (SolveConfig, SolveReport, average_baseline,
                     solve_deepir, solve_physics_tv, solve_superres)
from .stats import JitterStats, averaging_variance, estimate_jitter_stats
from .transforms import TransformParams

__version__ = "0.1.0"

__all__ = [
    "BolometerParams", "CoordMlpConfig", "DeepDecoderConfig", "FrameStack",
    "GradCheckReport", "GroundTruth", "JitterStats", "NoiseConfig",
    "NonUniformity", "SceneModel", "SolveConfig", "SolveReport", "Tape",
    "Tensor", "TransformParams", "average_baseline", "averaging_variance",
    "box_downsample", "build_scene_model", "estimate_jitter_stats",
    "fit_direct", "gain_offset_from_physics", "gaussian_pyramid",
    "grad_check", "mse", "psnr", "psnr_gauge_aligned", "register_pair",
    "register_stack", "render", "render_image", "sample_jitter_transforms",
    "sample_nonuniformity", "simulate_capture", "solve_deepir",
    "solve_physics_tv", "solve_superres", "step_response", "synthetic_scene",
    "warp",
]
