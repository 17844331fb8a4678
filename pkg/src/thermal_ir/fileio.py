"""File formats: PFM float maps, 16-bit PGM export, frame-stack directories
and solver result directories.

PFM layout (grayscale): header "Pf\\n<W> <H>\\n<scale>\\n" followed by W*H
32-bit floats in bottom-up row order; scale -1.0 marks little-endian data.
Round-tripping is bit-exact for finite 32-bit values.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .sensor import FrameStack, GroundTruth, NoiseConfig, NonUniformity
from .transforms import TransformParams


class FileFormatError(ValueError):
    pass


def write_pfm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2:
        raise FileFormatError(f"PFM writer expects a 2D image, got {image.shape}")
    h, w = image.shape
    data = np.flipud(image).astype("<f4")
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise FileFormatError(f"{path}: not a grayscale PFM (header {magic!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FileFormatError(f"{path}: malformed dimension line")
        w, h = int(dims[0]), int(dims[1])
        if w < 1 or h < 1:
            raise FileFormatError(f"{path}: bad dimensions {w}x{h}")
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise FileFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_pgm16(path, image: np.ndarray):
    """Min-max normalized 16-bit PGM for human viewing."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    q = np.round((image - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def _json_value(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
    return v


def dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_value)
        f.write("\n")


def write_transforms(path, transforms):
    dump_json(path, [t.to_dict() for t in transforms])


def read_transforms(path) -> list:
    with open(path) as f:
        return [TransformParams.from_dict(d) for d in json.load(f)]


# ----------------------------------------------------------------------------
# Frame-stack directories


def write_stack(directory, stack: FrameStack, export_pgm: bool = False):
    """Serialize a stack: frame_%04d.pfm, ground truth maps when present
    (gain/offset/scene + transforms.json), meta.json, and per-frame validity
    masks when any pixel is invalid."""
    os.makedirs(directory, exist_ok=True)
    for k in range(len(stack)):
        write_pfm(os.path.join(directory, f"frame_{k:04d}.pfm"), stack.frames[k])
        if export_pgm:
            write_pgm16(os.path.join(directory, f"frame_{k:04d}.pgm"),
                        stack.frames[k])
    has_masks = not bool(stack.masks.all())
    if has_masks:
        for k in range(len(stack)):
            write_pfm(os.path.join(directory, f"mask_{k:04d}.pfm"),
                      stack.masks[k].astype(np.float64))
    meta = {
        "n_frames": len(stack),
        "shape": list(stack.shape),
        "downsample_q": stack.downsample_q,
        "noise": stack.noise.to_dict() if stack.noise is not None else None,
        "seed": stack.noise.seed if stack.noise is not None else None,
        "has_masks": has_masks,
        "has_truth": stack.truth is not None,
    }
    meta.update(stack.meta)
    dump_json(os.path.join(directory, "meta.json"), meta)
    if stack.truth is not None:
        write_pfm(os.path.join(directory, "gain.pfm"), stack.truth.nu.gain)
        write_pfm(os.path.join(directory, "offset.pfm"), stack.truth.nu.offset)
        write_pfm(os.path.join(directory, "scene.pfm"), stack.truth.scene)
        write_transforms(os.path.join(directory, "transforms.json"),
                         stack.truth.transforms)


def read_stack(directory) -> FrameStack:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise FileFormatError(f"{directory}: missing meta.json")
    with open(meta_path) as f:
        meta = json.load(f)
    n = int(meta["n_frames"])
    frames = np.stack([read_pfm(os.path.join(directory, f"frame_{k:04d}.pfm"))
                       for k in range(n)])
    if meta.get("has_masks"):
        masks = np.stack([read_pfm(os.path.join(directory, f"mask_{k:04d}.pfm")) >= 0.5
                          for k in range(n)])
    else:
        masks = np.ones(frames.shape, dtype=bool)
    truth = None
    if meta.get("has_truth"):
        nu = NonUniformity(read_pfm(os.path.join(directory, "gain.pfm")),
                           read_pfm(os.path.join(directory, "offset.pfm")))
        truth = GroundTruth(
            scene=read_pfm(os.path.join(directory, "scene.pfm")),
            nu=nu,
            transforms=read_transforms(os.path.join(directory, "transforms.json")))
    noise = NoiseConfig(**meta["noise"]) if meta.get("noise") else None
    return FrameStack(frames=frames, masks=masks, truth=truth, noise=noise,
                      downsample_q=int(meta.get("downsample_q", 1)),
                      meta={"source": str(directory)})


# ----------------------------------------------------------------------------
# Solver result directories


def write_solve_results(directory, report, config_echo: dict,
                        export_pgm: bool = False):
    """x0_hat.pfm, gain_hat.pfm, offset_hat.pfm, transforms_hat.json and a
    report.json that echoes the fully resolved configuration."""
    os.makedirs(directory, exist_ok=True)
    write_pfm(os.path.join(directory, "x0_hat.pfm"), report.x0_hat)
    write_pfm(os.path.join(directory, "gain_hat.pfm"), report.nu_hat.gain)
    write_pfm(os.path.join(directory, "offset_hat.pfm"), report.nu_hat.offset)
    if export_pgm:
        write_pgm16(os.path.join(directory, "x0_hat.pgm"), report.x0_hat)
    write_transforms(os.path.join(directory, "transforms_hat.json"),
                     report.transforms_hat)
    payload = {
        "method": report.method,
        "unknown_count": report.unknown_count,
        "equation_count": report.equation_count,
        "psnr_vs_truth": report.psnr_vs_truth,
        "psnr_gauge_aligned": report.psnr_gauge_aligned,
        "loss_curve": report.loss_curve,
        "warnings": report.warnings,
        "config": config_echo,
    }
    payload.update({k: v for k, v in report.extras.items()
                    if isinstance(v, (int, float, str, list, dict, type(None)))})
    dump_json(os.path.join(directory, "report.json"), payload)
