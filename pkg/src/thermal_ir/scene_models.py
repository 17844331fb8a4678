"""Pluggable latent-image representations.

Each model renders the scene radiance estimate x0 as a differentiable tape
sub-graph over its parameter tensors.  Three kinds are provided:

  pixel-grid    one tensor per pixel, clamped non-negative (the direct
                parameterization used by the physics+TV solver)
  deep-decoder  an under-parameterized upsampling generator: 1x1 convs,
                nearest 2x upsampling, leaky ReLU and channel
                normalization, driven by a fixed random seed tensor
  coord-mlp     a per-pixel MLP over fixed random Fourier features of the
                normalized pixel coordinates

Neural kinds end in a sigmoid scaled to the radiance range, so renders are
bounded in [0, radiance_max].  The fixed input never requires gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics
from .diffengine import Tape, Tensor
from .optim import Adam

SCENE_KINDS = ("pixel-grid", "deep-decoder", "coord-mlp")
LEAKY_SLOPE = 0.05


class SceneModelError(ValueError):
    pass


class FitError(RuntimeError):
    """Raised when fitting aborts (NaN loss)."""


@dataclass
class DeepDecoderConfig:
    channels: int = 64
    layers: int = 5
    # nearest upsampling with purely pointwise layers yields 2x2-blockwise
    # constant outputs and bad critical points; linear interpolation is the
    # standard choice for upsampling generators
    upsample: str = "linear"
    # a 3x3 output head adds local spatial adaptivity on top of the
    # otherwise pointwise decoder
    head_kernel: int = 1

    def __post_init__(self):
        if self.upsample not in ("linear", "nearest"):
            raise SceneModelError(f"unknown upsample mode {self.upsample!r}")
        if self.head_kernel not in (1, 3):
            raise SceneModelError("head_kernel must be 1 or 3")


@dataclass
class CoordMlpConfig:
    fourier_features: int = 128
    bandwidth: float = 6.0
    hidden_units: int = 128
    hidden_layers: int = 3


@dataclass
class SceneModel:
    kind: str
    parameters: list            # Tensor, requires_grad=True
    fixed_input: Tensor         # never optimized (None for pixel-grid)
    output_shape: tuple
    radiance_max: float
    config: object = None
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _he_conv(rng, cout, cin) -> np.ndarray:
    return rng.standard_normal((cout, cin, 1, 1)) * np.sqrt(2.0 / cin)


def build(kind: str, shape, seed: int = 0, config=None,
          radiance_max: float = 1.0, init_image: np.ndarray = None) -> SceneModel:
    """Construct a scene model with freshly initialized parameters and (for
    neural kinds) the fixed random input tensor.  Deterministic per seed."""
    h, w = int(shape[0]), int(shape[1])
    rng = np.random.default_rng(seed)
    if kind == "pixel-grid":
        if init_image is not None:
            base = np.asarray(init_image, dtype=np.float64)
            if base.shape != (h, w):
                raise SceneModelError(
                    f"init image shape {base.shape} != output {(h, w)}")
        else:
            base = np.full((h, w), 0.5 * radiance_max)
        return SceneModel(kind, [Tensor(base, requires_grad=True)], None,
                          (h, w), radiance_max, config=None, seed=seed)
    if kind == "deep-decoder":
        cfg = config or DeepDecoderConfig()
        factor = 2 ** cfg.layers
        if h % factor or w % factor:
            pad_h = -(-h // factor) * factor
            pad_w = -(-w // factor) * factor
            raise SceneModelError(
                f"deep-decoder needs dims divisible by 2^{cfg.layers}={factor}; "
                f"got {(h, w)}, pad to {(pad_h, pad_w)}")
        h0, w0 = h // factor, w // factor
        if min(h0, w0) < 1:
            raise SceneModelError(f"shape {(h, w)} too small for {cfg.layers} layers")
        z = Tensor(rng.standard_normal((cfg.channels, h0, w0)), requires_grad=False)
        params = []
        for _ in range(cfg.layers):
            params.append(Tensor(_he_conv(rng, cfg.channels, cfg.channels),
                                 requires_grad=True))
            params.append(Tensor(np.zeros(cfg.channels), requires_grad=True))  # bias
            params.append(Tensor(np.ones(cfg.channels), requires_grad=True))   # gamma
            params.append(Tensor(np.zeros(cfg.channels), requires_grad=True))  # beta
        k = cfg.head_kernel
        head = rng.standard_normal((1, cfg.channels, k, k)) \
            * np.sqrt(2.0 / (cfg.channels * k * k))
        params.append(Tensor(head, requires_grad=True))
        params.append(Tensor(np.zeros(1), requires_grad=True))
        return SceneModel(kind, params, z, (h, w), radiance_max, cfg, seed)
    if kind == "coord-mlp":
        cfg = config or CoordMlpConfig()
        freqs = rng.standard_normal((cfg.fourier_features, 2)) * cfg.bandwidth
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = np.stack([xs / max(w - 1, 1), ys / max(h - 1, 1)])  # (2, H, W)
        phase = 2.0 * np.pi * np.tensordot(freqs, coords, axes=1)    # (F, H, W)
        feats = np.concatenate([np.sin(phase), np.cos(phase)])       # (2F, H, W)
        z = Tensor(feats, requires_grad=False)
        params = []
        cin = 2 * cfg.fourier_features
        for _ in range(cfg.hidden_layers):
            params.append(Tensor(_he_conv(rng, cfg.hidden_units, cin),
                                 requires_grad=True))
            params.append(Tensor(np.zeros(cfg.hidden_units), requires_grad=True))
            cin = cfg.hidden_units
        params.append(Tensor(_he_conv(rng, 1, cin), requires_grad=True))
        params.append(Tensor(np.zeros(1), requires_grad=True))
        return SceneModel(kind, params, z, (h, w), radiance_max, cfg, seed)
    raise SceneModelError(f"unknown scene model kind {kind!r}")


def render(model: SceneModel, tape: Tape) -> int:
    """Add the model's generator to a tape; returns the (H, W) image node."""
    h, w = model.output_shape
    if model.kind == "pixel-grid":
        x = tape.leaf(model.parameters[0])
        return tape.clamp_min(x, 0.0)
    if model.kind == "deep-decoder":
        cfg = model.config
        up = tape.linear_upsample2x if cfg.upsample == "linear" else tape.upsample2x
        x = tape.leaf(model.fixed_input)
        pids = [tape.leaf(p) for p in model.parameters]
        for i in range(cfg.layers):
            wgt, bias, gamma, beta = pids[4 * i: 4 * i + 4]
            x = tape.conv2d(x, wgt, bias)
            x = up(x)
            x = tape.leaky_relu(x, LEAKY_SLOPE)
            x = tape.channel_norm(x, gamma, beta)
        x = tape.conv2d(x, pids[-2], pids[-1])
        x = tape.sigmoid(x)
        x = tape.scalar_mul(x, model.radiance_max)
        return tape.reshape(x, (h, w))
    if model.kind == "coord-mlp":
        cfg = model.config
        x = tape.leaf(model.fixed_input)
        pids = [tape.leaf(p) for p in model.parameters]
        for i in range(cfg.hidden_layers):
            x = tape.conv2d(x, pids[2 * i], pids[2 * i + 1])
            x = tape.leaky_relu(x, LEAKY_SLOPE)
        x = tape.conv2d(x, pids[-2], pids[-1])
        x = tape.sigmoid(x)
        x = tape.scalar_mul(x, model.radiance_max)
        return tape.reshape(x, (h, w))
    raise SceneModelError(f"unknown scene model kind {model.kind!r}")


def render_image(model: SceneModel) -> np.ndarray:
    """Evaluate the model once outside any optimization."""
    tape = Tape()
    node = render(model, tape)
    return tape.forward([node])[0]


@dataclass
class FitReport:
    psnr_curve: list
    loss_curve: list
    iterations: int


def fit_direct(model: SceneModel, target: np.ndarray, iters: int,
               lr: float = 1e-3, stop_at_psnr: float = None,
               optimizer: str = "adam") -> FitReport:
    """Fit the representation to a target image by MSE alone (no sensor
    model); the per-iteration PSNR curve diagnoses capacity and
    over-fitting.  Parameters are updated in place.

    optimizer 'gd' is plain gradient descent, the natural choice for the
    convex pixel-grid case (lr = H*W/2 solves it in one step).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != tuple(model.output_shape):
        raise SceneModelError(
            f"target shape {target.shape} != model output {model.output_shape}")
    if optimizer not in ("adam", "gd"):
        raise SceneModelError(f"unknown optimizer {optimizer!r}")
    tape = Tape()
    x = render(model, tape)
    t = tape.leaf(target)
    loss = tape.mse(x, t)
    opt = Adam(model.parameters, lr=lr) if optimizer == "adam" else None
    psnr_curve = []
    loss_curve = []
    for i in range(iters):
        val, rendered = (v for v in tape.forward([loss, x]))
        loss_val = float(val[0])
        if np.isnan(loss_val):
            raise FitError(f"NaN loss at iteration {i}")
        loss_curve.append(loss_val)
        psnr_curve.append(metrics.psnr(rendered, target))
        if stop_at_psnr is not None and psnr_curve[-1] >= stop_at_psnr:
            break
        tape.backward(loss)
        if opt is not None:
            opt.step()
        else:
            for p in model.parameters:
                if p.grad is not None:
                    p.value -= lr * p.grad
    return FitReport(psnr_curve=psnr_curve, loss_curve=loss_curve,
                     iterations=len(loss_curve))


# ----------------------------------------------------------------------------
# Checkpoints: one JSON header line, then the raw 64-bit parameter arrays
# (in order) followed by the fixed input.


def save_checkpoint(model: SceneModel, path):
    header = {
        "kind": model.kind,
        "seed": model.seed,
        "output_shape": list(model.output_shape),
        "radiance_max": model.radiance_max,
        "config": asdict(model.config) if model.config is not None else None,
        "param_shapes": [list(p.shape) for p in model.parameters],
        "fixed_input_shape": (list(model.fixed_input.shape)
                              if model.fixed_input is not None else None),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for p in model.parameters:
            f.write(p.value.tobytes())
        if model.fixed_input is not None:
            f.write(model.fixed_input.value.tobytes())


def load_checkpoint(path) -> SceneModel:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    kind = header["kind"]
    cfg = None
    if header["config"] is not None:
        cfg_cls = {"deep-decoder": DeepDecoderConfig, "coord-mlp": CoordMlpConfig}[kind]
        cfg = cfg_cls(**header["config"])
    params = []
    off = 0
    for shp in header["param_shapes"]:
        n = int(np.prod(shp))
        arr = np.frombuffer(blob, dtype=np.float64, count=n, offset=off).reshape(shp)
        params.append(Tensor(arr.copy(), requires_grad=True))
        off += 8 * n
    fixed = None
    if header["fixed_input_shape"] is not None:
        shp = header["fixed_input_shape"]
        n = int(np.prod(shp))
        arr = np.frombuffer(blob, dtype=np.float64, count=n, offset=off).reshape(shp)
        fixed = Tensor(arr.copy(), requires_grad=False)
    return SceneModel(kind, params, fixed, tuple(header["output_shape"]),
                      header["radiance_max"], cfg, header["seed"])
