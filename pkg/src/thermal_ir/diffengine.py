"""A compact reverse-mode differentiation engine for image-domain losses.

The engine records a static computation graph (a Tape) over a fixed set of
operations: elementwise arithmetic, a few activations, 1x1/3x3 convolution,
nearest 2x upsampling, per-channel normalization, differentiable bilinear
warping by parametric transforms, box downsampling, Charbonnier-smoothed
total variation, masked MSE and summation.  That set is exactly what the
joint gain/offset/transform/scene optimization needs; there is no
broadcasting, no dynamic control flow and no higher-order differentiation.

Typical use::

    tape = Tape()
    x = tape.leaf(np.zeros((8, 8)), requires_grad=True)
    loss = tape.charbonnier_tv(x)
    tape.forward([loss])
    grads = tape.backward(loss)          # {leaf id: dLoss/dLeaf}

Leaves hold Tensor objects whose .value may be updated in place between
iterations; forward() always recomputes from the current leaf values.
Gradient accumulation runs in fixed reverse topological order, so repeated
forward/backward passes with identical leaves are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transforms as tf

CHARBONNIER_EPS = 1e-6
CHANNEL_NORM_EPS = 1e-5


class DiffEngineError(Exception):
    """Base class for engine failures."""


class ShapeError(DiffEngineError):
    """Operation inputs have incompatible shapes."""


class GradientError(DiffEngineError):
    """Backward pass produced an invalid (NaN) gradient."""


class Tensor:
    """Dense 64-bit float value with 1-4 dimensions.

    `value` is a C-contiguous float64 array; `grad` is filled by
    Tape.backward for leaves with requires_grad.
    """

    __slots__ = ("value", "requires_grad", "grad")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"tensors must have 1-4 dims, got {arr.ndim}")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dims must be >= 1, got {arr.shape}")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    tensor: Tensor = None          # leaves only
    shape: tuple = None            # output shape, fixed at build time
    value: np.ndarray = None       # latest forward value
    saved: dict = field(default_factory=dict)


class Tape:
    """Topologically ordered record of operations over leaf tensors."""

    def __init__(self, nan_check: bool = True):
        self.nodes: list[Node] = []
        self.leaf_ids: list[int] = []
        self.nan_check = nan_check

    # -- graph construction ---------------------------------------------------

    def leaf(self, value, requires_grad: bool = None) -> int:
        """Register a Tensor (or array) as a graph input; returns its node id."""
        t = value if isinstance(value, Tensor) else Tensor(value, bool(requires_grad))
        if requires_grad is not None:
            t.requires_grad = bool(requires_grad)
        node = Node("leaf", (), tensor=t, shape=t.shape)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self.leaf_ids.append(nid)
        return nid

    def tensor(self, nid: int) -> Tensor:
        node = self.nodes[nid]
        if node.tensor is None:
            raise DiffEngineError(f"node {nid} ({node.kind}) is not a leaf")
        return node.tensor

    def value(self, nid: int) -> np.ndarray:
        v = self.nodes[nid].value
        if v is None:
            raise DiffEngineError(f"node {nid} has no forward value; run forward() first")
        return v

    def _push(self, op_kind, inputs, shape, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise DiffEngineError(f"{op_kind}: input id {i} out of range")
        self.nodes.append(Node(op_kind, tuple(inputs), attrs=attrs, shape=tuple(shape)))
        return len(self.nodes) - 1

    def _shape(self, nid) -> tuple:
        return tuple(self.nodes[nid].shape)

    def _require_same(self, kind, a, b):
        if self._shape(a) != self._shape(b):
            raise ShapeError(
                f"{kind}: shape mismatch {self._shape(a)} vs {self._shape(b)} "
                f"(nodes {a}, {b})")

    def add(self, a: int, b: int) -> int:
        self._require_same("add", a, b)
        return self._push("add", (a, b), self._shape(a))

    def sub(self, a: int, b: int) -> int:
        self._require_same("sub", a, b)
        return self._push("sub", (a, b), self._shape(a))

    def mul(self, a: int, b: int) -> int:
        self._require_same("mul", a, b)
        return self._push("mul", (a, b), self._shape(a))

    def scalar_mul(self, x: int, c: float) -> int:
        return self._push("scalar_mul", (x,), self._shape(x), c=float(c))

    def clamp_min(self, x: int, bound: float) -> int:
        return self._push("clamp_min", (x,), self._shape(x), bound=float(bound))

    def leaky_relu(self, x: int, slope: float = 0.05) -> int:
        return self._push("leaky_relu", (x,), self._shape(x), slope=float(slope))

    def sigmoid(self, x: int) -> int:
        return self._push("sigmoid", (x,), self._shape(x))

    def conv2d(self, x: int, w: int, b: int = None) -> int:
        """Same-padded stride-1 convolution; kernels must be 1x1 or 3x3.

        x: (Cin, H, W), w: (Cout, Cin, k, k), b: (Cout,) optional.
        """
        xs, ws = self._shape(x), self._shape(w)
        if len(xs) != 3 or len(ws) != 4:
            raise ShapeError(f"conv2d: need x (Cin,H,W) and w (Cout,Cin,k,k), got {xs}, {ws}")
        if ws[1] != xs[0]:
            raise ShapeError(f"conv2d: channel mismatch x{xs} w{ws}")
        if ws[2] != ws[3] or ws[2] not in (1, 3):
            raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {ws[2]}x{ws[3]}")
        inputs = (x, w) if b is None else (x, w, b)
        if b is not None and self._shape(b) != (ws[0],):
            raise ShapeError(f"conv2d: bias must be ({ws[0]},), got {self._shape(b)}")
        return self._push("conv2d", inputs, (ws[0], xs[1], xs[2]))

    def upsample2x(self, x: int) -> int:
        """Nearest-neighbor 2x upsampling."""
        xs = self._shape(x)
        if len(xs) != 3:
            raise ShapeError(f"nearest-upsample-2x expects (C,H,W), got {xs}")
        return self._push("upsample2x", (x,), (xs[0], 2 * xs[1], 2 * xs[2]))

    def linear_upsample2x(self, x: int) -> int:
        """Bilinear 2x upsampling (half-pixel alignment, replicated edges).

        Pointwise layers after a nearest upsample can only produce images
        constant on 2x2 blocks, which both caps fidelity and litters the
        loss landscape with block-aligned critical points; upsampling
        generators therefore interpolate linearly.
        """
        xs = self._shape(x)
        if len(xs) != 3:
            raise ShapeError(f"linear-upsample-2x expects (C,H,W), got {xs}")
        return self._push("linear_upsample2x", (x,), (xs[0], 2 * xs[1], 2 * xs[2]))

    def channel_norm(self, x: int, gamma: int = None, beta: int = None) -> int:
        """Normalize each channel to zero mean / unit variance over its
        spatial extent, with optional learnable per-channel affine."""
        xs = self._shape(x)
        if len(xs) != 3:
            raise ShapeError(f"channel_norm expects (C,H,W), got {xs}")
        inputs = [x]
        if gamma is not None:
            if self._shape(gamma) != (xs[0],):
                raise ShapeError(f"channel_norm: gamma must be ({xs[0]},)")
            inputs.append(gamma)
        if beta is not None:
            if gamma is None:
                raise ShapeError("channel_norm: beta requires gamma")
            if self._shape(beta) != (xs[0],):
                raise ShapeError(f"channel_norm: beta must be ({xs[0]},)")
            inputs.append(beta)
        return self._push("channel_norm", tuple(inputs), xs)

    def warp(self, image: int, params: int, kind: str) -> int:
        """Differentiable bilinear warp of a 2D image by a parametric
        transform; both the image and the parameters receive gradients.
        Out-of-bounds samples are 0; the validity mask is saved on the node."""
        xs = self._shape(image)
        if len(xs) != 2:
            raise ShapeError(f"warp expects a 2D image, got {xs}")
        if self._shape(params) != (tf.PARAM_COUNTS[kind],):
            raise ShapeError(
                f"warp: {kind} needs {tf.PARAM_COUNTS[kind]} params, got {self._shape(params)}")
        return self._push("warp", (image, params), xs, kind=kind)

    def box_downsample(self, x: int, q: int) -> int:
        xs = self._shape(x)
        if q < 1:
            raise ShapeError(f"box_downsample: Q must be >= 1, got {q}")
        if len(xs) != 2 or xs[0] % q or xs[1] % q:
            raise ShapeError(f"box_downsample: shape {xs} not divisible by Q={q}")
        return self._push("box_downsample", (x,), (xs[0] // q, xs[1] // q), q=int(q))

    def charbonnier_tv(self, x: int, eps: float = CHARBONNIER_EPS) -> int:
        xs = self._shape(x)
        if len(xs) != 2:
            raise ShapeError(f"charbonnier_tv expects a 2D image, got {xs}")
        return self._push("charbonnier_tv", (x,), (1,), eps=float(eps))

    def mse(self, a: int, b: int, mask_from: int = None, mask_block: int = 1) -> int:
        """Mean squared error.  When mask_from names a warp node, pixels that
        warp sampled out of bounds are excluded; mask_block > 1 reduces the
        mask to a Q-times smaller grid (a block counts only if fully valid)."""
        self._require_same("mse", a, b)
        if mask_from is not None and self.nodes[mask_from].kind != "warp":
            raise DiffEngineError("mse: mask_from must reference a warp node")
        return self._push("mse", (a, b), (1,),
                          mask_from=mask_from, mask_block=int(mask_block))

    def sum(self, x: int) -> int:
        return self._push("sum", (x,), (1,))

    def reshape(self, x: int, shape) -> int:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(self._shape(x))):
            raise ShapeError(f"reshape: {self._shape(x)} -> {shape} changes size")
        return self._push("reshape", (x,), shape)

    # -- execution -------------------------------------------------------------

    def forward(self, outputs) -> list[np.ndarray]:
        """Evaluate the tape from current leaf values; returns the values of
        the requested nodes.  Saved intermediates are kept for backward()."""
        if isinstance(outputs, int):
            outputs = [outputs]
        last = max(outputs)
        for nid in range(last + 1):
            node = self.nodes[nid]
            if node.kind == "leaf":
                node.value = node.tensor.value
                continue
            args = [self.nodes[i].value for i in node.inputs]
            for i, a in zip(node.inputs, args):
                if a is None:
                    raise DiffEngineError(
                        f"node {nid} ({node.kind}): input {i} has no value")
            try:
                node.value = _FORWARD[node.kind](self, node, args)
            except ShapeError:
                raise
            except ValueError as exc:
                raise ShapeError(f"node {nid} ({node.kind}): {exc}") from exc
        return [self.nodes[o].value for o in outputs]

    def backward(self, loss: int) -> dict:
        """Reverse-mode sweep from a scalar loss node.

        Returns {leaf node id: gradient array} for leaves with
        requires_grad, and mirrors each gradient onto Tensor.grad.
        Intermediate gradients are freed as soon as they are consumed.
        """
        lnode = self.nodes[loss]
        if lnode.value is None:
            raise DiffEngineError("backward: run forward() first")
        if lnode.value.size != 1:
            raise DiffEngineError(
                f"backward: loss node must be scalar, got shape {lnode.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(lnode.value)}
        out: dict[int, np.ndarray] = {}
        for nid in range(loss, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind == "leaf":
                if node.tensor.requires_grad:
                    node.tensor.grad = g
                    out[nid] = g
                continue
            in_grads = _BACKWARD[node.kind](self, node, g)
            for i, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                if self.nan_check and np.isnan(ig).any():
                    raise GradientError(
                        f"NaN gradient produced by op '{node.kind}' (node {nid})")
                if i in grads:
                    grads[i] = grads[i] + ig
                else:
                    grads[i] = ig
        return out


# ----------------------------------------------------------------------------
# Forward rules.  Each takes (tape, node, input values) and returns the value.


def _f_add(tape, node, args):
    return args[0] + args[1]


def _f_sub(tape, node, args):
    return args[0] - args[1]


def _f_mul(tape, node, args):
    return args[0] * args[1]


def _f_scalar_mul(tape, node, args):
    return node.attrs["c"] * args[0]


def _f_clamp_min(tape, node, args):
    return np.maximum(args[0], node.attrs["bound"])


def _f_leaky_relu(tape, node, args):
    x = args[0]
    return np.where(x >= 0.0, x, node.attrs["slope"] * x)


def _f_sigmoid(tape, node, args):
    y = 1.0 / (1.0 + np.exp(-args[0]))
    node.saved["y"] = y
    return y


def _f_conv2d(tape, node, args):
    x, w = args[0], args[1]
    b = args[2] if len(args) > 2 else None
    cout, cin, k, _ = w.shape
    h, wd = x.shape[1:]
    if k == 1:
        y = (w.reshape(cout, cin) @ x.reshape(cin, -1)).reshape(cout, h, wd)
    else:
        # 3x3 as nine shifted 1x1 products (keeps everything in BLAS)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        node.saved["xp"] = xp
        acc = np.zeros((cout, h * wd))
        for dy in range(3):
            for dx in range(3):
                shift = np.ascontiguousarray(
                    xp[:, dy:dy + h, dx:dx + wd]).reshape(cin, -1)
                acc += w[:, :, dy, dx] @ shift
        y = acc.reshape(cout, h, wd)
    if b is not None:
        y = y + b[:, None, None]
    return np.ascontiguousarray(y)


def _f_upsample2x(tape, node, args):
    x = args[0]
    c, h, w = x.shape
    return np.broadcast_to(x[:, :, None, :, None],
                           (c, h, 2, w, 2)).reshape(c, 2 * h, 2 * w)


def _linear_up_axis(x, axis):
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _linear_up_adjoint_axis(g, axis):
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    dx = 0.75 * (ge + go)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def _f_linear_upsample2x(tape, node, args):
    return np.ascontiguousarray(
        _linear_up_axis(_linear_up_axis(args[0], 1), 2))


def _b_linear_upsample2x(tape, node, g):
    return (np.ascontiguousarray(
        _linear_up_adjoint_axis(_linear_up_adjoint_axis(g, 2), 1)),)


def _f_channel_norm(tape, node, args):
    x = args[0]
    n = x.shape[1] * x.shape[2]
    mean = np.einsum("chw->c", x) / n
    xhat = x - mean[:, None, None]
    var = np.einsum("chw,chw->c", xhat, xhat) / n
    inv = 1.0 / np.sqrt(var + CHANNEL_NORM_EPS)
    xhat *= inv[:, None, None]
    node.saved["xhat"] = xhat
    node.saved["inv"] = inv
    y = xhat
    if len(args) > 1:
        y = args[1][:, None, None] * xhat
    if len(args) > 2:
        y = y + args[2][:, None, None]
    return y


def _f_warp(tape, node, args):
    image, params = args
    kind = node.attrs["kind"]
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    X, Y = tf.map_coords(kind, params, xs, ys, image.shape)
    grid = tf.sample_grid(image.shape, X, Y)
    node.saved["grid"] = grid
    node.saved["xs"] = xs
    node.saved["ys"] = ys
    node.saved["valid"] = grid.valid
    return sample_values_contig(image, grid)


def sample_values_contig(image, grid):
    return np.ascontiguousarray(tf.sample_values(image, grid))


def _f_box_downsample(tape, node, args):
    x = args[0]
    q = node.attrs["q"]
    if q == 1:
        return x.copy()
    h, w = x.shape
    return x.reshape(h // q, q, w // q, q).mean(axis=(1, 3))


def _f_charbonnier_tv(tape, node, args):
    x = args[0]
    eps = node.attrs["eps"]
    dh = np.diff(x, axis=1)
    dv = np.diff(x, axis=0)
    rh = np.sqrt(dh * dh + eps * eps)
    rv = np.sqrt(dv * dv + eps * eps)
    node.saved["dh"], node.saved["dv"] = dh, dv
    node.saved["rh"], node.saved["rv"] = rh, rv
    total = (rh - eps).sum() + (rv - eps).sum()
    return np.array([total])


def _mse_mask(tape, node):
    src = node.attrs.get("mask_from")
    if src is None:
        return None
    mask = tape.nodes[src].saved["valid"]
    q = node.attrs.get("mask_block", 1)
    if q > 1:
        h, w = mask.shape
        mask = mask.reshape(h // q, q, w // q, q).all(axis=(1, 3))
    return mask


def _f_mse(tape, node, args):
    a, b = args
    d = a - b
    mask = _mse_mask(tape, node)
    if mask is None:
        count = d.size
        sq = d * d
    else:
        d = np.where(mask, d, 0.0)
        count = max(int(mask.sum()), 1)
        sq = d * d
    node.saved["diff"] = d
    node.saved["count"] = count
    return np.array([sq.sum() / count])


def _f_sum(tape, node, args):
    return np.array([args[0].sum()])


def _f_reshape(tape, node, args):
    return args[0].reshape(node.shape)


_FORWARD = {
    "add": _f_add, "sub": _f_sub, "mul": _f_mul, "scalar_mul": _f_scalar_mul,
    "clamp_min": _f_clamp_min, "leaky_relu": _f_leaky_relu, "sigmoid": _f_sigmoid,
    "conv2d": _f_conv2d, "upsample2x": _f_upsample2x,
    "linear_upsample2x": _f_linear_upsample2x, "channel_norm": _f_channel_norm,
    "warp": _f_warp, "box_downsample": _f_box_downsample,
    "charbonnier_tv": _f_charbonnier_tv, "mse": _f_mse, "sum": _f_sum,
    "reshape": _f_reshape,
}


# ----------------------------------------------------------------------------
# Backward rules.  Each takes (tape, node, upstream grad) and returns one
# gradient (or None) per input, in input order.


def _b_add(tape, node, g):
    return g, g


def _b_sub(tape, node, g):
    return g, -g


def _b_mul(tape, node, g):
    a, b = (tape.nodes[i].value for i in node.inputs)
    return g * b, g * a


def _b_scalar_mul(tape, node, g):
    return (node.attrs["c"] * g,)


def _b_clamp_min(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    # right-limit subgradient: pass-through at the bound itself
    return (np.where(x >= node.attrs["bound"], g, 0.0),)


def _b_leaky_relu(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return (np.where(x >= 0.0, g, node.attrs["slope"] * g),)


def _b_sigmoid(tape, node, g):
    y = node.saved["y"]
    return (g * y * (1.0 - y),)


def _b_conv2d(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    w = tape.nodes[node.inputs[1]].value
    has_bias = len(node.inputs) > 2
    cout, cin, k, _ = w.shape
    h, wd = x.shape[1:]
    gm = g.reshape(cout, -1)
    if k == 1:
        dx = (w.reshape(cout, cin).T @ gm).reshape(x.shape)
        dw = (gm @ x.reshape(cin, -1).T).reshape(w.shape)
    else:
        xp = node.saved["xp"]
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for dy in range(3):
            for dx_ in range(3):
                shift = np.ascontiguousarray(
                    xp[:, dy:dy + h, dx_:dx_ + wd]).reshape(cin, -1)
                dw[:, :, dy, dx_] = gm @ shift.T
                dxp[:, dy:dy + h, dx_:dx_ + wd] += \
                    (w[:, :, dy, dx_].T @ gm).reshape(cin, h, wd)
        dx = dxp[:, 1:-1, 1:-1]
    grads = [np.ascontiguousarray(dx), np.ascontiguousarray(dw)]
    if has_bias:
        grads.append(g.sum(axis=(1, 2)))
    return grads


def _b_upsample2x(tape, node, g):
    out = g[:, 0::2, 0::2] + g[:, 0::2, 1::2]
    out += g[:, 1::2, 0::2]
    out += g[:, 1::2, 1::2]
    return (out,)


def _b_channel_norm(tape, node, g):
    xhat = node.saved["xhat"]
    inv = node.saved["inv"]
    n = xhat.shape[1] * xhat.shape[2]
    has_gamma = len(node.inputs) > 1
    has_beta = len(node.inputs) > 2
    if has_gamma:
        gamma = tape.nodes[node.inputs[1]].value
        gh = g * gamma[:, None, None]
    else:
        gh = g.copy()
    # d/dx of (x - mean)/sqrt(var + eps), population statistics
    sum_gh = np.einsum("chw->c", gh)
    sum_gh_xhat = np.einsum("chw,chw->c", gh, xhat)
    dx = gh
    dx -= xhat * (sum_gh_xhat / n)[:, None, None]
    dx -= (sum_gh / n)[:, None, None]
    dx *= inv[:, None, None]
    grads = [dx]
    if has_gamma:
        grads.append(np.einsum("chw,chw->c", g, xhat))
    if has_beta:
        grads.append(np.einsum("chw->c", g))
    return grads


def _b_warp(tape, node, g):
    image = tape.nodes[node.inputs[0]].value
    params = tape.nodes[node.inputs[1]].value
    grid = node.saved["grid"]
    kind = node.attrs["kind"]
    d_image = tf.scatter_adjoint(g, grid)
    gx, gy = tf.sample_spatial_gradient(image, grid)
    dX, dY = tf.coord_jacobian(kind, params, node.saved["xs"], node.saved["ys"],
                               image.shape)
    wx = g * gx
    wy = g * gy
    d_params = np.tensordot(dX, wx, axes=((1, 2), (0, 1))) \
        + np.tensordot(dY, wy, axes=((1, 2), (0, 1)))
    return d_image, d_params


def _b_box_downsample(tape, node, g):
    q = node.attrs["q"]
    if q == 1:
        return (g.copy(),)
    up = np.repeat(np.repeat(g, q, axis=0), q, axis=1)
    return (up / (q * q),)


def _b_charbonnier_tv(tape, node, g):
    s = float(g[0])
    dh, dv = node.saved["dh"], node.saved["dv"]
    rh, rv = node.saved["rh"], node.saved["rv"]
    x = tape.nodes[node.inputs[0]].value
    out = np.zeros_like(x)
    ch = s * dh / rh
    cv = s * dv / rv
    out[:, 1:] += ch
    out[:, :-1] -= ch
    out[1:, :] += cv
    out[:-1, :] -= cv
    return (out,)


def _b_mse(tape, node, g):
    d = node.saved["diff"]
    scale = 2.0 * float(g[0]) / node.saved["count"]
    da = scale * d
    return da, -da


def _b_sum(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return (np.full_like(x, float(g[0])),)


def _b_reshape(tape, node, g):
    return (g.reshape(tape.nodes[node.inputs[0]].shape),)


_BACKWARD = {
    "add": _b_add, "sub": _b_sub, "mul": _b_mul, "scalar_mul": _b_scalar_mul,
    "clamp_min": _b_clamp_min, "leaky_relu": _b_leaky_relu, "sigmoid": _b_sigmoid,
    "conv2d": _b_conv2d, "upsample2x": _b_upsample2x,
    "linear_upsample2x": _b_linear_upsample2x, "channel_norm": _b_channel_norm,
    "warp": _b_warp, "box_downsample": _b_box_downsample,
    "charbonnier_tv": _b_charbonnier_tv, "mse": _b_mse, "sum": _b_sum,
    "reshape": _b_reshape,
}

OP_KINDS = tuple(sorted(_FORWARD))


# ----------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    tolerance: float
    step: float
    underflow_warning: bool = False

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        note = " (finite-difference underflow)" if self.underflow_warning else ""
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"over {self.checked} elements at tol {self.tolerance:g}{note}")


def grad_check(tape: Tape, loss: int, leaf: int, step: float = 1e-6,
               tolerance: float = 1e-4, max_elements: int = 64,
               seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of `loss` w.r.t. `leaf` against two-sided
    finite differences.

    All elements of the leaf are probed, or a seeded random subsample of
    max(64, max_elements) for larger leaves.  Elements whose gradient is far
    below the leaf's dominant gradient magnitude are compared on that scale
    instead of relatively (central differences cannot resolve them), and an
    underflow warning is raised when the step is too small to change the
    loss in 64-bit at any significant element.
    """
    t = tape.tensor(leaf)
    tape.forward([loss])
    grads = tape.backward(loss)
    if leaf not in grads:
        raise DiffEngineError("grad_check: leaf has requires_grad=False")
    analytic = grads[leaf].ravel()

    n = t.size
    budget = max(64, max_elements)
    if n <= budget:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(seed).choice(n, size=budget, replace=False)

    flat = t.value.ravel()
    gscale = float(np.max(np.abs(analytic))) if analytic.size else 0.0
    floor = 0.01 * gscale + 1e-12
    max_rel = 0.0
    underflow = False
    eps64 = np.finfo(np.float64).eps
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(tape.forward([loss])[0][0])
        flat[i] = orig - step
        fm = float(tape.forward([loss])[0][0])
        flat[i] = orig
        diff = fp - fm
        resolution = 16 * eps64 * max(abs(fp), abs(fm))
        if abs(diff) <= resolution and abs(analytic[i]) > max(floor, tolerance):
            underflow = True
        numeric = diff / (2.0 * step)
        rel = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]), floor)
        max_rel = max(max_rel, rel)
    tape.forward([loss])  # restore saved values for the unperturbed point
    return GradCheckReport(max_rel_error=max_rel, passed=bool(max_rel < tolerance),
                           checked=len(idx), tolerance=tolerance, step=step,
                           underflow_warning=underflow)
