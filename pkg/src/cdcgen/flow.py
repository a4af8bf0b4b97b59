"""RealNVP-style affine coupling flows for vectors and images.

Latent layout for image flows: the latent vector is the concatenation of the
pieces factored out at each scale, in scale order, each flattened in
(channel, row, column) order; the final scale's output comes last.
"""

import math
from collections import namedtuple

import numpy as np

from cdcgen.diffmath import MLP, ActNorm, Conv2d, Module, ModuleList, NonFiniteError, Tensor, no_grad, ops
from cdcgen.diffmath.tensor import ShapeError

LOG_2PI = math.log(2.0 * math.pi)
SCALE_CLAMP = 2.0
LOGIT_ALPHA = 0.05

LatentBatch = namedtuple("LatentBatch", ["z", "log_det"])
Dequantized = namedtuple("Dequantized", ["values", "log_det"])


class FlowError(NonFiniteError):
    def __init__(self, layer, direction):
        super().__init__(f"non-finite value at coupling layer {layer} ({direction})")
        self.layer = layer


def _clamped_log_scale(raw, clamp):
    return ops.tanh(raw * (1.0 / clamp)) * clamp


def _check(t, layer, direction):
    if not np.all(np.isfinite(t.data)):
        raise FlowError(layer, direction)


def _run(fn, x, layer, direction):
    """Apply one coupling; any non-finite value is reported with its layer index."""
    try:
        out, ld = fn(x)
    except FlowError:
        raise
    except NonFiniteError as exc:
        raise FlowError(layer, direction) from exc
    _check(out, layer, direction)
    return out, ld


class VectorCoupling(Module):
    """Affine coupling on flat vectors; ``mask`` marks the pass-through half."""

    def __init__(self, dim, mask, hidden, rng, depth=3, clamp=SCALE_CLAMP):
        super().__init__()
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (dim,) or mask.sum() in (0, dim):
            raise ValueError("mask must split the coordinates into two non-empty sets")
        self.mask = mask
        self.clamp = clamp
        self.dim = dim
        self.net = MLP([dim] + [hidden] * (depth - 1) + [2 * dim], rng, zero_last=True)

    def _scale_shift(self, x_fixed):
        h = self.net(x_fixed)
        free = 1.0 - self.mask
        s = _clamped_log_scale(h[:, :self.dim], self.clamp) * free
        t = h[:, self.dim:] * free
        return s, t

    def forward(self, x):
        s, t = self._scale_shift(x * self.mask)
        z = x * self.mask + (x * ops.exp(s) + t) * (1.0 - self.mask)
        return z, ops.sum(s, axis=1)

    def inverse(self, z):
        s, t = self._scale_shift(z * self.mask)
        x = z * self.mask + ((z - t) * ops.exp(-s)) * (1.0 - self.mask)
        return x, -ops.sum(s, axis=1)


def alternating_masks(dim, n):
    half = np.zeros(dim)
    half[: dim // 2] = 1.0
    return [half if i % 2 == 0 else 1.0 - half for i in range(n)]


class VectorFlow(Module):
    """Stack of fully connected affine couplings with alternating half masks."""

    kind = "vector"

    def __init__(self, dim, n_layers=8, hidden=64, rng=None, depth=3, clamp=SCALE_CLAMP):
        super().__init__()
        if dim < 2:
            raise ValueError("vector flows need dim >= 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.hidden = hidden
        self.input_shape = (dim,)
        self.latent_dim = dim
        self.couplings = ModuleList(
            VectorCoupling(dim, m, hidden, rng, depth=depth, clamp=clamp)
            for m in alternating_masks(dim, n_layers)
        )

    def config(self):
        return {"kind": "vector", "dim": self.dim, "n_layers": len(self.couplings), "hidden": self.hidden}

    def forward(self, x):
        x = _as_batch(x, self.input_shape)
        log_det = Tensor(np.zeros(x.shape[0]))
        for i, layer in enumerate(self.couplings):
            x, ld = _run(layer.forward, x, i, "forward")
            log_det = log_det + ld
        return LatentBatch(x, log_det)

    def inverse(self, z):
        z = _latent_tensor(z, self.latent_dim)
        log_det = Tensor(np.zeros(z.shape[0]))
        for i in reversed(range(len(self.couplings))):
            z, ld = _run(self.couplings[i].inverse, z, i, "inverse")
            log_det = log_det + ld
        return z

    def log_prob(self, x):
        return log_prob(self, x)


class ResNet(Module):
    """3x3 conv trunk with residual blocks; the output conv starts at zero."""

    def __init__(self, c_in, c_out, channels, blocks, rng):
        super().__init__()
        self.inp = Conv2d(c_in, channels, 3, rng, padding=1)
        self.blocks = ModuleList()
        for _ in range(blocks):
            blk = Module()
            blk.norm1 = ActNorm(channels)
            blk.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
            blk.norm2 = ActNorm(channels)
            blk.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
            self.blocks.append(blk)
        self.norm_out = ActNorm(channels)
        self.out = Conv2d(channels, c_out, 3, rng, padding=1, zero=True)

    def forward(self, x):
        h = self.inp(x)
        for blk in self.blocks:
            r = blk.conv1(ops.leaky_relu(blk.norm1(h)))
            r = blk.conv2(ops.leaky_relu(blk.norm2(r)))
            h = h + r
        return self.out(ops.leaky_relu(self.norm_out(h)))


def checkerboard(h, w, parity):
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (((ii + jj) % 2) == parity).astype(np.float64)[None, None]


class CheckerboardCoupling(Module):
    def __init__(self, channels, height, width, parity, n_channels, n_blocks, rng, clamp=SCALE_CLAMP):
        super().__init__()
        self.mask = checkerboard(height, width, parity)
        self.c = channels
        self.clamp = clamp
        self.net = ResNet(channels, 2 * channels, n_channels, n_blocks, rng)

    def _scale_shift(self, x_fixed):
        h = self.net(x_fixed)
        free = 1.0 - self.mask
        s = _clamped_log_scale(h[:, :self.c], self.clamp) * free
        t = h[:, self.c:] * free
        return s, t

    def forward(self, x):
        s, t = self._scale_shift(x * self.mask)
        z = x * self.mask + (x * ops.exp(s) + t) * (1.0 - self.mask)
        return z, ops.sum(ops.reshape(s, (s.shape[0], -1)), axis=1)

    def inverse(self, z):
        s, t = self._scale_shift(z * self.mask)
        x = z * self.mask + ((z - t) * ops.exp(-s)) * (1.0 - self.mask)
        return x, -ops.sum(ops.reshape(s, (s.shape[0], -1)), axis=1)


class ChannelCoupling(Module):
    """Half the channels condition an affine map of the other half."""

    def __init__(self, channels, flip, n_channels, n_blocks, rng, clamp=SCALE_CLAMP):
        super().__init__()
        if channels % 2:
            raise ValueError("channel coupling needs an even channel count")
        self.half = channels // 2
        self.flip = flip
        self.clamp = clamp
        self.net = ResNet(self.half, 2 * self.half, n_channels, n_blocks, rng)

    def _split(self, x):
        a, b = x[:, :self.half], x[:, self.half:]
        return (b, a) if self.flip else (a, b)

    def _join(self, fixed, moved):
        return ops.concat([moved, fixed] if self.flip else [fixed, moved], axis=1)

    def _scale_shift(self, fixed):
        h = self.net(fixed)
        return _clamped_log_scale(h[:, :self.half], self.clamp), h[:, self.half:]

    def forward(self, x):
        fixed, moved = self._split(x)
        s, t = self._scale_shift(fixed)
        out = moved * ops.exp(s) + t
        return self._join(fixed, out), ops.sum(ops.reshape(s, (s.shape[0], -1)), axis=1)

    def inverse(self, z):
        fixed, moved = self._split(z)
        s, t = self._scale_shift(fixed)
        out = (moved - t) * ops.exp(-s)
        return self._join(fixed, out), -ops.sum(ops.reshape(s, (s.shape[0], -1)), axis=1)


class ImageFlow(Module):
    """Multi-scale RealNVP(N_scales, N_channels, N_blocks) over (C, H, W) images.

    Every scale but the last runs three checkerboard couplings, a 2x2
    squeeze, three channel couplings and then factors out half the channels.
    The last scale runs four checkerboard couplings.
    """

    kind = "image"

    def __init__(self, input_shape, n_scales=2, n_channels=64, n_blocks=8, rng=None, clamp=SCALE_CLAMP):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c, h, w = input_shape
        if h % (2 ** (n_scales - 1)) or w % (2 ** (n_scales - 1)):
            raise ValueError(f"input {input_shape} cannot be squeezed {n_scales - 1} times")
        self.input_shape = tuple(input_shape)
        self.n_scales = n_scales
        self.n_channels = n_channels
        self.n_blocks = n_blocks
        self.scales = ModuleList()
        self.factor_shapes = []
        for i in range(n_scales):
            stage = Module()
            if i < n_scales - 1:
                stage.pre = ModuleList(
                    CheckerboardCoupling(c, h, w, k % 2, n_channels, n_blocks, rng, clamp) for k in range(3)
                )
                c, h, w = 4 * c, h // 2, w // 2
                stage.post = ModuleList(ChannelCoupling(c, k % 2 == 1, n_channels, n_blocks, rng, clamp) for k in range(3))
                c = c // 2
                self.factor_shapes.append((c, h, w))
            else:
                stage.pre = ModuleList(
                    CheckerboardCoupling(c, h, w, k % 2, n_channels, n_blocks, rng, clamp) for k in range(4)
                )
                stage.post = ModuleList()
                self.factor_shapes.append((c, h, w))
            self.scales.append(stage)
        self.latent_dim = int(sum(np.prod(s) for s in self.factor_shapes))
        assert self.latent_dim == int(np.prod(self.input_shape))

    def config(self):
        return {"kind": "image", "input_shape": list(self.input_shape), "n_scales": self.n_scales,
                "n_channels": self.n_channels, "n_blocks": self.n_blocks}

    def forward(self, x):
        x = _as_batch(x, self.input_shape)
        n = x.shape[0]
        log_det = Tensor(np.zeros(n))
        pieces = []
        layer = 0
        for i, stage in enumerate(self.scales):
            for coupling in stage.pre:
                x, ld = _run(coupling.forward, x, layer, "forward")
                log_det = log_det + ld
                layer += 1
            if i < self.n_scales - 1:
                x = ops.squeeze2x2(x)
                for coupling in stage.post:
                    x, ld = _run(coupling.forward, x, layer, "forward")
                    log_det = log_det + ld
                    layer += 1
                half = x.shape[1] // 2
                pieces.append(ops.reshape(x[:, :half], (n, -1)))
                x = x[:, half:]
        pieces.append(ops.reshape(x, (n, -1)))
        return LatentBatch(ops.concat(pieces, axis=1), log_det)

    def split_latent(self, z):
        n = z.shape[0]
        out = []
        start = 0
        for shape in self.factor_shapes:
            size = int(np.prod(shape))
            out.append(ops.reshape(z[:, start:start + size], (n,) + shape))
            start += size
        return out

    def inverse(self, z):
        z = _latent_tensor(z, self.latent_dim)
        pieces = self.split_latent(z)
        layer = sum(len(s.pre) + len(s.post) for s in self.scales)
        x = pieces[-1]
        for i in reversed(range(self.n_scales)):
            stage = self.scales[i]
            if i < self.n_scales - 1:
                x = ops.concat([pieces[i], x], axis=1)
                for coupling in reversed(list(stage.post)):
                    layer -= 1
                    x, _ = _run(coupling.inverse, x, layer, "inverse")
                x = ops.unsqueeze2x2(x)
            for coupling in reversed(list(stage.pre)):
                layer -= 1
                x, _ = _run(coupling.inverse, x, layer, "inverse")
        return x

    def log_prob(self, x):
        return log_prob(self, x)

    def latent_images(self, z):
        """Reshape flat latents to input-shaped arrays for display."""
        z = _latent_tensor(z, self.latent_dim).data
        return z.reshape((z.shape[0],) + self.input_shape)


def _as_batch(x, shape):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != tuple(shape):
        raise ShapeError(f"flow input shape {x.shape[1:]} does not match model layout {tuple(shape)}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("flow input contains non-finite values")
    return x


def _latent_tensor(z, dim):
    if isinstance(z, LatentBatch):
        z = z.z
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 2 or z.shape[1] != dim:
        raise ShapeError(f"latent shape {z.shape} does not match latent dimensionality {dim}")
    return z


def standard_normal_log_prob(z):
    d = z.shape[1]
    return ops.sum(ops.square(z), axis=1) * -0.5 - 0.5 * d * LOG_2PI


def log_prob(model, x):
    """Per-sample log p(x) = log N(F(x); 0, I) + log|det dF/dx|."""
    z, log_det = model.forward(x)
    return standard_normal_log_prob(z) + log_det


def translate(src_flow, dst_flow, x):
    """Map samples of the source domain through the shared latent space."""
    if src_flow.latent_dim != dst_flow.latent_dim:
        raise ShapeError(f"latent layouts differ: {src_flow.latent_dim} vs {dst_flow.latent_dim}")
    return dst_flow.inverse(src_flow.forward(x).z)


def sample(flow, n, rng):
    with no_grad():
        return flow.inverse(Tensor(rng.standard_normal((n, flow.latent_dim))))


def dequantize(images, seed=0, alpha=LOGIT_ALPHA, noise=None):
    """Uniform dequantization of [0, 255] integers followed by a logit map.

    ``y = alpha + (1 - 2 alpha) * (x + u) / 256`` and the output is
    ``logit(y)``.  ``log_det`` is the per-sample log-Jacobian of the map from
    the continuous [0, 256) pixel scale to the logit space.
    """
    x = np.asarray(images, dtype=np.float64)
    if np.any(x != np.round(x)):
        raise ValueError("dequantize expects integer-valued pixels")
    if np.any((x < 0) | (x > 255)):
        raise ValueError("pixel values must lie in [0, 255]")
    if noise is None:
        noise = np.random.default_rng(seed).uniform(0.0, 1.0, size=x.shape)
    y = alpha + (1.0 - 2.0 * alpha) * (x + noise) / 256.0
    if np.any(y <= 0) or np.any(y >= 1):
        raise ValueError("logit undefined at the boundary; use alpha > 0")
    values = np.log(y) - np.log1p(-y)
    per = math.log((1.0 - 2.0 * alpha) / 256.0) - np.log(y) - np.log1p(-y)
    log_det = per.reshape(per.shape[0], -1).sum(axis=1) if per.ndim > 1 else per
    return Dequantized(values, log_det)


def quantize(values, alpha=LOGIT_ALPHA):
    """Map logit-space samples back to [0, 255] integer pixels."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values)
    y = 1.0 / (1.0 + np.exp(-v))
    x = (y - alpha) / (1.0 - 2.0 * alpha) * 256.0
    return np.clip(np.floor(x), 0, 255).astype(np.uint8)


def build_flow(cfg, rng):
    """Construct a flow from a config dict as produced by ``flow.config()``."""
    kind = cfg["kind"]
    if kind == "vector":
        return VectorFlow(int(cfg["dim"]), int(cfg.get("n_layers", 8)), int(cfg.get("hidden", 64)), rng)
    if kind == "image":
        return ImageFlow(tuple(cfg["input_shape"]), int(cfg["n_scales"]), int(cfg["n_channels"]),
                         int(cfg["n_blocks"]), rng)
    raise ValueError(f"unknown flow kind {kind!r}")
