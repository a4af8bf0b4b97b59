"""Differentiable primitives.

Every function takes tensors (or array-likes, treated as constants) and
returns a new Tensor whose backward rule is recorded when any input needs
gradients.  Broadcasting follows numpy for the elementwise binary ops.
"""

import numpy as np

from cdcgen.diffmath.tensor import NonFiniteError, ShapeError, Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.2


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _finite(data, name):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    return data


def _binary(fn, a, b, name):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _finite(_binary(np.divide, a, b, "div"), "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.data), "exp")
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    out = _finite(np.log(a.data), "log")
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return make_node(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return make_node(out, (a,), lambda g: (g * inside,), "clip")


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), bw, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def getitem(a, index):
    """Basic or advanced indexing; covers slicing by boolean mask."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), bw, "getitem")


def masked_select(a, mask, axis=-1):
    """Select the entries of ``a`` where ``mask`` is true along ``axis``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    axis = axis % a.ndim
    if mask.shape != (a.shape[axis],):
        raise ShapeError(f"masked_select: mask shape {mask.shape} does not match axis {axis} of {a.shape}")
    idx = np.flatnonzero(mask)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return make_node(out, (a,), bw, "masked_select")


def channel_affine(x, log_scale, bias, axis=1):
    """Per-channel affine normalization ``(x + bias) * exp(log_scale)``.

    ``log_scale`` and ``bias`` have one entry per channel along ``axis``.
    """
    x, log_scale, bias = as_tensor(x), as_tensor(log_scale), as_tensor(bias)
    axis = axis % x.ndim
    c = x.shape[axis]
    if log_scale.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"channel_affine: channel params {log_scale.shape}/{bias.shape} vs input {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    scale = np.exp(log_scale.data).reshape(bshape)
    centered = x.data + bias.data.reshape(bshape)
    out = centered * scale
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = g * scale if x.requires_grad else None
        gs = (g * out).sum(axis=other) if log_scale.requires_grad else None
        gb = (g * scale).sum(axis=other) if bias.requires_grad else None
        return gx, gs, gb

    return make_node(out, (x, log_scale, bias), bw, "channel_affine")


def log_softmax_np(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Mean cross-entropy of ``softmax(logits)`` against ``target``.

    ``target`` is either integer class indices of shape (N,) or a row-stochastic
    (N, K) array of target probabilities.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.ndim == 1:
        if target.shape[0] != n:
            raise ShapeError(f"softmax_cross_entropy: {n} logits rows but {target.shape[0]} labels")
        if np.any((target < 0) | (target >= k)):
            raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")
        probs_t = np.zeros((n, k))
        probs_t[np.arange(n), target.astype(int)] = 1.0
    else:
        if target.shape != logits.shape:
            raise ShapeError(f"softmax_cross_entropy: target {target.shape} vs logits {logits.shape}")
        probs_t = target.astype(np.float64)
    logp = log_softmax_np(logits.data)
    loss = -(probs_t * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - probs_t) / n,)

    return make_node(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols, padded_shape, kh, kw, stride, ho, wo):
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, (O, C, kh, kw) weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} do not conform")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None]
        parents.append(bias)
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_node(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    ``weight`` has shape (C_in, C_out, kh, kw).  Output spatial size is
    ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} and weight {weight.shape} do not conform")
    if output_padding >= stride and output_padding > 0:
        raise ShapeError("conv_transpose2d: output_padding must be smaller than stride")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w2.T, x2).reshape(n, cout, kh, kw, h, w)
    padded = (n, cout, ho + 2 * padding, wo + 2 * padding)
    out = _col2im(cols, padded, kh, kw, stride, h, w)[:, :, padding:padding + ho, padding:padding + wo]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, kh, kw, stride, h, w).reshape(n, cout * kh * kw, h * w)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            return gx, gw, gb
        return gx, gw

    return make_node(out, parents, bw, "conv_transpose2d")


def squeeze2x2(x):
    """Space-to-depth: (N, C, H, W) -> (N, 4C, H/2, W/2)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze2x2: spatial size {(h, w)} must be even")
    y = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, c * 4, h // 2, w // 2))


def unsqueeze2x2(x):
    """Inverse of :func:`squeeze2x2`."""
    n, c, h, w = x.shape
    if c % 4:
        raise ShapeError(f"unsqueeze2x2: channels {c} must be divisible by 4")
    y = reshape(x, (n, c // 4, 2, 2, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, c // 4, h * 2, w * 2))


def check_finite(t, where):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value in {where}")
    return t
