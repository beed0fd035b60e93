"""Dense tensors with reverse-mode differentiation.

Only the primitives an FC-DenseNet needs are provided.  Spatial ops work on
channel-last arrays, either ``(H, W, C)`` or batched ``(N, H, W, C)``; every
op indexes the spatial axes from the end so the leading batch axis is optional.

Precision is global: 32-bit by default, 64-bit inside ``precision(64)`` (used
by the finite-difference gradient checks).
"""

from contextlib import contextmanager

import numpy as np

from .rng import uniform

_DTYPES = {32: np.float32, 64: np.float64}
_active_dtype = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype():
    return _active_dtype


def set_precision(bits):
    global _active_dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _active_dtype = _DTYPES[bits]


@contextmanager
def precision(bits):
    """Temporarily switch the active scalar precision."""
    previous = 64 if _active_dtype is np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An array plus the bookkeeping reverse-mode differentiation needs.

    ``parents`` and ``backward_fn`` are set by ops; ``backward_fn`` maps the
    gradient of this tensor to a tuple of gradients, one per parent (``None``
    where a parent needs none).
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _active_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return total(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


# ---------------------------------------------------------------------------
# graph traversal


class ComputeGraph:
    """Ops reachable from an output, in topological order (inputs first)."""

    def __init__(self, output):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(output):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)


def backward(loss, wrt=None):
    """Accumulate ``d loss / d t`` into ``t.grad`` for every tensor in the graph.

    If ``wrt`` is given, returns the gradients of those tensors in order, with
    zeros for tensors the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = ComputeGraph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return None
    out = []
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def total(x):
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def relu(x):
    """max(0, x); the gradient at exactly 0 is 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def softmax_channels(x):
    """Softmax over the last (class) axis with max subtraction."""
    if x.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes on the last axis, got {x.shape[-1]}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), back, "softmax")


def concat_channels(inputs):
    if not inputs:
        raise DimensionError("concat_channels needs at least one input")
    spatial = inputs[0].shape[:-1]
    for i, t in enumerate(inputs):
        if t.shape[:-1] != spatial:
            raise DimensionError(
                f"concat_channels: input {i} has leading/spatial dims {t.shape[:-1]}, expected {spatial}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[-1] for t in inputs])

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _node(np.concatenate([t.data for t in inputs], axis=-1), tuple(inputs), back, "concat")


def slice_channels(x, start, stop):
    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _node(x.data[..., start:stop].copy(), (x,), back, "slice")


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size, k, stride):
    """TensorFlow-style 'same' padding: output = ceil(size / stride)."""
    out = -(-size // stride)
    total_pad = max((out - 1) * stride + k - size, 0)
    return total_pad // 2, total_pad - total_pad // 2


def _conv(xp, kernels, stride, out_h, out_w):
    kh, kw = kernels.shape[:2]
    out = None
    for i in range(kh):
        for j in range(kw):
            window = xp[..., i:i + stride * (out_h - 1) + 1:stride,
                        j:j + stride * (out_w - 1) + 1:stride, :]
            term = window @ kernels[i, j]
            out = term if out is None else out + term
    return out


def _conv_backward(xp, kernels, g, stride, out_h, out_w):
    kh, kw, cin, cout = kernels.shape
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernels)
    g2 = g.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            sl = (Ellipsis, slice(i, i + stride * (out_h - 1) + 1, stride),
                  slice(j, j + stride * (out_w - 1) + 1, stride), slice(None))
            gxp[sl] += g @ kernels[i, j].T
            gk[i, j] = xp[sl].reshape(-1, cin).T @ g2
    return gxp, gk


def conv2d(x, kernels, bias=None, padding="same", stride=1):
    """2-D cross-correlation (no kernel flip), channel-last.

    ``padding`` is ``"same"``, ``"valid"`` or an explicit
    ``(top, bottom, left, right)`` tuple.
    """
    kh, kw, cin, cout = kernels.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channel axis has {x.shape[-1]}, kernel expects {cin}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    h, w = x.shape[-3], x.shape[-2]
    if padding == "same":
        pads = _same_pads(h, kh, stride) + _same_pads(w, kw, stride)
    elif padding == "valid":
        pads = (0, 0, 0, 0)
    else:
        pads = tuple(padding)
    hp, wp = h + pads[0] + pads[1], w + pads[2] + pads[3]
    if kh > hp:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded height axis {hp}")
    if kw > wp:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded width axis {wp}")
    out_h, out_w = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    lead = [(0, 0)] * (x.data.ndim - 3)
    pad_spec = lead + [(pads[0], pads[1]), (pads[2], pads[3]), (0, 0)]
    xp = np.pad(x.data, pad_spec) if any(pads) else x.data
    out = _conv(xp, kernels.data, stride, out_h, out_w)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        gxp, gk = _conv_backward(xp, kernels.data, g, stride, out_h, out_w)
        gx = gxp[..., pads[0]:pads[0] + h, pads[2]:pads[2] + w, :]
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, cout).sum(axis=0)

    return _node(out, parents, back, "conv2d")


def _tconv(x, kernels, h, w):
    kh, kw, _, cout = kernels.shape
    y = np.zeros(x.shape[:-3] + (2 * h + kh - 2, 2 * w + kw - 2, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y[..., i:i + 2 * h:2, j:j + 2 * w:2, :] += x @ kernels[i, j]
    return y[..., :2 * h, :2 * w, :]


def transposed_conv2d(x, kernels, bias=None, stride=2):
    """Stride-2 transposed convolution producing exactly twice the resolution.

    Input pixel ``(r, c)`` scatters ``x[r, c] @ kernels[i, j]`` onto output
    ``(2r + i, 2c + j)``; rows/cols beyond ``2H``/``2W`` are cropped.  This is the
    adjoint of ``conv2d(., kernels^T, stride=2, padding=(0, 1, 0, 1))``.
    """
    if stride != 2:
        raise DimensionError(f"transposed_conv2d supports stride 2 only, got {stride}")
    kh, kw, cin, cout = kernels.shape
    h, w = x.shape[-3], x.shape[-2]
    if h < 1 or w < 1 or cin < 1 or cout < 1:
        raise DimensionError(f"transposed_conv2d: non-positive dims in input {x.shape} / kernel {kernels.shape}")
    if x.shape[-1] != cin:
        raise DimensionError(f"transposed_conv2d: input channel axis has {x.shape[-1]}, kernel expects {cin}")
    out = _tconv(x.data, kernels.data, h, w)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        lead = [(0, 0)] * (g.ndim - 3)
        gp = np.pad(g, lead + [(0, kh - 2), (0, kw - 2), (0, 0)])
        gx, gk = np.zeros_like(x.data), np.empty_like(kernels.data)
        x2 = x.data.reshape(-1, cin)
        for i in range(kh):
            for j in range(kw):
                gs = gp[..., i:i + 2 * h:2, j:j + 2 * w:2, :]
                gx += gs @ kernels.data[i, j].T
                gk[i, j] = x2.T @ gs.reshape(-1, cout)
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, cout).sum(axis=0)

    return _node(out, parents, back, "transposed_conv2d")


def conv2d_adjoint(y, kernels):
    """Adjoint of :func:`transposed_conv2d` (stride-2 conv, channel roles swapped)."""
    kt = Tensor(np.ascontiguousarray(kernels.data.transpose(0, 1, 3, 2)), dtype=kernels.dtype)
    kh, kw = kernels.shape[:2]
    return conv2d(y, kt, padding=(0, kh - 2, 0, kw - 2), stride=2)


# ---------------------------------------------------------------------------
# pooling, normalization, dropout


def max_pool2d(x, window=2, stride=2):
    """2x2/2 max pool; gradient goes to the first maximum in row-major order."""
    if window != 2 or stride != 2:
        raise DimensionError("max_pool2d supports window=2, stride=2 only")
    h, w, c = x.shape[-3:]
    if h % 2:
        raise DimensionError(f"max_pool2d: height axis {h} is odd")
    if w % 2:
        raise DimensionError(f"max_pool2d: width axis {w} is odd")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (h // 2, 2, w // 2, 2, c))
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 4, nd + 1, nd + 3)
    flat = blocks.transpose(perm).reshape(lead + (h // 2, w // 2, c, 4))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        routed = (np.arange(4) == arg[..., None]) * g[..., None]
        routed = routed.reshape(lead + (h // 2, w // 2, c, 2, 2))
        inv = tuple(range(nd)) + (nd, nd + 3, nd + 1, nd + 4, nd + 2)
        return (routed.transpose(inv).reshape(x.shape).astype(x.dtype),)

    return _node(out, (x,), back, "max_pool2d")


class BatchNormState:
    """Running per-channel statistics; updated in place during training."""

    def __init__(self, channels, momentum=0.99, dtype=None):
        dtype = dtype or _active_dtype
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state, mode="infer", epsilon=1e-3):
    """Per-channel normalization over every axis but the last.

    ``mode="train"`` uses batch statistics (biased variance) and folds them into
    ``state`` by exponential moving average; ``mode="infer"`` uses ``state``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    axes = tuple(range(x.data.ndim - 1))
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.mean[...] = m * state.mean + (1 - m) * mean
        state.var[...] = m * state.var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data
    count = x.data.size // x.shape[-1]

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if mode == "train":
            gx = gamma.data * inv_std / count * (count * g - gb - xhat * gg)
        else:
            gx = g * gamma.data * inv_std
        return gx, gg, gb

    return _node(out.astype(x.dtype), (x, gamma, beta), back, "batch_norm")


def dropout_mask(shape, p, key):
    """Inverted-dropout multiplier array for ``key``.

    ``key`` is one ``(seed, stream, step)`` triple, or a list of triples, one
    per entry of the leading (batch) axis.
    """
    if isinstance(key, list):
        if len(key) != shape[0]:
            raise DimensionError(f"dropout: {len(key)} keys for batch axis of size {shape[0]}")
        u = np.stack([uniform(shape[1:], k) for k in key])
    else:
        u = uniform(shape, key)
    return (u >= p) / (1.0 - p)


def dropout(x, p, key):
    """Zero each element with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0:
        return x
    mask = dropout_mask(x.shape, p, key).astype(x.dtype)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
