"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery to train the small convolutional autoencoder and the
spline-flow density model: elementwise arithmetic, matmul, 1-D convolution,
pooling, upsampling, and the usual activations, each with a hand-written
backward rule. A backward pass replays a topologically ordered tape of the
recorded operations exactly once per node.

Every forward result is checked for finiteness; NaN or Inf anywhere raises
``NumericsError`` immediately instead of propagating silently.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericsError, UsageError


def _as_array(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    """A dense, row-major float64 array plus the bookkeeping for backprop.

    Tensors produced by operations record their parents and a local backward
    rule; leaf tensors created with ``requires_grad=True`` are trainable
    parameters. Gradients accumulate in ``.grad`` during ``backward``.
    """

    __slots__ = ("data", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in tensor {name or '<leaf>'}")
        self.grad = None
        self.parents = ()
        self.backward_rule = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_rule, name):
    """Wrap an op result, wiring the tape edges when gradients are needed."""
    out = Tensor.__new__(Tensor)
    out.data = _as_array(data)
    if not np.all(np.isfinite(out.data)):
        raise NumericsError(f"non-finite values produced by {name}")
    out.grad = None
    out.name = name
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_rule = backward_rule
    else:
        out.parents = ()
        out.backward_rule = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Topologically ordered record of the ops reaching one output tensor.

    Replaying the nodes in reverse visits every recorded node exactly once,
    which is what makes gradient accumulation correct.
    """

    def __init__(self, root: Tensor):
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.nodes = nodes  # topological order, root last


def backward(loss: Tensor, params=None):
    """Backpropagate from a scalar loss; returns gradients for ``params``.

    Parameters not reachable from the loss get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss tensor")
    tape = Tape(loss)
    for node in tape.nodes:
        node.grad = None
    if params is not None:
        for p in params:
            p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad)
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, a=a, b=b):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, a=a, b=b):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, a=a, b=b):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, a=a, b=b):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return _make(out_data, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a):
        _accum(a, -g)

    return _make(-a.data, (a,), rule, "neg")


def square(a) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), rule, "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def rule(g, a=a, out_data=out_data):
        _accum(a, g * out_data)

    return _make(out_data, (a,), rule, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a):
        _accum(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _make(out_data, (a,), rule, "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def rule(g, a=a, out_data=out_data):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), rule, "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def rule(g, a=a, mask=mask):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), rule, "relu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def rule(g, a=a):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), rule, "softplus")


def clip_box(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior only."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def rule(g, a=a, inside=inside):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), rule, "clip_box")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def rule(g, a=a, out_data=out_data, axis=axis):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), rule, "softmax")


# reductions and shape ----------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule, "sum")


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), rule, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]

    def rule(g, tensors=tensors, sizes=sizes, axis=axis):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(idx)])
            offset += n

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat")


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    a = as_tensor(a)

    def rule(g, a=a, start=start, stop=stop):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    return _make(a.data[..., start:stop], (a,), rule, "slice_cols")


def gather_rows(a, idx) -> Tensor:
    """Per-row element selection: out[i] = a[i, idx[i]] for a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])

    def rule(g, a=a, idx=idx, rows=rows):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)

    return _make(a.data[rows, idx], (a,), rule, "gather_rows")


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def rule(g, a=a, axis=axis):
        flipped = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accum(a, flipped)

    return _make(np.cumsum(a.data, axis=axis), (a,), rule, "cumsum")


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def dense(x, weight, bias) -> Tensor:
    """Affine layer x @ W + b for x of shape (batch, in) and W of shape (in, out)."""
    return add(matmul(x, weight), bias)


# structured ops ----------------------------------------------------------


def conv1d(x, filters, biases, stride: int = 1, zero_pad: bool = True) -> Tensor:
    """Cross-correlate a filter bank with a 1-D multichannel signal.

    ``x`` is (channels_in, K) or (batch, channels_in, K); ``filters`` is
    (channels_out, channels_in, width). Zero padding adds (width-1)//2
    zeros on each side. Output element (i, j) is the raw patch product
    plus bias; activation is the caller's business.
    """
    x, filters, biases = as_tensor(x), as_tensor(filters), as_tensor(biases)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise UsageError("conv1d input must be (C, K) or (B, C, K)")
    batch, c_in, k_in = xd.shape
    c_out, c_in_f, width = filters.data.shape
    if c_in_f != c_in:
        raise ConfigError(
            f"filter bank expects {c_in_f} input channels, signal has {c_in}"
        )
    if biases.data.shape != (c_out,):
        raise ConfigError("bias vector must have one entry per output channel")
    pad = (width - 1) // 2 if zero_pad else 0
    span = k_in + 2 * pad - width
    if span < 0:
        raise ConfigError("filter width exceeds padded input length")
    if stride < 1 or span % stride != 0:
        raise ConfigError("stride must divide the padded traversal evenly")
    k_out = span // stride + 1

    xp = np.zeros((batch, c_in, k_in + 2 * pad))
    xp[:, :, pad : pad + k_in] = xd
    # patches[b, j, c*width + q] = xp[b, c, j*stride + q]
    cols = np.empty((batch, c_in, width, k_out))
    for q in range(width):
        cols[:, :, q, :] = xp[:, :, q : q + (k_out - 1) * stride + 1 : stride]
    patches = cols.transpose(0, 3, 1, 2).reshape(batch, k_out, c_in * width)
    w2 = filters.data.reshape(c_out, c_in * width)
    out = patches @ w2.T + biases.data  # (B, K_out, C_out)
    out = out.transpose(0, 2, 1)

    def rule(g, x=x, filters=filters, biases=biases, patches=patches, w2=w2,
             squeeze=squeeze, stride=stride, pad=pad, k_in=k_in, width=width,
             batch=batch, c_in=c_in, c_out=c_out, k_out=k_out):
        gd = g[None] if squeeze else g  # (B, C_out, K_out)
        gd = gd.transpose(0, 2, 1)  # (B, K_out, C_out)
        _accum(biases, gd.sum(axis=(0, 1)))
        gw = gd.reshape(batch * k_out, c_out).T @ patches.reshape(batch * k_out, -1)
        _accum(filters, gw.reshape(filters.data.shape))
        dpatches = gd @ w2  # (B, K_out, C_in*width)
        dcols = dpatches.reshape(batch, k_out, c_in, width).transpose(0, 2, 3, 1)
        dxp = np.zeros((batch, c_in, k_in + 2 * pad))
        for q in range(width):
            dxp[:, :, q : q + (k_out - 1) * stride + 1 : stride] += dcols[:, :, q, :]
        dx = dxp[:, :, pad : pad + k_in]
        _accum(x, dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x, filters, biases), rule, "conv1d")


def maxpool1d(x, window: int = 2) -> Tensor:
    """Window maximum along the last axis; gradient routes to the first argmax."""
    x = as_tensor(x)
    k = x.data.shape[-1]
    if window < 1:
        raise ConfigError("pooling window must be positive")
    if k % window != 0:
        raise ConfigError(f"length {k} is not divisible by pooling window {window}")
    grouped = x.data.reshape(x.data.shape[:-1] + (k // window, window))
    arg = grouped.argmax(axis=-1)  # ties resolve to the lowest index
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]

    def rule(g, x=x, arg=arg, window=window):
        gg = np.zeros(g.shape + (window,))
        np.put_along_axis(gg, arg[..., None], g[..., None], axis=-1)
        _accum(x, gg.reshape(x.data.shape))

    return _make(out, (x,), rule, "maxpool1d")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Repeat each sample ``factor`` times along the last axis."""
    x = as_tensor(x)
    if factor < 1:
        raise ConfigError("upsampling factor must be >= 1")

    def rule(g, x=x, factor=factor):
        _accum(x, g.reshape(g.shape[:-1] + (-1, factor)).sum(axis=-1))

    return _make(np.repeat(x.data, factor, axis=-1), (x,), rule, "upsample_nearest")
