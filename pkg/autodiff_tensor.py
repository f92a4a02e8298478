# autodiff_tensor.py - Reverse-mode automatic differentiation over numpy arrays
#
# Only the operations the generator, critic and gradient penalty need.
# Every backward rule is itself written with Tensor operations, so a gradient
# taken with create_graph=True can be differentiated again.

import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

import matgan_logger as _mlog

logger = _mlog.get("autodiff")

LEAKY_SLOPE = 0.2
ADAIN_EPS = 1e-8


class DimensionError(ValueError):
    """Shape mismatch, naming the op and the offending axes."""

    def __init__(self, op, detail):
        self.op = op
        super().__init__(f"{op}: {detail}")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = previous


# ========== TENSOR ==========
class Tensor:
    """N-D float array, optionally a node in the differentiation graph."""

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        leaves = [n for n in topological_order(self) if n.is_leaf and n.requires_grad]
        for leaf, g in zip(leaves, grad(self, leaves)):
            leaf.grad = g.data if leaf.grad is None else leaf.grad + g.data

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"


def _const(arr):
    return Tensor(arr)


def _make(data, parents, backward, op):
    """Wrap an op result, recording the graph only when some parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data)


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


# ========== GRAPH TRAVERSAL ==========
def topological_order(output):
    """Graph nodes feeding `output`, parents before children, each exactly once."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, wrt, create_graph=False):
    """
    Gradients of a scalar `output` with respect to each tensor in `wrt`.
    With create_graph=True the returned tensors are themselves differentiable.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    grads = {id(output): Tensor(np.ones_like(output.data))}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(topological_order(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    return [grads[id(t)] if id(t) in grads else zeros_like(t) for t in wrt]


# ========== ELEMENTWISE ==========
def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def mul(a, b):
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def shift(a, c):
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "shift")


def power(a, exponent):
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (mul(g, scale(power(a, p - 1.0), p)),), "power")


def leaky_relu(x, slope=LEAKY_SLOPE):
    mask = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * mask, (x,), lambda g: (mul(g, _const(mask)),), "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def sigmoid(x):
    out = _make(expit(x.data), (x,), lambda g: (mul(g, mul(out, shift(neg(out), 1.0))),), "sigmoid")
    return out


# ========== SHAPES AND REDUCTIONS ==========
def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape", f"cannot view {a.shape} as {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a):
    if a.ndim != 2:
        raise DimensionError("transpose", f"expects a matrix, got {a.ndim} axes")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (transpose(g),), "transpose")


def reduce_sum(a, axes=None):
    axes = _norm_axes(axes, a.ndim)
    return _make(np.sum(a.data, axis=axes), (a,), lambda g: (broadcast_to(g, a.shape, axes),), "reduce_sum")


def broadcast_to(a, shape, axes):
    """Repeat `a` along `axes` of `shape`; a.shape must equal shape without those axes."""
    shape = tuple(shape)
    axes = _norm_axes(axes, len(shape))
    kept = tuple(n for i, n in enumerate(shape) if i not in axes)
    if a.shape != kept:
        raise DimensionError("broadcast_to", f"{a.shape} does not match {shape} outside axes {axes}")
    data = np.ascontiguousarray(np.broadcast_to(np.expand_dims(a.data, axes), shape))
    return _make(data, (a,), lambda g: (reduce_sum(g, axes),), "broadcast_to")


def sum(a):  # noqa: A001 - mirrors numpy naming
    return reduce_sum(a, None)


def mean(a):
    return scale(reduce_sum(a, None), 1.0 / a.size)


def l2_norm(x):
    """Euclidean norm over every axis except the leading batch axis.

    Rows that are entirely zero get a zero gradient instead of 0 * inf.
    """
    if x.ndim < 2:
        raise DimensionError("l2_norm", f"expects a batch axis plus data axes, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    norm = np.sqrt(np.sum(x.data * x.data, axis=axes))
    zero_rows = (norm == 0).astype(norm.dtype)

    def backward(g):
        inv = power(add(out, _const(zero_rows)), -1.0)
        return (mul(x, broadcast_to(mul(g, inv), x.shape, axes)),)

    out = _make(norm, (x,), backward, "l2_norm")
    return out


# ========== DENSE LAYERS ==========
def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", f"inner axes differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def add_bias(x, b):
    """Add a per-channel bias along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError("add_bias", f"bias {b.shape} does not match channel axis 1 of {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    return add(x, broadcast_to(b, x.shape, axes))


# ========== INSTANCE NORMALIZATION ==========
def _spatial_axes(x):
    return tuple(range(2, x.ndim))


def channel_stats(x, eps=ADAIN_EPS):
    """Per (batch, channel) mean and sqrt(variance + eps) over the spatial axes."""
    if x.ndim < 3:
        raise DimensionError("channel_stats", f"expects [batch, channel, spatial...], got {x.shape}")
    axes = _spatial_axes(x)
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = scale(reduce_sum(x, axes), 1.0 / n)
    centered = sub(x, broadcast_to(mu, x.shape, axes))
    var = scale(reduce_sum(mul(centered, centered), axes), 1.0 / n)
    return mu, power(shift(var, eps), 0.5)


def affine_modulate(x, y_s, y_b):
    """x * y_s + y_b with per (batch, channel) scale and bias."""
    if y_s.shape != x.shape[:2] or y_b.shape != x.shape[:2]:
        raise DimensionError("affine_modulate",
                             f"styles {y_s.shape}/{y_b.shape} do not match batch/channel axes of {x.shape}")
    axes = _spatial_axes(x)
    return add(mul(x, broadcast_to(y_s, x.shape, axes)), broadcast_to(y_b, x.shape, axes))


def adain(x, y_s, y_b, eps=ADAIN_EPS):
    """Adaptive instance normalization: standardize each channel, then apply the style."""
    if y_s.shape != x.shape[:2] or y_b.shape != x.shape[:2]:
        raise DimensionError("adain", f"styles {y_s.shape}/{y_b.shape} do not match {x.shape[:2]}")
    axes = _spatial_axes(x)
    mu, sigma = channel_stats(x, eps)
    normalized = mul(sub(x, broadcast_to(mu, x.shape, axes)), broadcast_to(power(sigma, -1.0), x.shape, axes))
    return affine_modulate(normalized, y_s, y_b)


# ========== 3D CONVOLUTION ==========
def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _check_conv(op, x, w, stride, padding, in_axis):
    if stride < 1 or padding < 0:
        raise DimensionError(op, f"needs stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(op, f"expects 5D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise DimensionError(op, f"input channel axis 1 ({x.shape[1]}) != weight axis {in_axis} ({w.shape[in_axis]})")


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def deconv_output_size(n, k, stride, padding):
    return (n - 1) * stride - 2 * padding + k


def _windows(x, ksize, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    for n, k in zip(x.shape[2:], ksize):
        if n < k:
            raise DimensionError("conv3d", f"kernel {ksize} larger than padded input {x.shape[2:]}")
    win = sliding_window_view(x, ksize, axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def _conv_forward(x, w, stride, padding):
    win = _windows(x, w.shape[2:], stride, padding)
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))


def _conv_weight_grad(x, g, ksize, stride, padding):
    win = _windows(x, ksize, stride, padding)
    if win.shape[2:5] != g.shape[2:]:
        raise DimensionError("conv3d_weight_grad", f"gradient spatial {g.shape[2:]} != output {win.shape[2:5]}")
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _conv_transpose_forward(x, w, stride, padding, out_size):
    n_in = x.shape[2:]
    ksize = w.shape[2:]
    cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 4, 5, 6, 7, 1, 2, 3)
    buf = np.zeros((x.shape[0], w.shape[1]) + tuple(o + 2 * padding for o in out_size), dtype=cols.dtype)
    for i, j, l in itertools.product(*(range(k) for k in ksize)):
        buf[:, :,
            i:i + (n_in[0] - 1) * stride + 1:stride,
            j:j + (n_in[1] - 1) * stride + 1:stride,
            l:l + (n_in[2] - 1) * stride + 1:stride] += cols[:, :, i, j, l]
    p = padding
    return np.ascontiguousarray(buf[:, :, p:p + out_size[0], p:p + out_size[1], p:p + out_size[2]])


def conv3d(x, w, stride=1, padding=0):
    """x: [N, C, D, H, W], w: [O, C, kd, kh, kw] -> [N, O, D', H', W']."""
    _check_conv("conv3d", x, w, stride, padding, in_axis=1)
    in_size = x.shape[2:]

    def backward(g):
        return (conv_transpose3d(g, w, stride, padding, out_size=in_size),
                conv3d_weight_grad(x, g, w.shape[2:], stride, padding))

    return _make(_conv_forward(x.data, w.data, stride, padding), (x, w), backward, "conv3d")


def conv_transpose3d(x, w, stride=1, padding=0, out_size=None):
    """
    Adjoint of conv3d. x: [N, O, D, H, W], w: [O, C, kd, kh, kw] -> [N, C, D', H', W'],
    D' = (D - 1) * stride - 2 * padding + kd unless out_size asks for up to stride - 1 more.
    """
    _check_conv("conv_transpose3d", x, w, stride, padding, in_axis=0)
    ksize = w.shape[2:]
    default = tuple(deconv_output_size(n, k, stride, padding) for n, k in zip(x.shape[2:], ksize))
    out_size = default if out_size is None else tuple(out_size)
    for o, d in zip(out_size, default):
        if not d <= o < d + stride or o < 1:
            raise DimensionError("conv_transpose3d", f"output size {out_size} unreachable from {x.shape[2:]}")

    def backward(g):
        return (conv3d(g, w, stride, padding),
                conv3d_weight_grad(g, x, ksize, stride, padding))

    return _make(_conv_transpose_forward(x.data, w.data, stride, padding, out_size), (x, w), backward,
                 "conv_transpose3d")


def conv3d_weight_grad(x, g, ksize, stride=1, padding=0):
    """Weight gradient of conv3d(x, w) given upstream gradient g; differentiable in x and g."""
    ksize = _triple(ksize)
    in_size = x.shape[2:]

    def backward(h):
        return (conv_transpose3d(g, h, stride, padding, out_size=in_size),
                conv3d(x, h, stride, padding))

    return _make(_conv_weight_grad(x.data, g.data, ksize, stride, padding), (x, g), backward,
                 "conv3d_weight_grad")


# ========== MAX POOLING ==========
def _gather(x, flat_idx):
    def backward(g):
        return (_scatter(g, flat_idx, x.shape),)

    return _make(x.data.reshape(-1)[flat_idx], (x,), backward, "gather")


def _scatter(g, flat_idx, shape):
    size = int(np.prod(shape))
    data = np.bincount(flat_idx.reshape(-1), weights=g.data.reshape(-1), minlength=size)
    return _make(data.astype(g.dtype).reshape(shape), (g,), lambda h: (_gather(h, flat_idx),), "scatter")


def maxpool3d(x, kernel, stride):
    """Max over cubic windows, no padding. Ties pick the first voxel in window order."""
    if x.ndim != 5 or kernel < 1 or stride < 1:
        raise DimensionError("maxpool3d", f"expects 5D input, kernel/stride >= 1; got {x.shape}, {kernel}, {stride}")
    if min(x.shape[2:]) < kernel:
        raise DimensionError("maxpool3d", f"kernel {kernel} larger than spatial axes {x.shape[2:]}")
    flat_pos = np.arange(x.size).reshape(x.shape)
    k3 = (kernel,) * 3
    win = sliding_window_view(x.data, k3, axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    pos = sliding_window_view(flat_pos, k3, axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    out_shape = win.shape[:5]
    win = win.reshape(out_shape + (-1,))
    pos = pos.reshape(out_shape + (-1,))
    arg = np.argmax(win, axis=-1)
    flat_idx = np.take_along_axis(pos, arg[..., None], axis=-1)[..., 0]
    return _gather(x, flat_idx)


def flatten(x):
    """[N, ...] -> [N, prod(...)]."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
