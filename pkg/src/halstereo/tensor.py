"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every tensor wraps a contiguous row-major numpy array. Operations record
their inputs together with a vector-Jacobian closure; ``backward()`` on a
scalar walks the tape in reverse topological order. Any operation that
produces a non-finite value raises immediately.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forward)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """Immutable dense n-dimensional float64 array with an autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad=False, _parents=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor holds non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents if _parents is not None else []

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self, gradient=None):
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``self`` must be scalar unless an explicit seed gradient is given.
        """
        if gradient is None:
            if self.size != 1:
                raise ValueError("backward() on non-scalar requires a seed gradient")
            gradient = np.ones_like(self.data)
        else:
            gradient = np.asarray(gradient, dtype=np.float64)

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): gradient}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib

    # -- operator sugar -----------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents):
    """Build an op result, recording only grad-requiring parents."""
    if _GRAD_ENABLED[-1]:
        parents = [(t, f) for t, f in parents if t.requires_grad]
    else:
        parents = []
    return Tensor(data, requires_grad=bool(parents), _parents=parents)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    return _make(a.data ** e, [(a, lambda g: g * e * a.data ** (e - 1.0))])


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * 0.5 / out)])


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


def elu(a):
    a = as_tensor(a)
    x = a.data
    neg = x < 0
    out = np.where(neg, np.expm1(np.minimum(x, 0.0)), x)
    dx = np.where(neg, np.exp(np.minimum(x, 0.0)), 1.0)
    return _make(out, [(a, lambda g: g * dx)])


def dense_kernel(a):
    """Strictly positive attention kernel: a+1 for a >= 0, e^a below."""
    a = as_tensor(a)
    x = a.data
    neg = x < 0
    expneg = np.exp(np.minimum(x, 0.0))
    out = np.where(neg, expneg, x + 1.0)
    dx = np.where(neg, expneg, 1.0)
    return _make(out, [(a, lambda g: g * dx)])


def where_mask(mask, a, b):
    """Select by a constant boolean mask (no gradient through the mask)."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.where(mask, a.data, b.data), [
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    ])


# -- reductions and shape ops -----------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(out, [(a, vjp)])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a, *axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros(a.shape)
        ga[idx] = g
        return ga

    return _make(out, [(a, vjp)])


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def pad(a, pad_width):
    """Zero padding; pad_width follows numpy convention."""
    a = as_tensor(a)
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(out, [(a, lambda g: g[sl])])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


# -- normalizations ---------------------------------------------------------

L2_NORM_EPS = 1e-6
LAYER_NORM_EPS = 1e-12


def l2_normalize(x, axis):
    """Scale each slice along ``axis`` to unit Euclidean norm.

    Slices with norm below L2_NORM_EPS come back as zeros instead of
    blowing up; the adjoint is exactly zero there as well.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    alive = norm >= L2_NORM_EPS
    safe = np.where(alive, norm, 1.0)
    y = np.where(alive, x.data / safe, 0.0)

    def vjp(g):
        dot = np.sum(y * g, axis=axis, keepdims=True)
        return np.where(alive, (g - y * dot) / safe, 0.0)

    return _make(y, [(x, vjp)])


def layer_norm(x, gain, offset):
    """Per spatial position, normalize the channel vector then apply affine.

    ``x`` is (C, H, W); gain/offset are length-C vectors.
    """
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    c = x.shape[0]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ValueError("gain/offset must match the channel count")
    mu = tmean(x, axis=0, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=0, keepdims=True)
    y = xc / sqrt(var + LAYER_NORM_EPS)
    return y * reshape(gain, c, 1, 1) + reshape(offset, c, 1, 1)


def softmax(x, axis):
    x = as_tensor(x)
    shifted = x - np.max(x.data, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


def activation(x, kind, axis=None):
    """Dispatch helper: 'gelu', 'elu' or 'softmax' (with axis)."""
    if kind == "gelu":
        return gelu(x)
    if kind == "elu":
        return elu(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax needs an axis")
        return softmax(x, axis)
    raise ValueError(f"unknown activation kind {kind!r}")


# -- convolutions -----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution layer."""

    kernel_size: int
    in_channels: int
    out_channels: int
    padding: int | None = None
    groups: int = 1
    bias: bool = True
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError("groups must divide both channel counts")

    @property
    def pad(self):
        return (self.kernel_size - 1) // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self):
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)


def conv2d(x, spec: ConvSpec, weights, bias=None):
    """Grouped 2-D convolution of a (C, H, W) map, zero 'same' padding."""
    x, weights = as_tensor(x), as_tensor(weights)
    cin, H, W = x.shape
    if cin != spec.in_channels:
        raise ValueError(f"input has {cin} channels, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weights {weights.shape} != {spec.weight_shape}")
    k, g, s, p = spec.kernel_size, spec.groups, spec.stride, spec.pad
    cout = spec.out_channels
    cin_g, cout_g = cin // g, cout // g

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    col = np.empty((cin, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            col[:, i, j] = xp[:, i:i + s * Ho:s, j:j + s * Wo:s]
    colg = col.reshape(g, cin_g * k * k, Ho * Wo)
    wg = weights.data.reshape(g, cout_g, cin_g * k * k)
    out = np.matmul(wg, colg).reshape(cout, Ho, Wo)

    def vjp_x(gy):
        gyg = gy.reshape(g, cout_g, Ho * Wo)
        dcol = np.matmul(wg.transpose(0, 2, 1), gyg)
        dcol = dcol.reshape(cin, k, k, Ho, Wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s] += dcol[:, i, j]
        return dxp[:, p:p + H, p:p + W] if p else dxp

    def vjp_w(gy):
        gyg = gy.reshape(g, cout_g, Ho * Wo)
        return np.matmul(gyg, colg.transpose(0, 2, 1)).reshape(weights.shape)

    parents = [(x, vjp_x), (weights, vjp_w)]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError("bias must be one value per output channel")
        out = out + bias.data[:, None, None]
        parents.append((bias, lambda gy: gy.sum(axis=(1, 2))))
    return _make(out, parents)


def conv3d(x, weights, bias=None):
    """3-D convolution over (C, D, H, W) with 'same' zero padding, stride 1."""
    x, weights = as_tensor(x), as_tensor(weights)
    cin, D, H, W = x.shape
    cout, cin_w, kd, kh, kw = weights.shape
    if cin_w != cin:
        raise ValueError("channel mismatch")
    pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    col = np.empty((cin, kd, kh, kw, D, H, W))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                col[:, a, b, c] = xp[:, a:a + D, b:b + H, c:c + W]
    colm = col.reshape(cin * kd * kh * kw, D * H * W)
    wm = weights.data.reshape(cout, cin * kd * kh * kw)
    out = (wm @ colm).reshape(cout, D, H, W)

    def vjp_x(gy):
        gym = gy.reshape(cout, D * H * W)
        dcol = (wm.T @ gym).reshape(cin, kd, kh, kw, D, H, W)
        dxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    dxp[:, a:a + D, b:b + H, c:c + W] += dcol[:, a, b, c]
        return dxp[:, pd:pd + D, ph:ph + H, pw:pw + W]

    def vjp_w(gy):
        gym = gy.reshape(cout, D * H * W)
        return (gym @ colm.T).reshape(weights.shape)

    parents = [(x, vjp_x), (weights, vjp_w)]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None, None]
        parents.append((bias, lambda gy: gy.sum(axis=(1, 2, 3))))
    return _make(out, parents)


# -- resampling -------------------------------------------------------------


def avg_pool_axis(x, axis):
    """Average-pool by 2 along one axis; a trailing odd element pools alone."""
    x = as_tensor(x)
    n = x.shape[axis]
    sl_even = [slice(None)] * x.ndim
    sl_odd = [slice(None)] * x.ndim
    sl_even[axis] = slice(0, n - n % 2, 2)
    sl_odd[axis] = slice(1, n, 2)
    pooled = (getitem(x, tuple(sl_even)) + getitem(x, tuple(sl_odd))) * 0.5
    if n % 2 == 0:
        return pooled
    sl_last = [slice(None)] * x.ndim
    sl_last[axis] = slice(n - 1, n)
    return concat([pooled, getitem(x, tuple(sl_last))], axis=axis)


def avg_pool2d(x):
    """2x2 spatial average pooling of a (C, H, W) map."""
    return avg_pool_axis(avg_pool_axis(x, 1), 2)


def upsample2x_nearest(x):
    """Nearest-neighbour x2 spatial upsampling of a (C, H, W) map."""
    x = as_tensor(x)
    c, h, w = x.shape
    y = reshape(x, c, h, 1, w, 1)
    y = concat([y, y], axis=2)
    y = concat([y, y], axis=4)
    return reshape(y, c, 2 * h, 2 * w)


def _bilinear_indices(n_in, factor):
    out = np.arange(n_in * factor)
    src = (out + 0.5) / factor - 0.5
    i0 = np.floor(src)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1).astype(np.intp)
    hi = np.clip(i0 + 1, 0, n_in - 1).astype(np.intp)
    return lo, hi, t


def upsample_bilinear(x, factor):
    """Bilinear spatial upsampling of a (C, H, W) map by an integer factor."""
    x = as_tensor(x)
    c, h, w = x.shape
    hlo, hhi, ht = _bilinear_indices(h, factor)
    wlo, whi, wt = _bilinear_indices(w, factor)
    xr = x.data
    rows = xr[:, hlo, :] * (1.0 - ht)[None, :, None] + xr[:, hhi, :] * ht[None, :, None]
    out = rows[:, :, wlo] * (1.0 - wt)[None, None, :] + rows[:, :, whi] * wt[None, None, :]

    def vjp(g):
        grows = np.zeros((c, h * factor, w))
        np.add.at(grows, (slice(None), slice(None), wlo), g * (1.0 - wt)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), whi), g * wt[None, None, :])
        gx = np.zeros((c, h, w))
        np.add.at(gx, (slice(None), hlo, slice(None)), grows * (1.0 - ht)[None, :, None])
        np.add.at(gx, (slice(None), hhi, slice(None)), grows * ht[None, :, None])
        return gx

    return _make(out, [(x, vjp)])


def sample_axis1_linear(vol, pos, scale=1.0, offset=0.0):
    """Linearly sample a (G, D, H, W) volume along its D axis.

    The sampling position per pixel is ``pos*scale + offset`` where ``pos``
    is an (H, W) tensor. Contributions from outside [0, D-1] are zero.
    Differentiable in both the volume and the positions.
    """
    vol, pos = as_tensor(vol), as_tensor(pos)
    G, D, H, W = vol.shape
    p = pos.data * scale + offset
    i0 = np.floor(p).astype(np.intp)
    t = p - i0
    i1 = i0 + 1
    ok0 = (i0 >= 0) & (i0 <= D - 1)
    ok1 = (i1 >= 0) & (i1 <= D - 1)
    c0 = np.clip(i0, 0, D - 1)
    c1 = np.clip(i1, 0, D - 1)
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    v0 = np.where(ok0, vol.data[:, c0, hh, ww], 0.0)
    v1 = np.where(ok1, vol.data[:, c1, hh, ww], 0.0)
    out = v0 * (1.0 - t) + v1 * t

    def vjp_vol(g):
        gv = np.zeros((G, D, H, W))
        w0 = np.where(ok0, g * (1.0 - t), 0.0)
        w1 = np.where(ok1, g * t, 0.0)
        np.add.at(gv, (slice(None), c0, hh, ww), w0)
        np.add.at(gv, (slice(None), c1, hh, ww), w1)
        return gv

    def vjp_pos(g):
        return scale * np.sum(g * (v1 - v0), axis=0)

    return _make(out, [(vol, vjp_vol), (pos, vjp_pos)])
