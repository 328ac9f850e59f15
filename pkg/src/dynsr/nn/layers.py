"""Differentiable building blocks with explicit forward/backward passes.

Public functions take ``(batch, channels, height, width)`` tensors. The modules
work channels-last internally (``(B, H, W, C)``) so that im2col copies are
contiguous; :class:`~dynsr.nn.unet.UNet` converts at its boundary.

No layer has a bias, so every layer maps zero to zero. Convolutions use
replicate padding and keep the spatial size. Kernels are stored as
``(out_ch, in_ch / groups, k, k)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigurationError, ShapeError


# -- channels-last primitives ----------------------------------------------------
def _pad_nhwc(x, p, mode="edge"):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)


def _pad_nhwc_backward(gp, p):
    """Adjoint of replicate padding: fold the border gradients onto the edges."""
    if p == 0:
        return gp
    h = gp.shape[1] - 2 * p
    w = gp.shape[2] - 2 * p
    t = gp[:, p:p + h].copy()
    t[:, 0] += gp[:, :p].sum(axis=1)
    t[:, -1] += gp[:, p + h:].sum(axis=1)
    g = t[:, :, p:p + w].copy()
    g[:, :, 0] += t[:, :, :p].sum(axis=2)
    g[:, :, -1] += t[:, :, p + w:].sum(axis=2)
    return g


def _im2col_valid(xp, k):
    """``(B, Hp, Wp, C)`` -> ``(B*(Hp-k+1)*(Wp-k+1), k*k*C)``, ordered (di, dj, c)."""
    b, hp, wp, c = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))        # (B, Ho, Wo, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)


def _kernel_matrix(wg):
    """``(cout, cin, k, k)`` -> ``(k*k*cin, cout)`` matching :func:`_im2col_valid`."""
    cout, cin, k, _ = wg.shape
    return wg.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)


def _check_conv(shape, weight, groups):
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-D input, got shape {shape}")
    cout, cin_g, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd-sized, got {weight.shape}")
    if shape[-1] % groups or cout % groups:
        raise ShapeError(f"channels ({shape[-1]} in, {cout} out) not divisible by groups={groups}")
    if shape[-1] // groups != cin_g:
        raise ShapeError(f"input has {shape[-1]} channels, kernel expects {cin_g * groups}")
    return cout, cin_g, k


def conv_nhwc(x, weight, groups=1):
    """Returns ``(y, cache)`` for a same-size, replicate-padded, bias-free convolution."""
    cout, cin_g, k = _check_conv(x.shape, weight, groups)
    b, h, w, _ = x.shape
    cout_g = cout // groups
    xp = _pad_nhwc(x, k // 2)
    outs, cols = [], []
    for gi in range(groups):
        xg = xp[..., gi * cin_g:(gi + 1) * cin_g] if groups > 1 else xp
        cg = _im2col_valid(xg, k)
        outs.append(cg @ _kernel_matrix(weight[gi * cout_g:(gi + 1) * cout_g]))
        cols.append(cg)
    y = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    return y.reshape(b, h, w, cout), (x.shape, cols)


def conv_nhwc_backward(dy, weight, cache, groups=1):
    """Gradients ``(dx, dweight)`` of :func:`conv_nhwc`."""
    x_shape, cols = cache
    cout, cin_g, k, _ = weight.shape
    b, h, w, _ = x_shape
    p = k // 2
    cout_g = cout // groups
    dyf = dy.reshape(b * h * w, cout)
    # gradient w.r.t. the padded input is a full correlation with the flipped kernel
    dyp = np.pad(dy, ((0, 0), (2 * p, 2 * p), (2 * p, 2 * p), (0, 0)))
    dws, dxs = [], []
    for gi in range(groups):
        sl = slice(gi * cout_g, (gi + 1) * cout_g)
        wg = weight[sl]
        dws.append((cols[gi].T @ dyf[:, sl]).reshape(k, k, cin_g, cout_g).transpose(3, 2, 0, 1))
        flipped = wg[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)        # (cin, cout, k, k)
        dcols = _im2col_valid(dyp[..., sl] if groups > 1 else dyp, k)
        dxp = (dcols @ _kernel_matrix(flipped)).reshape(b, h + 2 * p, w + 2 * p, cin_g)
        dxs.append(_pad_nhwc_backward(dxp, p))
    dx = dxs[0] if groups == 1 else np.concatenate(dxs, axis=3)
    dw = dws[0] if groups == 1 else np.concatenate(dws, axis=0)
    return dx, np.ascontiguousarray(dw)


def _pool_nhwc(x, k):
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial size {h}x{w} not divisible by pooling kernel {k}")
    return x.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))


def _pool_nhwc_backward(dy, k):
    return np.repeat(np.repeat(dy, k, axis=1), k, axis=2) / (k * k)


def _shuffle_nhwc(x, r):
    b, h, w, c = x.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels not divisible by r^2 = {r * r}")
    nc = c // (r * r)
    return x.reshape(b, h, w, nc, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(b, h * r, w * r, nc)


def _unshuffle_nhwc(y, r):
    b, hr, wr, c = y.shape
    h, w = hr // r, wr // r
    return y.reshape(b, h, r, w, r, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h, w, c * r * r)


def to_nhwc(x):
    return np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))


def to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# -- public channels-first functions ------------------------------------------------
def conv2d_forward(x, weight, groups=1):
    """Same-size grouped convolution (cross-correlation) without bias, ``(B, C, H, W)``."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D input, got shape {x.shape}")
    y, _ = conv_nhwc(to_nhwc(x), weight, groups)
    return to_nchw(y)


def conv2d_backward(dy, x, weight, groups=1):
    """Gradients ``(dx, dweight)`` for :func:`conv2d_forward` at input ``x``."""
    _, cache = conv_nhwc(to_nhwc(x), weight, groups)
    dx, dw = conv_nhwc_backward(to_nhwc(dy), weight, cache, groups)
    return to_nchw(dx), dw


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x):
    return x * sigmoid(x)


def swish_backward(dy, x):
    s = sigmoid(x)
    return dy * (s + x * s * (1.0 - s))


def avg_pool(x, k=4):
    return to_nchw(_pool_nhwc(to_nhwc(x), k))


def avg_pool_backward(dy, k=4):
    return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)


def pixel_shuffle(x, r):
    """``(B, r^2 C, H, W)`` -> ``(B, C, rH, rW)``, out[c, r i + a, r j + b] = in[c r^2 + a r + b, i, j]."""
    return to_nchw(_shuffle_nhwc(to_nhwc(x), r))


def pixel_unshuffle(y, r):
    """Inverse permutation of :func:`pixel_shuffle` (also its adjoint)."""
    return to_nchw(_unshuffle_nhwc(to_nhwc(y), r))


# -- initialisers ----------------------------------------------------------------
def he_normal(shape, rng, gain=1.0, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(dtype)


def icnr_init(shape, r, rng, base=he_normal, dtype=np.float32):
    """Replicate ``out/r^2`` sub-kernels so sub-pixel upsampling starts as nearest neighbour."""
    cout = shape[0]
    if cout % (r * r):
        raise ConfigurationError(f"{cout} output channels not divisible by r^2 = {r * r}")
    sub = base((cout // (r * r),) + tuple(shape[1:]), rng, dtype=dtype)
    return np.repeat(sub, r * r, axis=0)


# -- modules (channels-last) -------------------------------------------------------
class Module:
    """Minimal layer container: ordered parameters and matching gradients."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._children: list[tuple[str, "Module"]] = []

    def add(self, name, module):
        self._children.append((name, module))
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children:
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_gradients(self, prefix=""):
        for name in self._params:
            yield prefix + name, self._grads.get(name)
        for cname, child in self._children:
            yield from child.named_gradients(f"{prefix}{cname}.")

    def set_parameter(self, name, value):
        head, _, rest = name.partition(".")
        if not rest:
            if head not in self._params:
                raise KeyError(name)
            if self._params[head].shape != value.shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} != {self._params[head].shape}")
            self._params[head] = value
            return
        for cname, child in self._children:
            if cname == head:
                child.set_parameter(rest, value)
                return
        raise KeyError(name)

    def zero_grad(self):
        for name, p in self._params.items():
            self._grads[name] = np.zeros_like(p)
        for _, child in self._children:
            child.zero_grad()


class Conv2d(Module):
    def __init__(self, cin, cout, k, groups=1, rng=None, init="he", r=1, gain=1.0,
                 dtype=np.float32):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigurationError(f"channels {cin}->{cout} not divisible by groups={groups}")
        shape = (cout, cin // groups, k, k)
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        elif init == "icnr":
            w = icnr_init(shape, r, rng, base=lambda s, g, dtype: he_normal(s, g, gain, dtype),
                          dtype=dtype)
        else:
            w = he_normal(shape, rng, gain=gain, dtype=dtype)
        self._params["weight"] = w
        self.groups = groups
        self.k = k

    @property
    def weight(self):
        return self._params["weight"]

    def forward(self, x):
        y, self._cache = conv_nhwc(x, self.weight, self.groups)
        return y

    def backward(self, dy):
        dx, dw = conv_nhwc_backward(dy, self.weight, self._cache, self.groups)
        self._grads["weight"] = self._grads.get("weight", 0) + dw
        self._cache = None
        return dx


class Swish(Module):
    def forward(self, x):
        self._x = x
        return swish(x)

    def backward(self, dy):
        return swish_backward(dy, self._x)


class AvgPool(Module):
    def __init__(self, k=4):
        super().__init__()
        self.k = k

    def forward(self, x):
        return _pool_nhwc(x, self.k)

    def backward(self, dy):
        return _pool_nhwc_backward(dy, self.k)


class PixelShuffle(Module):
    def __init__(self, r):
        super().__init__()
        self.r = r

    def forward(self, x):
        return _shuffle_nhwc(x, self.r)

    def backward(self, dy):
        return _unshuffle_nhwc(dy, self.r)


class ResBlock(Module):
    """``conv -> swish -> conv`` plus a 1x1 convolution on the shortcut.

    The two branches are initialised at half variance each so a stack of
    blocks keeps activations at unit scale.
    """

    def __init__(self, cin, cout, k, rng, dtype=np.float32):
        super().__init__()
        half = np.sqrt(0.5)
        self.conv1 = self.add("conv1", Conv2d(cin, cout, k, rng=rng, dtype=dtype))
        self.act = Swish()
        self.conv2 = self.add("conv2", Conv2d(cout, cout, k, rng=rng, gain=half, dtype=dtype))
        self.skip = self.add("skip", Conv2d(cin, cout, 1, rng=rng, gain=half, dtype=dtype))

    def forward(self, x):
        return self.conv2.forward(self.act.forward(self.conv1.forward(x))) + self.skip.forward(x)

    def backward(self, dy):
        dx_main = self.conv1.backward(self.act.backward(self.conv2.backward(dy)))
        return dx_main + self.skip.backward(dy)


def resnet_block(x, block: ResBlock):
    """Channels-first convenience wrapper around :meth:`ResBlock.forward`."""
    return to_nchw(block.forward(to_nhwc(x)))


class SubPixelConv(Module):
    """Channel-expanding convolution (ICNR initialised) followed by pixel shuffle."""

    def __init__(self, cin, cout, r, k, rng, dtype=np.float32):
        super().__init__()
        self.conv = self.add("conv", Conv2d(cin, cout * r * r, k, rng=rng, init="icnr", r=r,
                                            dtype=dtype))
        self.shuffle = PixelShuffle(r)

    def forward(self, x):
        return self.shuffle.forward(self.conv.forward(x))

    def backward(self, dy):
        return self.conv.backward(self.shuffle.backward(dy))
