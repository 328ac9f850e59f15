"""Two-level U-Net mapping a normalised velocity patch to its corrected version."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..exceptions import ConfigurationError, ShapeError
from .layers import AvgPool, Conv2d, Module, ResBlock, SubPixelConv, to_nchw, to_nhwc


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    widths: tuple = (32, 64, 128)
    encoder_kernel: int = 7
    decoder_kernel: int = 3
    pool: int = 4
    io_groups: int = 2
    blocks_per_stage: int = 2
    # predict a correction added to the input instead of the corrected field
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ConfigurationError("need at least two levels (one pooling stage)")
        if self.encoder_kernel % 2 == 0 or self.decoder_kernel % 2 == 0:
            raise ConfigurationError("kernel sizes must be odd")
        if self.in_channels % self.io_groups or self.widths[0] % self.io_groups:
            raise ConfigurationError("io_groups must divide the input and first widths")
        if self.pool < 1 or self.blocks_per_stage < 1:
            raise ConfigurationError("pool and blocks_per_stage must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def size_multiple(self) -> int:
        return self.pool ** self.depth

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "widths": tuple(d["widths"])})


class _Stage(Module):
    def __init__(self, cin, cout, k, n, rng, dtype):
        super().__init__()
        self.blocks = [self.add(str(i), ResBlock(cin if i == 0 else cout, cout, k, rng, dtype))
                       for i in range(n)]

    def forward(self, x):
        for b in self.blocks:
            x = b.forward(x)
        return x

    def backward(self, dy):
        for b in reversed(self.blocks):
            dy = b.backward(dy)
        return dy


class UNet(Module):
    """Encoder (7x7 ResNet stages + average pooling), sub-pixel decoder (3x3) with
    concatenated skips, grouped convolutions at input and output.

    All convolutions are bias-free, so ``forward(0) == 0``.
    """

    def __init__(self, config: UNetConfig | None = None, dtype=np.float32):
        super().__init__()
        self.config = cfg = config or UNetConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        w = cfg.widths
        ke, kd, n = cfg.encoder_kernel, cfg.decoder_kernel, cfg.blocks_per_stage
        self.inp = self.add("inp", Conv2d(cfg.in_channels, w[0], ke, groups=cfg.io_groups,
                                          rng=rng, dtype=dtype))
        self.enc = [self.add(f"enc{i}", _Stage(w[0] if i == 0 else w[i - 1], w[i], ke, n, rng, dtype))
                    for i in range(cfg.depth)]
        self.pools = [AvgPool(cfg.pool) for _ in range(cfg.depth)]
        self.mid = self.add("mid", _Stage(w[-2], w[-1], ke, n, rng, dtype))
        self.up = {}
        self.dec = {}
        for i in reversed(range(cfg.depth)):
            self.up[i] = self.add(f"up{i}", SubPixelConv(w[i + 1], w[i], cfg.pool, kd, rng, dtype))
            self.dec[i] = self.add(f"dec{i}", _Stage(2 * w[i], w[i], kd, n, rng, dtype))
        self.out = self.add("out", Conv2d(w[0], cfg.in_channels, kd, groups=cfg.io_groups, rng=rng,
                                          init="zeros" if cfg.residual else "he", dtype=dtype))

    # -- parameters ------------------------------------------------------------------
    def parameters(self):
        return list(self.named_parameters())

    def gradients(self):
        return list(self.named_gradients())

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def astype(self, dtype):
        """Copy of the network with every kernel cast to ``dtype``."""
        net = UNet(self.config, dtype=dtype)
        for name, p in self.named_parameters():
            net.set_parameter(name, p.astype(dtype))
        return net

    # -- passes ------------------------------------------------------------------------
    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"layer input: expected (B, {self.config.in_channels}, S, S), got {x.shape}")
        m = self.config.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"layer input: spatial size {x.shape[2:]} not divisible by {m}")
        return to_nhwc(x.astype(self.dtype, copy=False))

    @staticmethod
    def _call(name, fn, x):
        try:
            return fn(x)
        except ShapeError as exc:
            raise ShapeError(f"layer {name}: {exc}") from exc

    def forward(self, x):
        squeeze = np.ndim(x) == 3
        x = self._check_input(x)
        cfg = self.config
        h = self._call("inp", self.inp.forward, x)
        skips = []
        for i in range(cfg.depth):
            h = self._call(f"enc{i}", self.enc[i].forward, h)
            skips.append(h)
            h = self._call(f"pool{i}", self.pools[i].forward, h)
        h = self._call("mid", self.mid.forward, h)
        for i in reversed(range(cfg.depth)):
            h = self._call(f"up{i}", self.up[i].forward, h)
            h = np.concatenate([h, skips[i]], axis=3)
            h = self._call(f"dec{i}", self.dec[i].forward, h)
        y = self._call("out", self.out.forward, h)
        if cfg.residual:
            y = y + x
        y = to_nchw(y)
        return y[0] if squeeze else y

    def backward(self, dy):
        """Accumulate parameter gradients for the last forward pass; returns d(loss)/d(input)."""
        squeeze = np.ndim(dy) == 3
        dy = np.asarray(dy, dtype=self.dtype)
        if squeeze:
            dy = dy[None]
        dy = to_nhwc(dy)
        cfg = self.config
        dh = self.out.backward(dy)
        dskips = [None] * cfg.depth
        for i in range(cfg.depth):
            dh = self.dec[i].backward(dh)
            c = dh.shape[3] // 2
            dskips[i] = dh[..., c:]
            dh = self.up[i].backward(np.ascontiguousarray(dh[..., :c]))
        dh = self.mid.backward(dh)
        for i in reversed(range(cfg.depth)):
            dh = self.pools[i].backward(dh) + dskips[i]
            dh = self.enc[i].backward(dh)
        dx = self.inp.backward(dh)
        if cfg.residual:
            dx = dx + dy
        dx = to_nchw(dx)
        return dx[0] if squeeze else dx

    __call__ = forward


def unet_forward(x, net: UNet):
    return net.forward(x)


def unet_backward(dy, net: UNet):
    return net.backward(dy)
