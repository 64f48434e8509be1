"""Encoder / decoder networks built from strided convolutions and residual
blocks.

The encoder halves the spatial dims once per fold with stride-2 4x4
convolutions, runs a stack of residual blocks, and projects to the latent
channels. The decoder mirrors it with transposed convolutions. Sizes are
all configurable so tests can run desk-scale variants of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from softvq import autodiff as ad
from softvq.autodiff import Tensor

DOWN_KERNEL = 4  # stride-2 resampling kernel size
DOWN_STRIDE = 2
DOWN_PAD = 1
BLOCK_KERNEL = 3


@dataclass(frozen=True)
class NetConfig:
    """Shared shape description for one encoder/decoder pair."""

    height: int
    width: int
    channels: int
    widths: tuple = (64,)
    downsample_folds: int = 1
    latent_channels: int = 8
    num_residual_blocks: int = 0
    skip_every: int = 3
    activation: str = "leaky_relu"
    io_kernel: int = 3
    latent_bound: float = 2.0  # scaled-tanh cap on encoder outputs; 0 disables

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.channels <= 0:
            raise ValueError("image dims must be positive")
        folds = self.downsample_folds
        if folds < 0:
            raise ValueError("downsample_folds must be >= 0")
        if self.height % (1 << folds) or self.width % (1 << folds):
            raise ValueError(
                f"{self.height}x{self.width} not divisible by 2^{folds}")
        if len(self.widths) != max(folds, 1) or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must list {max(folds, 1)} positive stage widths")
        if self.num_residual_blocks < 0:
            raise ValueError("num_residual_blocks must be >= 0")
        if self.skip_every < 1:
            raise ValueError("skip_every must be >= 1")
        if self.activation not in ("leaky_relu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.io_kernel < 1 or self.io_kernel % 2 == 0:
            raise ValueError("io_kernel must be odd")
        if self.latent_channels <= 0:
            raise ValueError("latent_channels must be positive")
        if self.latent_bound < 0:
            raise ValueError("latent_bound must be >= 0")

    @property
    def latent_hw(self):
        s = 1 << self.downsample_folds
        return self.height // s, self.width // s

    @property
    def latent_dim(self):
        h, w = self.latent_hw
        return h * w * self.latent_channels

    @property
    def body_width(self):
        return self.widths[-1]


class ParamStore:
    """Ordered name -> Tensor map for every trainable array.

    Names are unique and shapes are fixed once created; obtain() returns an
    existing tensor (for checkpoint-loaded stores) or creates a fresh one.
    """

    def __init__(self):
        self._params = {}

    def obtain(self, name, shape, init_fn, dtype=np.float64):
        shape = tuple(shape)
        if name in self._params:
            t = self._params[name]
            if t.shape != shape:
                raise ValueError(f"param {name!r} has shape {t.shape}, expected {shape}")
            return t
        t = Tensor(init_fn(shape).astype(dtype), requires_grad=True)
        self._params[name] = t
        return t

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate param {name!r}")
        self._params[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def count_values(self):
        return sum(t.size for t in self._params.values())

    def astype(self, dtype):
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.astype(dtype)))
        return out


def _he_uniform(rng, fan_in):
    limit = np.sqrt(6.0 / fan_in)

    def init(shape):
        return rng.uniform(-limit, limit, shape)

    return init


def _zeros(shape):
    return np.zeros(shape)


class _Conv:
    def __init__(self, store, rng, name, c_in, c_out, kernel, stride, pad,
                 transpose=False):
        fan_in = c_in * kernel * kernel
        wshape = (c_in, c_out, kernel, kernel) if transpose else (c_out, c_in, kernel, kernel)
        self.w = store.obtain(f"{name}.w", wshape, _he_uniform(rng, fan_in))
        self.b = store.obtain(f"{name}.b", (c_out,), _zeros)
        self.stride = stride
        self.pad = pad
        self.transpose = transpose

    def __call__(self, x):
        if self.transpose:
            return ad.conv2d_transpose(x, self.w, self.b, stride=self.stride, pad=self.pad)
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class _ResidualBlock:
    """conv3x3 -> activation -> conv3x3, added back onto the input."""

    def __init__(self, store, rng, name, width, act):
        pad = BLOCK_KERNEL // 2
        self.conv1 = _Conv(store, rng, f"{name}.conv1", width, width, BLOCK_KERNEL, 1, pad)
        self.conv2 = _Conv(store, rng, f"{name}.conv2", width, width, BLOCK_KERNEL, 1, pad)
        self.act = act

    def __call__(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def _activation(cfg):
    if cfg.activation == "relu":
        return ad.relu
    return lambda t: ad.leaky_relu(t, slope=0.2)


def _run_blocks(blocks, skip_every, x):
    # an extra skip connection wraps every `skip_every` consecutive blocks
    anchor = x
    for i, block in enumerate(blocks, start=1):
        x = block(x)
        if i % skip_every == 0:
            x = x + anchor
            anchor = x
    return x


class Encoder:
    """Image batch (N, C, H, W) -> latent batch (N, latent_channels, H', W')."""

    def __init__(self, cfg, store, rng):
        self.cfg = cfg
        act = _activation(cfg)
        self.act = act
        self.downs = []
        c_prev = cfg.channels
        for i in range(cfg.downsample_folds):
            c_out = cfg.widths[i]
            self.downs.append(_Conv(store, rng, f"enc.down{i}", c_prev, c_out,
                                    DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD))
            c_prev = c_out
        self.stem = None
        if cfg.downsample_folds == 0:
            self.stem = _Conv(store, rng, "enc.stem", c_prev, cfg.body_width,
                              cfg.io_kernel, 1, cfg.io_kernel // 2)
            c_prev = cfg.body_width
        self.blocks = [_ResidualBlock(store, rng, f"enc.block{i}", c_prev, act)
                       for i in range(cfg.num_residual_blocks)]
        self.head = _Conv(store, rng, "enc.head", c_prev, cfg.latent_channels,
                          cfg.io_kernel, 1, cfg.io_kernel // 2)

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.channels:
            raise ValueError(f"encoder expects (N, {self.cfg.channels}, H, W), got {x.shape}")
        for conv in self.downs:
            x = self.act(conv(x))
        if self.stem is not None:
            x = self.act(self.stem(x))
        x = _run_blocks(self.blocks, self.cfg.skip_every, x)
        x = self.head(x)
        bound = self.cfg.latent_bound
        if bound:
            # keeps latents inside the codebook's reach so the softmax over
            # distances stays informative at fixed sharpness
            x = ad.scale(ad.tanh(ad.scale(x, 1.0 / bound)), bound)
        return x


class Decoder:
    """Latent batch -> image batch with the encoder's input shape."""

    def __init__(self, cfg, store, rng):
        self.cfg = cfg
        act = _activation(cfg)
        self.act = act
        self.stem = _Conv(store, rng, "dec.stem", cfg.latent_channels, cfg.body_width,
                          cfg.io_kernel, 1, cfg.io_kernel // 2)
        self.blocks = [_ResidualBlock(store, rng, f"dec.block{i}", cfg.body_width, act)
                       for i in range(cfg.num_residual_blocks)]
        self.ups = []
        c_prev = cfg.body_width
        for i in range(cfg.downsample_folds):
            stage = cfg.downsample_folds - 1 - i
            c_out = cfg.widths[stage - 1] if stage > 0 else cfg.widths[0]
            self.ups.append(_Conv(store, rng, f"dec.up{i}", c_prev, c_out,
                                  DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD, transpose=True))
            c_prev = c_out
        self.tail = _Conv(store, rng, "dec.tail", c_prev, cfg.channels,
                          cfg.io_kernel, 1, cfg.io_kernel // 2)

    def __call__(self, z):
        lh, lw = self.cfg.latent_hw
        if z.ndim != 4 or z.shape[1:] != (self.cfg.latent_channels, lh, lw):
            raise ValueError(
                f"decoder expects (N, {self.cfg.latent_channels}, {lh}, {lw}), got {z.shape}")
        x = self.act(self.stem(z))
        x = _run_blocks(self.blocks, self.cfg.skip_every, x)
        for conv in self.ups:
            x = self.act(conv(x))
        return self.tail(x)


def init_params(cfg, seed):
    """Fresh He-uniform parameter store for one encoder/decoder pair."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    build_encoder(cfg, store, rng)
    build_decoder(cfg, store, rng)
    return store


def build_encoder(cfg, store, rng=None):
    return Encoder(cfg, store, rng if rng is not None else np.random.default_rng(0))


def build_decoder(cfg, store, rng=None):
    return Decoder(cfg, store, rng if rng is not None else np.random.default_rng(0))
