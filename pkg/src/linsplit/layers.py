"""Trainable layers built on the tensor ops."""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

NamedParams = Iterator[tuple[str, Tensor]]


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def lecun_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Fully-connected layer ``x Wᵀ + b`` with ``W`` of shape out×in."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True, name="weight")
        self.bias = Tensor(bias, requires_grad=True, name="bias")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"Linear: weight {self.weight.shape} / bias {self.bias.shape}")

    @classmethod
    def init(cls, in_features: int, out_features: int, rng: np.random.Generator,
             scheme=he_uniform) -> "Linear":
        return cls(scheme(rng, (out_features, in_features), in_features), np.zeros(out_features))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"Linear expects N×{self.in_features}, got {x.shape}")
        return T.add_channel(T.matmul(x, T.transpose(self.weight)), self.bias)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


def fc_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class Conv2d:
    """Same-padded stride-1 convolution with per-filter bias."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True, name="weight")
        self.bias = Tensor(bias, requires_grad=True, name="bias")
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"Conv2d: weight {self.weight.shape} / bias {self.bias.shape}")
        if self.weight.shape[2] != self.weight.shape[3] or self.weight.shape[2] % 2 == 0:
            raise DimensionError(f"Conv2d: kernels must be square and odd, got {self.weight.shape}")

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng: np.random.Generator) -> "Conv2d":
        fan_in = in_ch * k * k
        return cls(he_uniform(rng, (out_ch, in_ch, k, k), fan_in), np.zeros(out_ch))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        pad = self.weight.shape[2] // 2
        return T.add_channel(T.conv2d(x, self.weight, 1, pad), self.bias)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class ChannelAffine:
    """Learnable per-channel scale and shift; stands in for batch norm."""

    def __init__(self, scale: np.ndarray, shift: np.ndarray):
        self.scale = Tensor(scale, requires_grad=True, name="scale")
        self.shift = Tensor(shift, requires_grad=True, name="shift")

    @classmethod
    def init(cls, channels: int) -> "ChannelAffine":
        return cls(np.ones(channels), np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_channel(T.mul(x, self.scale), self.shift)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift


class LinearBranchHead:
    """Global average pool followed by one affine map; no activation anywhere."""

    def __init__(self, affine: Linear):
        self.affine = affine

    @classmethod
    def init(cls, channels: int, out_dim: int, rng: np.random.Generator) -> "LinearBranchHead":
        return cls(Linear.init(channels, out_dim, rng, scheme=lecun_uniform))

    @property
    def in_channels(self) -> int:
        return self.affine.in_features

    @property
    def out_dim(self) -> int:
        return self.affine.out_features

    def __call__(self, f_linear: Tensor) -> Tensor:
        if f_linear.shape[1] != self.in_channels:
            raise DimensionError(
                f"branch head expects {self.in_channels} channels, got {f_linear.shape}")
        return self.affine(T.global_avg_pool(f_linear))

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.affine.named_parameters(prefix)


def linear_branch_forward(head: LinearBranchHead, f_linear: Tensor) -> Tensor:
    return head(f_linear)


class FCBlock:
    """One fully-connected backbone layer returning its pre-activation."""

    def __init__(self, fc: Linear, in_select: Optional[Sequence[int]] = None):
        self.fc = fc
        self.in_select = None if in_select is None else np.asarray(in_select, dtype=np.intp)

    @property
    def out_channels(self) -> int:
        return self.fc.out_features

    def __call__(self, x: Tensor) -> Tensor:
        if self.in_select is not None:
            x = T.take_channels(x, self.in_select)
        return self.fc(x)

    def input_layers(self) -> list[Linear]:
        """Layers whose input columns follow the block input channels."""
        return [self.fc]

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.fc.named_parameters(prefix + "fc.")


class ConvBlock:
    """Convolutional backbone block returning the pre-activation map.

    Plain: ``conv(x)``.  Residual: ``aff2(conv2(relu(aff1(conv(x))))) + skip``
    where ``skip`` is a 1×1 projection when widths differ, identity otherwise.
    """

    def __init__(self, conv: Conv2d, conv2: Optional[Conv2d] = None,
                 affine1: Optional[ChannelAffine] = None, affine2: Optional[ChannelAffine] = None,
                 shortcut: Optional[Conv2d] = None, in_select: Optional[Sequence[int]] = None):
        self.conv = conv
        self.conv2 = conv2
        self.affine1 = affine1
        self.affine2 = affine2
        self.shortcut = shortcut
        self.in_select = None if in_select is None else np.asarray(in_select, dtype=np.intp)

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
             residual: bool = False) -> "ConvBlock":
        conv = Conv2d.init(in_ch, out_ch, k, rng)
        if not residual:
            return cls(conv)
        conv2 = Conv2d.init(out_ch, out_ch, k, rng)
        shortcut = Conv2d.init(in_ch, out_ch, 1, rng) if in_ch != out_ch else None
        return cls(conv, conv2, ChannelAffine.init(out_ch), ChannelAffine.init(out_ch), shortcut)

    @property
    def residual(self) -> bool:
        return self.conv2 is not None

    @property
    def out_channels(self) -> int:
        return (self.conv2 or self.conv).out_channels

    def __call__(self, x: Tensor) -> Tensor:
        xs = T.take_channels(x, self.in_select) if self.in_select is not None else x
        h = self.conv(xs)
        if not self.residual:
            return h
        h = T.relu(self.affine1(h))
        h = self.affine2(self.conv2(h))
        skip = self.shortcut(xs) if self.shortcut is not None else x
        return T.add(h, skip)

    def input_layers(self) -> list[Conv2d]:
        layers = [self.conv]
        if self.shortcut is not None:
            layers.append(self.shortcut)
        return layers

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.conv.named_parameters(prefix + "conv.")
        if self.residual:
            yield from self.affine1.named_parameters(prefix + "affine1.")
            yield from self.conv2.named_parameters(prefix + "conv2.")
            yield from self.affine2.named_parameters(prefix + "affine2.")
            if self.shortcut is not None:
                yield from self.shortcut.named_parameters(prefix + "shortcut.")


def conv_block_forward(block: ConvBlock, x: Tensor) -> Tensor:
    return block(x)
