"""Learnable mask module that splits channels into non-linear and linear parts.

A free vector ``m`` goes through two affine maps with a ReLU between them and
a final tanh, giving gate logits ``z`` in (-1, 1).  Thresholding ``z`` yields a
binary mask for the non-linear channels and its complement for the linear
ones.  Thresholding has zero derivative almost everywhere, so backward uses
a straight-through rule instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

STE_SIGNS = {"paper": 1.0, "chain": -1.0}


def _ste_sign(convention: str) -> float:
    try:
        return STE_SIGNS[convention]
    except KeyError:
        raise ConfigError(f"unknown ste_sign_convention {convention!r}; expected paper or chain") from None


@dataclass
class MaskPair:
    """Complementary binary masks; ``mask1`` selects non-linear channels."""

    mask1: Tensor
    mask2: Tensor

    @property
    def bits1(self) -> np.ndarray:
        return self.mask1.data.astype(np.int64)

    @property
    def bits2(self) -> np.ndarray:
        return self.mask2.data.astype(np.int64)

    @property
    def channels(self) -> int:
        return self.mask1.shape[0]


@dataclass
class FeatureSplit:
    nonlinear: Tensor
    linear: Tensor


def ste_backward(grad_mask1: np.ndarray, grad_mask2: np.ndarray,
                 convention: str = "paper") -> np.ndarray:
    """Gradient reaching ``z`` from the binarization node.

    Both masks get Jacobian 1 under the ``paper`` convention.  ``chain`` uses
    -1 on the complement, which is what differentiating ``1 - mask1`` gives.
    """
    g1 = np.asarray(grad_mask1, dtype=np.float64)
    g2 = np.asarray(grad_mask2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise DimensionError(f"ste_backward: upstream shapes {g1.shape} and {g2.shape} differ")
    return g1 + _ste_sign(convention) * g2


def binarize(z: Union[Tensor, np.ndarray], tau: float = 0.0,
             convention: str = "paper") -> MaskPair:
    """Threshold gate logits: ``mask1[i] = 1`` iff ``z[i] > tau``.

    ``z[i] == tau`` goes to the linear side.  When ``z`` is on the graph the
    two masks are rows of one stacked node whose backward is
    :func:`ste_backward`.
    """
    z = T.as_tensor(z)
    if z.ndim != 1:
        raise DimensionError(f"binarize expects a vector, got {z.shape}")
    if not np.isfinite(tau):
        raise ConfigError(f"threshold must be finite, got {tau}")
    _ste_sign(convention)
    m1 = (z.data > tau).astype(np.float64)
    stacked = T.record(np.stack([m1, 1.0 - m1]), (z,),
                       lambda g: (ste_backward(g[0], g[1], convention),))
    return MaskPair(T.select(stacked, 0), T.select(stacked, 1))


def split_features(features: Tensor, masks: MaskPair) -> FeatureSplit:
    """Channel-wise products ``mask1 ⊙ F`` and ``mask2 ⊙ F``."""
    if features.ndim < 2 or features.shape[1] != masks.channels:
        raise DimensionError(
            f"split_features: feature map {features.shape} has a different channel count "
            f"than the masks ({masks.channels})")
    return FeatureSplit(T.mul(features, masks.mask1), T.mul(features, masks.mask2))


def proportion_nonlinear(mask1) -> float:
    bits = np.asarray(mask1.data if isinstance(mask1, Tensor) else mask1)
    return float(bits.sum() / bits.size)


def default_hidden(channels: int) -> int:
    return max(channels // 4, 4)


class MaskModule:
    """Parameters ``m, W1, b1, W2, b2`` plus the fixed threshold ``tau``."""

    def __init__(self, channels: int, hidden: Optional[int] = None, tau: float = 0.0,
                 ste_sign_convention: str = "paper", seed=None):
        if channels < 1:
            raise ConfigError(f"mask module needs at least one channel, got {channels}")
        hidden = default_hidden(channels) if hidden is None else hidden
        if hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {hidden}")
        _ste_sign(ste_sign_convention)
        self.channels = channels
        self.hidden = hidden
        self.tau = float(tau)
        self.ste_sign_convention = ste_sign_convention
        self.m = Tensor(np.zeros(channels), requires_grad=True, name="m")
        self.w1 = Tensor(np.zeros((hidden, channels)), requires_grad=True, name="w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="b1")
        self.w2 = Tensor(np.zeros((channels, hidden)), requires_grad=True, name="w2")
        self.b2 = Tensor(np.zeros(channels), requires_grad=True, name="b2")
        if seed is not None:
            init_positive(self, seed)

    def named_parameters(self, prefix: str = ""):
        for key in ("m", "w1", "b1", "w2", "b2"):
            yield prefix + key, getattr(self, key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def gate_logits(self) -> Tensor:
        """``z = tanh(W2 relu(W1 m + b1) + b2)`` as a length-``c`` vector."""
        m = T.reshape(self.m, (1, self.channels))
        h = T.relu(T.add_channel(T.matmul(m, T.transpose(self.w1)), self.b1))
        g = T.add_channel(T.matmul(h, T.transpose(self.w2)), self.b2)
        return T.reshape(T.tanh(g), (self.channels,))

    def masks(self, detach: bool = False) -> MaskPair:
        z = self.gate_logits()
        if detach:
            z = z.detach()
        return binarize(z, self.tau, self.ste_sign_convention)

    def mask1_bits(self) -> np.ndarray:
        z = self.gate_logits().data
        return (z > self.tau).astype(np.int64)


def init_positive(module: MaskModule, seed) -> MaskModule:
    """Initialize so every gate logit starts strictly positive.

    ``m`` is standard normal, ``W1``/``W2`` fan-in uniform, ``b1 = 0`` and
    ``b2 = 1``.  Any channel whose random term would pull the pre-tanh value
    below 1 gets its bias raised to compensate, so ``z >= tanh(1)`` holds for
    every seed without resampling.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c, h = module.channels, module.hidden
    module.m.data = rng.standard_normal(c)
    b = 1.0 / np.sqrt(c)
    module.w1.data = rng.uniform(-b, b, size=(h, c))
    module.b1.data = np.zeros(h)
    b = 1.0 / np.sqrt(h)
    module.w2.data = rng.uniform(-b, b, size=(c, h))
    drift = module.w2.data @ np.maximum(module.w1.data @ module.m.data, 0.0)
    module.b2.data = 1.0 + np.maximum(0.0, -drift)
    return module
