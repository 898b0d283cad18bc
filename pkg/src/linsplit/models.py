"""Masked networks: backbone blocks, mask modules, branch heads, classifier.

Blocks are numbered from 1, matching their position in the width plan
``widths = [input, w1, ..., wL]``: block ``i`` maps ``widths[i-1]`` to
``widths[i]``.  A mask module at block ``i`` intercepts that block's
pre-activation.  Its non-linear share continues through ReLU into block
``i+1``; its linear share goes through an affine branch head straight to the
classifier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .layers import ChannelAffine, Conv2d, ConvBlock, FCBlock, Linear, LinearBranchHead, lecun_uniform
from .mask import MaskModule, MaskPair, binarize, proportion_nonlinear, split_features
from .seeding import stream
from .tensor import Tensor

KINDS = ("mlp-m", "convnet-m")


@dataclass
class ModelConfig:
    kind: str = "mlp-m"
    widths: Sequence[int] = (3, 16, 16)
    mask_placement: Sequence[int] = (1,)
    num_classes: int = 2
    use_residual: bool = False
    kernel_size: int = 3
    mask_hidden: Optional[int] = None
    head_dim: Optional[int] = None
    tau: float = 0.0
    ste_sign_convention: str = "paper"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.mask_placement = tuple(int(i) for i in self.mask_placement)

    @property
    def num_blocks(self) -> int:
        return len(self.widths) - 1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_blocks < 1 or any(w < 1 for w in self.widths):
            raise ConfigError(f"width plan {self.widths} needs an input width and >= 1 block")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.use_residual and self.kind != "convnet-m":
            raise ConfigError("use_residual applies to convnet-m only")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        p = self.mask_placement
        if any(b <= a for a, b in zip(p, p[1:])):
            raise ConfigError(f"mask placement {p} must be strictly increasing")
        if p and (p[0] < 1 or p[-1] >= self.num_blocks):
            raise ConfigError(
                f"mask placement {p} invalid: blocks are 1..{self.num_blocks} and at least "
                "one block must follow the last mask module")


def default_config(kind: str, in_width: int, num_classes: int, **overrides) -> ModelConfig:
    """Desk-scale defaults: mlp-m ``[in,16,16]`` masked at block 1; convnet-m
    ``[in,16,32,64]`` masked at blocks 1 and 2."""
    if kind == "mlp-m":
        cfg = dict(widths=(in_width, 16, 16), mask_placement=(1,))
    elif kind == "convnet-m":
        cfg = dict(widths=(in_width, 16, 32, 64), mask_placement=(1, 2))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    cfg.update(overrides)
    return ModelConfig(kind=kind, num_classes=num_classes, **cfg)


@dataclass
class Stage:
    """One backbone block plus whatever mask machinery is attached to it.

    ``frozen_mask1`` holds a constant mask left behind by pruning.
    """

    block: Union[FCBlock, ConvBlock]
    pool: bool = False
    mask: Optional[MaskModule] = None
    head: Optional[LinearBranchHead] = None
    frozen_mask1: Optional[np.ndarray] = None

    @property
    def out_channels(self) -> int:
        return self.block.out_channels


@dataclass
class Collected:
    logits: Tensor
    masks: list[MaskPair] = field(default_factory=list)
    proportions: list[float] = field(default_factory=list)


class MaskedNetwork:
    def __init__(self, kind: str, stages: list[Stage], classifier: Linear):
        self.kind = kind
        self.stages = stages
        self.classifier = classifier
        self.check()

    # ---------------------------------------------------------------- layout
    def check(self) -> None:
        heads = sum(s.head is not None for s in self.stages)
        masks = sum(s.mask is not None for s in self.stages)
        frozen_heads = sum(s.head is not None and s.frozen_mask1 is not None for s in self.stages)
        if masks + frozen_heads != heads:
            raise DimensionError("each mask module needs exactly one branch head")
        want = self.feature_width()
        if self.classifier.in_features != want:
            raise DimensionError(
                f"classifier takes {self.classifier.in_features} inputs, features give {want}")

    def feature_width(self) -> int:
        return sum(s.head.out_dim for s in self.stages if s.head is not None) + \
            self.stages[-1].out_channels

    @property
    def mask_stages(self) -> list[int]:
        """1-based indices of blocks carrying a live mask module."""
        return [i + 1 for i, s in enumerate(self.stages) if s.mask is not None]

    @property
    def mask_modules(self) -> list[MaskModule]:
        return [s.mask for s in self.stages if s.mask is not None]

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    # ------------------------------------------------------------ parameters
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, s in enumerate(self.stages, start=1):
            yield from s.block.named_parameters(f"blocks.{i}.")
            if s.mask is not None:
                yield from s.mask.named_parameters(f"blocks.{i}.mask.")
            if s.head is not None:
                yield from s.head.named_parameters(f"blocks.{i}.head.")
        yield from self.classifier.named_parameters("classifier.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def backbone_parameters(self) -> list[Tensor]:
        out = [p for s in self.stages for _, p in s.block.named_parameters()]
        return out + [p for _, p in self.classifier.named_parameters()]

    def branch_parameters(self) -> list[Tensor]:
        return [p for s in self.stages if s.head is not None for _, p in s.head.named_parameters()]

    def mask_parameters(self) -> list[Tensor]:
        return [p for m in self.mask_modules for p in m.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # --------------------------------------------------------------- forward
    def _run(self, x, detach_masks: bool) -> Collected:
        h = T.as_tensor(x)
        expected = 2 if self.kind == "mlp-m" else 4
        if h.ndim != expected:
            raise DimensionError(f"{self.kind} expects {expected}-D input, got {h.shape}")
        out = Collected(logits=None)
        branches = []
        for s in self.stages:
            f = s.block(h)
            if s.mask is not None:
                pair = s.mask.masks(detach=detach_masks)
                split = split_features(f, pair)
                branches.append(s.head(split.linear))
                h = T.relu(split.nonlinear)
                out.masks.append(pair)
                out.proportions.append(proportion_nonlinear(pair.mask1))
            elif s.frozen_mask1 is not None:
                pair = binarize(s.frozen_mask1 - 0.5, 0.0)
                split = split_features(f, pair)
                if s.head is not None:
                    branches.append(s.head(split.linear))
                h = T.relu(split.nonlinear)
            else:
                h = T.relu(f)
            if s.pool:
                h = T.maxpool2d(h, 2, 2)
        final = T.global_avg_pool(h)
        feats = T.concat(branches + [final], axis=1) if branches else final
        out.logits = self.classifier(feats)
        return out

    def forward(self, x, detach_masks: bool = False) -> Tensor:
        return self._run(x, detach_masks).logits

    __call__ = forward

    def forward_collect(self, x, detach_masks: bool = False) -> Collected:
        return self._run(x, detach_masks)

    def proportions(self) -> list[float]:
        return [proportion_nonlinear(m.mask1_bits()) for m in self.mask_modules]

    def clone(self) -> "MaskedNetwork":
        return from_arrays(to_arrays(self))


def forward(net: MaskedNetwork, x) -> Tensor:
    return net.forward(x)


def forward_collect(net: MaskedNetwork, x) -> tuple[Tensor, list[MaskPair], list[float]]:
    c = net.forward_collect(x)
    return c.logits, c.masks, c.proportions


def build(config: ModelConfig, seed: int = 0) -> MaskedNetwork:
    """Construct and initialize a network; each component draws from its own stream."""
    config.validate()
    stages = []
    n = config.num_blocks
    for i in range(1, n + 1):
        c_in, c_out = config.widths[i - 1], config.widths[i]
        rng = stream(seed, "init", f"block{i}")
        if config.kind == "mlp-m":
            block = FCBlock(Linear.init(c_in, c_out, rng))
            pool = False
        else:
            block = ConvBlock.init(c_in, c_out, config.kernel_size, rng, config.use_residual)
            pool = i < n
        stage = Stage(block, pool=pool)
        if i in config.mask_placement:
            stage.mask = MaskModule(c_out, config.mask_hidden, config.tau, config.ste_sign_convention,
                                    seed=stream(seed, "init", f"mask{i}"))
            d = config.head_dim or c_out
            stage.head = LinearBranchHead.init(c_out, d, stream(seed, "init", f"head{i}"))
        stages.append(stage)

    # classifier columns are drawn per segment so the final-feature block matches
    # an unmasked network built with the same seed
    final_w = config.widths[-1]
    k = config.num_classes
    cols = []
    for i, s in enumerate(stages, start=1):
        if s.head is not None:
            rng = stream(seed, "init", "classifier", f"branch{i}")
            cols.append(lecun_uniform(rng, (k, s.head.out_dim), s.head.out_dim))
    cols.append(lecun_uniform(stream(seed, "init", "classifier", "final"), (k, final_w), final_w))
    classifier = Linear(np.concatenate(cols, axis=1), np.zeros(k))
    return MaskedNetwork(config.kind, stages, classifier)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MGK1"


def to_arrays(net: MaskedNetwork) -> dict[str, np.ndarray]:
    """Flatten a network, including structure flags, into named arrays."""
    out: dict[str, np.ndarray] = {"meta.kind": np.array(float(KINDS.index(net.kind)))}
    for i, s in enumerate(net.stages, start=1):
        p = f"blocks.{i}."
        out[p + "pool"] = np.array(float(s.pool))
        if s.block.in_select is not None:
            out[p + "in_select"] = s.block.in_select.astype(np.float64)
        if s.mask is not None:
            out[p + "mask.tau"] = np.array(s.mask.tau)
            out[p + "mask.ste_sign"] = np.array(1.0 if s.mask.ste_sign_convention == "paper" else -1.0)
        if s.frozen_mask1 is not None:
            out[p + "frozen_mask1"] = np.asarray(s.frozen_mask1, dtype=np.float64)
    for name, t in net.named_parameters():
        out[name] = t.data.copy()
    return out


def from_arrays(arrays: dict[str, np.ndarray]) -> MaskedNetwork:
    a = dict(arrays)
    try:
        kind = KINDS[int(a.pop("meta.kind"))]
        stages = []
        i = 1
        while f"blocks.{i}.pool" in a:
            p = f"blocks.{i}."
            pool = bool(a.pop(p + "pool"))
            sel = a.pop(p + "in_select", None)
            sel = None if sel is None else sel.astype(np.intp)
            if kind == "mlp-m":
                block = FCBlock(Linear(a.pop(p + "fc.weight"), a.pop(p + "fc.bias")), sel)
            else:
                conv = Conv2d(a.pop(p + "conv.weight"), a.pop(p + "conv.bias"))
                if p + "conv2.weight" in a:
                    shortcut = None
                    if p + "shortcut.weight" in a:
                        shortcut = Conv2d(a.pop(p + "shortcut.weight"), a.pop(p + "shortcut.bias"))
                    block = ConvBlock(
                        conv,
                        Conv2d(a.pop(p + "conv2.weight"), a.pop(p + "conv2.bias")),
                        ChannelAffine(a.pop(p + "affine1.scale"), a.pop(p + "affine1.shift")),
                        ChannelAffine(a.pop(p + "affine2.scale"), a.pop(p + "affine2.shift")),
                        shortcut, sel)
                else:
                    block = ConvBlock(conv, in_select=sel)
            stage = Stage(block, pool=pool)
            if p + "mask.m" in a:
                w1 = a.pop(p + "mask.w1")
                sign = float(a.pop(p + "mask.ste_sign"))
                mod = MaskModule(w1.shape[1], w1.shape[0], float(a.pop(p + "mask.tau")),
                                 "paper" if sign > 0 else "chain")
                mod.w1.data = w1
                for key in ("m", "b1", "w2", "b2"):
                    getattr(mod, key).data = a.pop(p + "mask." + key)
                stage.mask = mod
            if p + "frozen_mask1" in a:
                stage.frozen_mask1 = a.pop(p + "frozen_mask1").astype(np.int64)
            if p + "head.weight" in a:
                stage.head = LinearBranchHead(Linear(a.pop(p + "head.weight"), a.pop(p + "head.bias")))
            stages.append(stage)
            i += 1
        classifier = Linear(a.pop("classifier.weight"), a.pop("classifier.bias"))
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entry {exc.args[0]}") from None
    if a:
        raise FormatError(f"checkpoint has unexpected entries: {sorted(a)}")
    if not stages:
        raise FormatError("checkpoint contains no blocks")
    return MaskedNetwork(kind, stages, classifier)


def save_checkpoint(net: MaskedNetwork, path) -> None:
    """Write ``MGK1`` followed by (name length, name, rank, shape, float64 LE values)."""
    chunks = [MAGIC]
    for name, arr in to_arrays(net).items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an MGK1 checkpoint")
    pos, out = 4, {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos} (needed {n} more)")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def load_checkpoint(path) -> MaskedNetwork:
    return from_arrays(read_checkpoint_arrays(path))
