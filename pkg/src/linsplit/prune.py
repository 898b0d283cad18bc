"""Mask-guided structural pruning.

The earliest masked block becomes a fast track: its channels all stay in the
backbone, its mask is frozen and its branch head keeps feeding the
classifier.  For every later masked block, the linear channels are dropped
along with the filters producing them, the matching input slices of the
next block, the block's branch head and its classifier columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import PlanError, StructuralError
from .layers import ConvBlock, Linear
from .models import MaskedNetwork
from .train import TrainConfig, TrainResult, evaluate_top1, train


@dataclass
class BlockPlan:
    block: int
    keep: np.ndarray
    fast_track: bool
    channels: int


@dataclass
class KeepPlan:
    blocks: list[BlockPlan]

    @property
    def fast_track(self) -> BlockPlan:
        return next(b for b in self.blocks if b.fast_track)


def derive_keep_plan(net: MaskedNetwork) -> KeepPlan:
    """Retain the ``mask1 == 1`` channels of every masked block."""
    stages = net.mask_stages
    if not stages:
        raise PlanError("network has no mask modules to guide pruning")
    plans = []
    for n, idx in enumerate(stages):
        mod = net.stages[idx - 1].mask
        keep = np.flatnonzero(mod.mask1_bits())
        if n > 0 and keep.size == 0:
            raise PlanError(
                f"mask at block {idx} marks every channel linear; no non-linear path would remain")
        plans.append(BlockPlan(idx, keep, n == 0, mod.channels))
    return KeepPlan(plans)


def _slice_inputs(block, keep: np.ndarray, select: bool) -> None:
    """Drop input channels not in ``keep`` from the layers reading the block input.

    With ``select`` the block keeps receiving the full-width tensor and picks
    the kept channels itself.
    """
    for layer in block.input_layers():
        w = layer.weight.data
        layer.weight.data = np.ascontiguousarray(w[:, keep])
    if select:
        prev = block.in_select
        block.in_select = keep.copy() if prev is None else prev[keep]


def _slice_outputs(block, keep: np.ndarray) -> None:
    layer = block.fc if hasattr(block, "fc") else block.conv
    layer.weight.data = np.ascontiguousarray(layer.weight.data[keep])
    layer.bias.data = layer.bias.data[keep].copy()


def rebuild_pruned(net: MaskedNetwork, plan: KeepPlan) -> MaskedNetwork:
    """Return a compact copy of ``net``; ``net`` itself is left untouched.

    Retained weights are copied exactly, so before fine-tuning the result
    computes the same logits as ``net`` with its later branch heads zeroed.
    """
    if [b.block for b in plan.blocks] != net.mask_stages:
        raise StructuralError(
            f"plan covers blocks {[b.block for b in plan.blocks]}, network masks {net.mask_stages}")
    if sum(b.fast_track for b in plan.blocks) != 1 or not plan.blocks[0].fast_track:
        raise StructuralError("exactly the earliest masked block must be the fast track")
    for b in plan.blocks:
        keep = b.keep
        if b.channels != net.stages[b.block - 1].mask.channels or (
                keep.size and (keep.min() < 0 or keep.max() >= b.channels
                               or np.any(np.diff(keep) <= 0))):
            raise StructuralError(f"keep set for block {b.block} is not a sorted subset of its channels")

    out = net.clone()
    # classifier column ranges, one per head in order, then the final features
    spans, start = {}, 0
    for i, s in enumerate(out.stages, start=1):
        if s.head is not None:
            spans[i] = (start, start + s.head.out_dim)
            start += s.head.out_dim
    cols = np.ones(out.classifier.in_features, dtype=bool)

    for b in plan.blocks:
        stage = out.stages[b.block - 1]
        nxt = out.stages[b.block]
        bits = np.zeros(b.channels, dtype=np.int64)
        bits[b.keep] = 1
        stage.mask = None
        residual = isinstance(stage.block, ConvBlock) and stage.block.residual
        if b.fast_track:
            stage.frozen_mask1 = bits
            if 0 < b.keep.size < b.channels:
                _slice_inputs(nxt.block, b.keep, select=True)
            continue
        lo, hi = spans[b.block]
        cols[lo:hi] = False
        stage.head = None
        if residual:
            # the skip path needs full width; keep the filters, freeze the mask
            stage.frozen_mask1 = bits
            if b.keep.size < b.channels:
                _slice_inputs(nxt.block, b.keep, select=True)
        elif b.keep.size < b.channels:
            _slice_outputs(stage.block, b.keep)
            _slice_inputs(nxt.block, b.keep, select=False)

    w = out.classifier.weight.data[:, cols]
    out.classifier = Linear(np.ascontiguousarray(w), out.classifier.bias.data.copy())
    out.check()
    return out


def zero_later_branches(net: MaskedNetwork) -> MaskedNetwork:
    """Copy of ``net`` with every branch head after the first zeroed out."""
    out = net.clone()
    heads = [s.head for s in out.stages if s.head is not None]
    for head in heads[1:]:
        head.affine.weight.data[...] = 0.0
        head.affine.bias.data[...] = 0.0
    return out


def count_params(net: MaskedNetwork) -> int:
    return int(sum(p.data.size for p in net.parameters()))


def finetune_config(epochs: int = 40, seed: int = 0, batch_size: int = 32,
                    momentum: float = 0.9, weight_decay: float = 1e-4) -> TrainConfig:
    """lr 0.001, divided by 10 at epochs 10 and 20, masks frozen."""
    return TrainConfig(epochs=epochs, batch_size=batch_size, lr=0.001, momentum=momentum,
                       weight_decay=weight_decay, schedule=[(10, 0.1), (20, 0.1)], seed=seed,
                       freeze_masks=True)


def finetune(net: MaskedNetwork, data: Dataset, epochs: int = 40, seed: int = 0,
             holdout: Optional[Dataset] = None, log_path=None, **kw) -> TrainResult:
    return train(net, data, finetune_config(epochs, seed, **kw), holdout, log_path)


@dataclass
class PruneReport:
    model: str
    params_before: int
    params_after: int
    accuracy_before: float
    accuracy_after_prune: float
    accuracy_after_finetune: float

    @property
    def params_reduction(self) -> float:
        return 1.0 - self.params_after / self.params_before

    @property
    def acc_drop(self) -> float:
        return self.accuracy_before - self.accuracy_after_finetune

    def csv_header(self) -> str:
        return ("model,params_before,params_after,params_reduction_pct,acc_before,"
                "acc_after_prune,acc_after_finetune,acc_drop")

    def csv_row(self) -> str:
        return (f"{self.model},{self.params_before},{self.params_after},"
                f"{100 * self.params_reduction:.1f},{self.accuracy_before:.6f},"
                f"{self.accuracy_after_prune:.6f},{self.accuracy_after_finetune:.6f},"
                f"{self.acc_drop:.6f}")

    def text(self) -> str:
        return "\n".join([
            f"model: {self.model}",
            f"params: {self.params_before} -> {self.params_after} "
            f"(Params.↓ {100 * self.params_reduction:.1f}%)",
            f"top-1 before pruning:      {100 * self.accuracy_before:.2f}%",
            f"top-1 after pruning:       {100 * self.accuracy_after_prune:.2f}%",
            f"top-1 after fine-tuning:   {100 * self.accuracy_after_finetune:.2f}%",
            f"Acc.↓ {100 * self.acc_drop:.2f}%",
        ]) + "\n"

    def write(self, directory) -> None:
        d = Path(directory)
        (d / "prune_report.csv").write_text(self.csv_header() + "\n" + self.csv_row() + "\n")
        (d / "prune_report.txt").write_text(self.text())


def make_report(model: str, before: MaskedNetwork, after: MaskedNetwork, acc_before: float,
                acc_after_prune: float, acc_after_finetune: float) -> PruneReport:
    report = PruneReport(model, count_params(before), count_params(after), acc_before,
                         acc_after_prune, acc_after_finetune)
    assert report.params_after <= report.params_before
    return report


def prune_and_finetune(net: MaskedNetwork, data: Dataset, eval_data: Dataset, epochs: int = 40,
                       seed: int = 0, model: str = "net", log_path=None,
                       **kw) -> tuple[MaskedNetwork, PruneReport]:
    """Full pipeline: plan, rebuild, evaluate, fine-tune, report."""
    plan = derive_keep_plan(net)
    pruned = rebuild_pruned(net, plan)
    acc0 = evaluate_top1(net, eval_data)
    acc1 = evaluate_top1(pruned, eval_data)
    finetune(pruned, data, epochs, seed, log_path=log_path, **kw)
    acc2 = evaluate_top1(pruned, eval_data)
    return pruned, make_report(model, net, pruned, acc0, acc1, acc2)
