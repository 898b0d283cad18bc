"""Training loop with separate optimizers for the backbone and the mask modules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericError, UsageError
from .models import MaskedNetwork
from .seeding import stream
from .tensor import Tensor

log = logging.getLogger(__name__)


class SGDMomentum:
    """SGD with heavy-ball momentum; weight decay is added to the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                raise UsageError(f"parameter {p.name or p.shape} has no gradient")
            g = p.grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if any(p.grad is None for p in self.params):
            raise UsageError("Adam.step called before gradients were populated")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_momentum_step(opt: SGDMomentum) -> None:
    opt.step()


def adam_step(opt: Adam) -> None:
    opt.step()


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mask_lr: float = 0.001
    mask_beta1: float = 0.9
    mask_beta2: float = 0.999
    mask_eps: float = 1e-8
    mask_weight_decay: float = 0.0001
    # (epoch, multiplier) pairs; None means x0.1 at 50% and 75% of training
    schedule: Optional[list[tuple[int, float]]] = None
    seed: int = 0
    freeze_branches: bool = False
    freeze_masks: bool = False
    augment_flip: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.mask_lr < 0:
            raise ConfigError("learning rates must be non-negative")

    def milestones(self) -> list[tuple[int, float]]:
        if self.schedule is not None:
            return sorted(self.schedule)
        return [(int(self.epochs * 0.5), 0.1), (int(self.epochs * 0.75), 0.1)]

    def multiplier(self, epoch: int) -> float:
        """LR factor in effect during (0-based) ``epoch``."""
        f = 1.0
        for at, mult in self.milestones():
            if epoch >= at:
                f *= mult
        return f


@dataclass
class ProportionTrace:
    """Per-epoch P_nonlinear of every mask module; row 0 is before training."""

    epochs: list[int] = field(default_factory=list)
    rows: list[list[float]] = field(default_factory=list)
    # per epoch, per module: (z values, mask1 bits)
    states: list[list[tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)

    @property
    def num_modules(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    def module(self, i: int) -> list[tuple[int, float]]:
        return [(e, r[i]) for e, r in zip(self.epochs, self.rows)]

    def append(self, epoch: int, net: MaskedNetwork) -> None:
        self.epochs.append(epoch)
        self.rows.append(net.proportions())
        self.states.append([(m.gate_logits().data.copy(), m.mask1_bits())
                            for m in net.mask_modules])


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    lr: float


@dataclass
class TrainResult:
    net: MaskedNetwork
    trace: ProportionTrace
    history: list[EpochRecord]
    step_losses: list[float]


def evaluate(net: MaskedNetwork, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy over ``data``."""
    total, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.inputs[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        logits = net.forward(x, detach_masks=True)
        total += T.softmax_cross_entropy(logits, y).item() * len(y)
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
    return total / len(data), correct / len(data)


def evaluate_top1(net: MaskedNetwork, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label (ties -> lowest index)."""
    return evaluate(net, data, batch_size)[1]


def _batches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch):
        yield perm[start:start + batch]


def train(net: MaskedNetwork, data: Dataset, cfg: TrainConfig,
          holdout: Optional[Dataset] = None, log_path=None,
          epoch_offset: int = 0) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch training in place on ``net``.

    Backbone parameters (and branch heads unless frozen) use SGD with
    momentum; mask modules use Adam.  The LR schedule scales both.  After
    every epoch the current mask proportions are appended to the trace.
    """
    cfg.validate()
    backbone = net.backbone_parameters()
    if not cfg.freeze_branches:
        backbone += net.branch_parameters()
    sgd = SGDMomentum(backbone, cfg.lr, cfg.momentum, cfg.weight_decay)
    mask_params = [] if cfg.freeze_masks else net.mask_parameters()
    adam = Adam(mask_params, cfg.mask_lr, cfg.mask_beta1, cfg.mask_beta2, cfg.mask_eps,
                cfg.mask_weight_decay) if mask_params else None

    trace = ProportionTrace()
    history: list[EpochRecord] = []
    step_losses: list[float] = []
    logf = open(log_path, "w") if log_path else None
    try:
        if logf:
            logf.write("epoch,split,loss,top1,lr\n")
        trace.append(epoch_offset, net)
        shuffle = stream(cfg.seed, "shuffle")
        flips = stream(cfg.seed, "augment")
        for epoch in range(cfg.epochs):
            mult = cfg.multiplier(epoch)
            sgd.lr = cfg.lr * mult
            if adam:
                adam.lr = cfg.mask_lr * mult
            total, correct = 0.0, 0
            for b, idx in enumerate(_batches(len(data), cfg.batch_size, shuffle)):
                x = data.inputs[idx]
                y = data.labels[idx]
                if cfg.augment_flip and x.ndim == 4:
                    flip = flips.random(len(idx)) < 0.5
                    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                net.zero_grad()
                logits = net.forward(x, detach_masks=cfg.freeze_masks)
                loss = T.softmax_cross_entropy(logits, y)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b}")
                loss.backward()
                sgd.step()
                if adam:
                    adam.step()
                step_losses.append(value)
                total += value * len(idx)
                correct += int((np.argmax(logits.data, axis=1) == y).sum())
            e = epoch_offset + epoch + 1
            rec = EpochRecord(e, "train", total / len(data), correct / len(data), sgd.lr)
            history.append(rec)
            if holdout is not None:
                hl, ha = evaluate(net, holdout)
                history.append(EpochRecord(e, "holdout", hl, ha, sgd.lr))
            trace.append(e, net)
            log.info("epoch %d loss %.4f top1 %.4f lr %g", e, rec.loss, rec.top1, rec.lr)
            if logf:
                for r in history[-(2 if holdout is not None else 1):]:
                    logf.write(format_log_line(r) + "\n")
    finally:
        if logf:
            logf.close()
    return TrainResult(net, trace, history, step_losses)


def format_log_line(r: EpochRecord) -> str:
    return f"{r.epoch},{r.split},{r.loss:.6f},{r.top1:.6f},{r.lr:.10g}"


def read_log(path) -> list[EpochRecord]:
    out = []
    for line in Path(path).read_text().splitlines()[1:]:
        e, split, loss, top1, lr = line.split(",")
        out.append(EpochRecord(int(e), split, float(loss), float(top1), float(lr)))
    return out


# --------------------------------------------------------------- trace files

def format_trace(trace: ProportionTrace) -> str:
    """CSV text: header ``epoch,module_0,...`` and one 6-decimal row per epoch."""
    if not trace.rows:
        raise UsageError("cannot export an empty trace")
    header = ["epoch"] + [f"module_{i}" for i in range(trace.num_modules)]
    lines = [",".join(header)]
    for e, row in zip(trace.epochs, trace.rows):
        lines.append(",".join([str(e)] + [f"{v:.6f}" for v in row]))
    return "\n".join(lines) + "\n"


def export_trace(trace: ProportionTrace, path) -> None:
    Path(path).write_text(format_trace(trace))


def read_trace(path) -> ProportionTrace:
    lines = Path(path).read_text().splitlines()
    trace = ProportionTrace()
    for line in lines[1:]:
        e, *vals = line.split(",")
        trace.epochs.append(int(e))
        trace.rows.append([float(v) for v in vals])
    return trace


def export_mask_states(trace: ProportionTrace, path) -> None:
    """One line per module per epoch: ``epoch module c z0;z1;... bits``."""
    lines = []
    for e, states in zip(trace.epochs, trace.states):
        for i, (z, bits) in enumerate(states):
            zs = ";".join(f"{v:.17g}" for v in z)
            lines.append(f"{e} {i} {len(z)} {zs} {''.join(str(int(b)) for b in bits)}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def trace_from_mask_states(path) -> ProportionTrace:
    """Rebuild proportions from a mask-state file written by :func:`export_mask_states`."""
    trace = ProportionTrace()
    for line in Path(path).read_text().splitlines():
        e, i, c, zs, bits = line.split(" ")
        e, i = int(e), int(i)
        if not trace.epochs or trace.epochs[-1] != e:
            trace.epochs.append(e)
            trace.rows.append([])
            trace.states.append([])
        b = np.array([int(ch) for ch in bits])
        trace.rows[-1].append(float(b.sum() / int(c)))
        trace.states[-1].append((np.array([float(v) for v in zs.split(";")]), b))
    return trace
