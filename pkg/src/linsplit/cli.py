"""Command-line front end: ``linsplit {train,eval,trace,prune,make-idx}``.

Exit codes: 0 success, 2 user error (bad config, missing files, invalid
plan), 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path
from typing import Optional

from .data import (Dataset, SyntheticSpec, generate_synthetic_3d, load_csv, load_idx,
                   make_segment_digits, split_holdout, write_idx)
from .errors import ConfigError, LinsplitError, NumericError
from .models import build, default_config, load_checkpoint, save_checkpoint
from .prune import PruneReport, derive_keep_plan, finetune, make_report, rebuild_pruned
from .train import (TrainConfig, evaluate_top1, export_mask_states, export_trace, format_trace,
                    trace_from_mask_states, train)

log = logging.getLogger("linsplit")

CHECKPOINT = "checkpoint.mgk"
PRUNED = "pruned.mgk"

DEFAULTS = {
    "model": {"kind": "mlp-m"},
    "train": {"epochs": "50", "batch_size": "32", "holdout": "0"},
    "prune": {"finetune_epochs": "40"},
    "data": {"synth_samples": "200", "synth_noise": "0.1", "synth_separation": "2.0"},
}


class UserError(LinsplitError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_config(args) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        cp.read(path)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    flag_map = [("model", "kind", args.model), ("train", "epochs", args.epochs),
                ("model", "mask_placement", args.mask_placement),
                ("model", "ste_sign_convention", args.ste_sign_convention)]
    for section, name, value in flag_map:
        if value is not None:
            cp.set(section, name, str(value))
    if args.freeze_branches:
        cp.set("train", "freeze_branches", "true")
    return cp


def load_dataset(selector: str, cp: configparser.ConfigParser, seed: int) -> Dataset:
    if selector == "synthetic":
        d = cp["data"]
        return generate_synthetic_3d(SyntheticSpec(
            int(d["synth_samples"]), float(d["synth_noise"]), seed, float(d["synth_separation"])))
    kind, _, rest = selector.partition(":")
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise UserError("idx dataset must be given as idx:<images>,<labels>")
        for p in parts:
            if not Path(p).is_file():
                raise UserError(f"dataset file not found: {p}")
        return load_idx(*parts)
    if kind == "csv":
        if not Path(rest).is_file():
            raise UserError(f"dataset file not found: {rest}")
        shape = cp.get("data", "csv_shape", fallback=None)
        if not shape:
            raise ConfigError("csv datasets need data.csv_shape = width,height,channels")
        w, h, c = _ints(shape)
        return load_csv(rest, w, h, c)
    raise UserError(f"unknown dataset selector {selector!r}")


def split_data(data: Dataset, cp, seed: int) -> tuple[Dataset, Optional[Dataset]]:
    k = cp.getint("train", "holdout")
    if k == 0:
        return data, None
    return split_holdout(data, k, seed)


def model_from_config(cp, data: Dataset):
    m = cp["model"]
    kind = m["kind"]
    in_width = data.inputs.shape[1]
    extra = {}
    if "widths" in m:
        extra["widths"] = (in_width,) + _ints(m["widths"])
    if "mask_placement" in m:
        extra["mask_placement"] = _ints(m["mask_placement"])
    for key, conv in (("use_residual", _bool), ("kernel_size", int), ("mask_hidden", int),
                      ("head_dim", int), ("tau", float), ("ste_sign_convention", str)):
        if key in m:
            extra[key] = conv(m[key])
    return default_config(kind, in_width, data.num_classes, **extra)


def _schedule(text: str) -> list[tuple[int, float]]:
    out = []
    for item in text.split(","):
        e, _, mult = item.partition(":")
        out.append((int(e), float(mult)))
    return out


def train_config(cp, seed: int) -> TrainConfig:
    t = cp["train"]
    cfg = TrainConfig(seed=seed)
    for key in ("epochs", "batch_size"):
        setattr(cfg, key, int(t[key]))
    for key in ("lr", "momentum", "weight_decay", "mask_lr", "mask_weight_decay"):
        if key in t:
            setattr(cfg, key, float(t[key]))
    for key in ("freeze_branches", "freeze_masks", "augment_flip"):
        if key in t:
            setattr(cfg, key, _bool(t[key]))
    if t.get("schedule"):
        cfg.schedule = _schedule(t["schedule"])
    return cfg


def _checkpoint_path(args, name: str = CHECKPOINT) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / name
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    return path


def _out_dir(args) -> Path:
    if not args.out:
        raise UserError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UserError(f"{path} exists; pass --force to overwrite")


def cmd_train(args) -> int:
    cp = load_config(args)
    data = load_dataset(args.dataset, cp, args.seed)
    train_set, holdout = split_data(data, cp, args.seed)
    out = _out_dir(args)
    ckpt = out / CHECKPOINT
    _guard(ckpt, args.force)
    net = build(model_from_config(cp, data), args.seed)
    result = train(net, train_set, train_config(cp, args.seed), holdout, out / "train.log")
    save_checkpoint(net, ckpt)
    export_trace(result.trace, out / "trace.csv")
    export_mask_states(result.trace, out / "mask_state.txt")
    final = [r for r in result.history if r.split == "train"]
    if final:
        print(f"final train loss={final[-1].loss:.6f} top1={final[-1].top1:.6f}")
    return 0


def cmd_eval(args) -> int:
    cp = load_config(args)
    net = load_checkpoint(_checkpoint_path(args))
    data = load_dataset(args.dataset, cp, args.seed)
    if args.split != "all":
        train_set, holdout = split_data(data, cp, args.seed)
        data = train_set if args.split == "train" else holdout
        if data is None:
            raise UserError("no holdout split configured (train.holdout = 0)")
    print(f"top1={evaluate_top1(net, data):.6f}")
    return 0


def cmd_trace(args) -> int:
    ckpt = _checkpoint_path(args)
    states = ckpt.parent / "mask_state.txt"
    if not states.is_file():
        raise UserError(f"no mask state log next to {ckpt}")
    sys.stdout.write(format_trace(trace_from_mask_states(states)))
    return 0


def cmd_prune(args) -> int:
    cp = load_config(args)
    src = _checkpoint_path(args)
    net = load_checkpoint(src)
    data = load_dataset(args.dataset, cp, args.seed)
    train_set, holdout = split_data(data, cp, args.seed)
    eval_set = holdout if holdout is not None else train_set
    out = _out_dir(args)
    dst = out / PRUNED
    _guard(dst, args.force)
    plan = derive_keep_plan(net)
    pruned = rebuild_pruned(net, plan)
    acc0 = evaluate_top1(net, eval_set)
    acc1 = evaluate_top1(pruned, eval_set)
    epochs = cp.getint("prune", "finetune_epochs")
    batch = cp.getint("prune", "batch_size", fallback=cp.getint("train", "batch_size"))
    finetune(pruned, train_set, epochs, args.seed, log_path=out / "finetune.log", batch_size=batch)
    acc2 = evaluate_top1(pruned, eval_set)
    report: PruneReport = make_report(cp["model"]["kind"], net, pruned, acc0, acc1, acc2)
    save_checkpoint(pruned, dst)
    report.write(out)
    sys.stdout.write(report.text())
    return 0


def cmd_make_idx(args) -> int:
    out = _out_dir(args)
    imgs, labels = make_segment_digits(args.samples, args.size, args.seed)
    write_idx(imgs, labels, out / "images.idx", out / "labels.idx")
    print(f"wrote {args.samples} images to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file with [model]/[train]/[prune] sections")
    common.add_argument("--dataset", default="synthetic",
                        help="synthetic | idx:<images>,<labels> | csv:<path>")
    common.add_argument("--model", choices=["mlp-m", "convnet-m"])
    common.add_argument("--epochs", type=int)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path (defaults to <out>/checkpoint.mgk)")
    common.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    common.add_argument("--freeze-branches", action="store_true")
    common.add_argument("--mask-placement", help="comma list of 1-based block indices")
    common.add_argument("--ste-sign-convention", choices=["paper", "chain"])
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="linsplit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common]).set_defaults(func=cmd_train)
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--split", choices=["all", "train", "holdout"], default="all")
    ev.set_defaults(func=cmd_eval)
    sub.add_parser("trace", parents=[common]).set_defaults(func=cmd_trace)
    sub.add_parser("prune", parents=[common]).set_defaults(func=cmd_prune)
    mk = sub.add_parser("make-idx", parents=[common], help="write a procedural digit set as IDX")
    mk.add_argument("--samples", type=int, default=10000)
    mk.add_argument("--size", type=int, default=16)
    mk.set_defaults(func=cmd_make_idx)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LinsplitError, configparser.Error, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
