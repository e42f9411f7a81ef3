"""Command-line entry point: synth, train, eval, predict, ablate, complexity.

Settings are layered: built-in defaults < INI config file < flags. The
config file uses sections ``[train] [model] [loss] [distill] [augment]
[data]``; unknown sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import contextlib
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .complexity import REFERENCE_POINTS, complexity_report
from .data import (
    AugmentConfig,
    DatasetError,
    SynthConfig,
    compute_stats,
    dataset_stats,
    generate_synthetic,
    load_dataset,
    preprocess,
    split_samples,
)
from .distill import DistillConfig
from .engine import TrainConfig, build_from_checkpoint, evaluate, predict_masks, run_ablation, strip_heads, train
from .losses import LossWeights
from .metrics import boundary, write_csv, write_json
from .network import ConfigError, ModelConfig

log = logging.getLogger("dsvm_unet")

OUTPUT_ROOT_ENV = "DSVM_UNET_OUTPUT"
NESTED = {"model": ModelConfig, "loss": LossWeights, "distill": DistillConfig, "augment": AugmentConfig}
DATA_KEYS = {"root": "", "classes": 2, "train_split": "train", "val_split": "val", "train_fraction": 0.7, "split_seed": 0}
PRESETS = {"desk": ModelConfig.desk, "paper-scale": ModelConfig.paper_scale}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- config layering


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, keys, allowed) -> None:
    unknown = sorted(set(keys) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def read_config(path: Optional[str]) -> Dict[str, dict]:
    """Parse an INI file into {section: {key: value}}, rejecting unknown names."""
    layers: Dict[str, dict] = {}
    if not path:
        return layers
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in cp.sections():
        layers[section] = {k: _parse_value(v) for k, v in cp[section].items()}
    validate_layers(layers)
    return layers


def validate_layers(layers: Dict[str, dict]) -> None:
    top = _field_names(TrainConfig) - set(NESTED)
    for section, values in layers.items():
        if section == "train":
            _check_keys(section, values, top)
        elif section == "data":
            _check_keys(section, values, DATA_KEYS)
        elif section in NESTED:
            _check_keys(section, values, _field_names(NESTED[section]))
        else:
            raise ConfigError(f"unknown config section [{section}]")


def apply_overrides(layers: Dict[str, dict], items: List[str]) -> None:
    """``section.key=value`` overrides from repeated ``--set`` flags."""
    for item in items or []:
        name, sep, value = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        layers.setdefault(section, {})[key] = _parse_value(value)
    validate_layers(layers)


def build_train_config(layers: Dict[str, dict], preset: str = "desk") -> TrainConfig:
    model_kw = dict(layers.get("model", {}))
    classes = layers.get("data", {}).get("classes", DATA_KEYS["classes"])
    model_kw.setdefault("num_classes", 1 if classes <= 2 else classes)
    kw = dict(layers.get("train", {}))
    kw["model"] = PRESETS[preset](**model_kw)
    for name in ("loss", "distill", "augment"):
        kw[name] = NESTED[name](**layers.get(name, {}))
    if preset == "paper-scale":
        kw.setdefault("epochs", 300)
        kw.setdefault("batch_size", 32)
    return TrainConfig(**kw)


def _collect(args) -> Dict[str, dict]:
    layers = read_config(getattr(args, "config", None))
    flag_map = {
        "seed": ("train", "seed"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "lr": ("train", "base_lr"),
        "threads": ("train", "threads"),
        "alpha": ("loss", "alpha"),
        "beta": ("loss", "beta"),
        "data": ("data", "root"),
        "classes": ("data", "classes"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            layers.setdefault(section, {})[key] = value
    apply_overrides(layers, getattr(args, "set", None))
    return layers


# ---------------------------------------------------------------- staged outputs


def output_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


@contextlib.contextmanager
def staged(target: Path, force: bool):
    """Write into ``<target>.partial`` and move into place only on success."""
    if target.exists() and any(target.iterdir()):
        if not force:
            raise CliError(f"{target} exists and is not empty (use --force to overwrite)")
    partial = target.with_name(target.name + ".partial")
    shutil.rmtree(partial, ignore_errors=True)
    partial.mkdir(parents=True)
    try:
        yield partial
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    partial.rename(target)


def _datasets(layers, size: int):
    """Train and val samples plus cached normalisation stats.

    Without a val split on disk, the train split is partitioned by
    ``train_fraction``.
    """
    data = {**DATA_KEYS, **layers.get("data", {})}
    if not data["root"]:
        raise CliError("no dataset given (use --data or [data] root)")
    root = Path(data["root"])
    if not root.is_dir():
        raise CliError(f"dataset directory not found: {root}")
    tr = load_dataset(root, data["train_split"], size, data["classes"])
    if not tr:
        raise CliError(f"training split {root / data['train_split']} is empty")
    if (root / data["val_split"] / "images").is_dir():
        va = load_dataset(root, data["val_split"], size, data["classes"])
        stats = dataset_stats(root, tr, data["train_split"])
    else:
        tr, va = split_samples(tr, data["train_fraction"], data["split_seed"])
        log.warning("no %s split; holding out %d of the training images", data["val_split"], len(va))
        stats = compute_stats(tr)
    return tr, va, stats


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_samples=args.n, size=args.size, num_classes=args.classes, shapes=args.shapes,
        noise=args.noise, seed=args.seed, n_val=args.n_val,
    )
    target = output_dir(args, "synth")
    with staged(target, args.force) as tmp:
        generate_synthetic(cfg, tmp)
    print(target / "manifest.json")
    return 0


def cmd_train(args) -> int:
    layers = _collect(args)
    cfg = build_train_config(layers, args.preset)
    tr, va, stats = _datasets(layers, cfg.model.input_size)
    target = output_dir(args, "train")
    if args.resume:
        # resuming continues in place
        res = train(cfg, tr, va or None, out_dir=target, resume=args.resume)
    else:
        with staged(target, args.force) as tmp:
            res = train(cfg, tr, va or None, out_dir=tmp, norm_stats=stats)
    print(f"best {'mDSC' if cfg.multiclass else 'mIoU'} {res.best_metric:.4f} at epoch {res.best_epoch}; outputs in {target}")
    return 0


def _load_checkpoint(path):
    if not path or not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return build_from_checkpoint(path)


def cmd_eval(args) -> int:
    cfg, model, _, blob = _load_checkpoint(args.checkpoint)
    classes = args.classes if args.classes is not None else max(cfg.model.num_classes, 2)
    samples = load_dataset(args.data, args.split, cfg.model.input_size, classes)
    if not samples:
        raise CliError(f"no samples in {args.data}/{args.split}")
    result = evaluate(model, samples, blob.get("norm_stats"), num_classes=classes)
    target = output_dir(args, "eval")
    with staged(target, args.force) as tmp:
        write_csv(tmp / "metrics.csv", result.per_image)
        write_json(tmp / "metrics.json", result.per_image, result.summary)
    s = result.summary
    print(f"mIoU {s.miou:.4f}  DSC {s.dsc:.4f}  Acc {s.acc:.4f}  Spe {s.spe:.4f}  Sen {s.sen:.4f}  HD95 {s.hd95:.2f}")
    return 0


PRED_COLOUR = np.array([255, 40, 40], dtype=np.float32)
GT_COLOUR = np.array([40, 230, 60], dtype=np.float32)


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: Optional[np.ndarray] = None, alpha: float = 0.35) -> np.ndarray:
    """(H, W, 3) uint8: image tinted where predicted, prediction boundary red, ground truth green."""
    out = image.astype(np.float32)
    fg = pred > 0
    out[fg] = (1 - alpha) * out[fg] + alpha * PRED_COLOUR
    if gt is not None:
        out[boundary(gt > 0)] = GT_COLOUR
    out[boundary(fg)] = PRED_COLOUR
    return out.clip(0, 255).astype(np.uint8)


def cmd_predict(args) -> int:
    cfg, model, _, blob = _load_checkpoint(args.checkpoint)
    classes = max(cfg.model.num_classes, 2)
    raw = load_dataset(args.data, args.split, cfg.model.input_size, classes)
    if not raw:
        raise CliError(f"no samples in {args.data}/{args.split}")
    preds = predict_masks(model, [preprocess(s, cfg.model.input_size, blob.get("norm_stats")) for s in raw])
    target = output_dir(args, "predict")
    with staged(target, args.force) as tmp:
        (tmp / "overlays").mkdir()
        (tmp / "masks").mkdir()
        for s, p in zip(raw, preds):
            rgb = (s.image.transpose(1, 2, 0) * 255).round().clip(0, 255).astype(np.uint8)
            Image.fromarray(render_overlay(rgb, p, s.mask)).save(tmp / "overlays" / f"{s.id}.png")
            mask = (p * 255) if cfg.model.num_classes == 1 else p
            Image.fromarray(mask.astype(np.uint8), "L").save(tmp / "masks" / f"{s.id}.png")
    print(f"wrote {len(raw)} predictions to {target}")
    return 0


def cmd_ablate(args) -> int:
    layers = _collect(args)
    cfg = build_train_config(layers, args.preset)
    tr, va, stats = _datasets(layers, cfg.model.input_size)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    target = output_dir(args, "ablate")
    with staged(target, args.force) as tmp:
        result = run_ablation(cfg, tr, va or None, seeds, out_dir=tmp, norm_stats=stats)
        (tmp / "ablation_raw.json").write_text(json.dumps({str(k): v for k, v in result.raw.items()}, indent=2))
    for row in result.formatted():
        print(",".join(str(v) for v in row.values()))
    return 0


def cmd_complexity(args) -> int:
    model_cfg = PRESETS[args.preset]()
    size = args.input_size or model_cfg.input_size
    rep = complexity_report(model_cfg, input_size=size)
    s = rep.summary()
    ref_p, ref_f = REFERENCE_POINTS["vm-unet"]
    own_p, own_f = REFERENCE_POINTS["dsvm-unet"]
    s["reference"] = {
        "vm_unet": {"params_m": ref_p, "gflops": ref_f},
        "published_distilled": {"params_m": own_p, "gflops": own_f},
        "params_rel_to_vm_unet": rep.params_m / ref_p - 1,
        "dense_gmacs_rel_to_vm_unet": rep.macs_dense / 1e9 / ref_f - 1,
        "params_rel_to_published": rep.params_m / own_p - 1,
        "dense_gmacs_rel_to_published": rep.macs_dense / 1e9 / own_f - 1,
        "note": "published distilled figures do not state their backbone depths; compare against vm_unet",
    }
    s["per_module"] = rep.per_module
    target = output_dir(args, "complexity")
    with staged(target, args.force) as tmp:
        (tmp / "complexity.json").write_text(json.dumps(s, indent=2))
    print(format_complexity(rep))
    return 0


def format_complexity(rep) -> str:
    lines = [f"{'module':<22}{'params':>12}{'dense GMACs':>14}{'GMACs':>10}"]
    for name, row in rep.per_module.items():
        lines.append(f"{name:<22}{row['params']:>12,}{row['macs_dense'] / 1e9:>14.4f}{row['macs'] / 1e9:>10.4f}")
    ref_p, ref_f = REFERENCE_POINTS["vm-unet"]
    own_p, own_f = REFERENCE_POINTS["dsvm-unet"]
    lines += [
        "",
        f"input {rep.input_size}x{rep.input_size}",
        f"inference params   {rep.params_m:.2f} M   (training, with heads: {rep.param_count_training / 1e6:.2f} M)",
        f"dense-layer GMACs  {rep.macs_dense / 1e9:.3f}   (hook-profiler convention)",
        f"full forward GFLOPs {rep.flops_forward / 1e9:.3f}   (2 x MACs incl. scan and SSM projections)",
        f"VM-UNet reference  {ref_p} M / {ref_f} G: params {rep.params_m / ref_p - 1:+.1%}, "
        f"dense GMACs {rep.macs_dense / 1e9 / ref_f - 1:+.1%}",
        f"published distilled {own_p} M / {own_f} G (backbone depths undisclosed): params "
        f"{rep.params_m / own_p - 1:+.1%}, dense GMACs {rep.macs_dense / 1e9 / own_f - 1:+.1%}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="dsvm-unet", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>, else runs/<command>)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    def training(sp):
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="model size preset")
        sp.add_argument("--data", default=None, help="dataset root with train/ and val/ splits")
        sp.add_argument("--classes", type=int, default=None, help="dataset classes incl. background (2 = binary)")
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.add_argument("--epochs", type=int, default=None, help="training epochs")
        sp.add_argument("--batch-size", type=int, default=None, help="batch size")
        sp.add_argument("--lr", type=float, default=None, help="peak learning rate")
        sp.add_argument("--alpha", type=float, default=None, help="projection distillation weight")
        sp.add_argument("--beta", type=float, default=None, help="progressive distillation weight")
        sp.add_argument("--threads", type=int, default=None, help="torch threads (0 keeps the torch default)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
        common(sp)

    sp = sub.add_parser("synth", help="generate a synthetic shapes dataset", formatter_class=fmt)
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--n", type=int, default=64, help="training samples")
    sp.add_argument("--n-val", type=int, default=0, help="validation samples")
    sp.add_argument("--size", type=int, default=64, help="image side length")
    sp.add_argument("--classes", type=int, default=2, help="classes incl. background (2 = binary)")
    sp.add_argument("--shapes", choices=("ellipse", "polygon", "mixed"), default="mixed", help="shape family")
    sp.add_argument("--noise", type=float, default=0.04, help="Gaussian noise std")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model", formatter_class=fmt)
    training(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to resume from (continues in --out)")
    sp.set_defaults(func=cmd_train)

    for name, func, desc in (("eval", cmd_eval, "evaluate a checkpoint"), ("predict", cmd_predict, "write mask PNGs and overlays")):
        sp = sub.add_parser(name, help=desc, formatter_class=fmt)
        sp.add_argument("--checkpoint", required=True, help="checkpoint file")
        sp.add_argument("--data", required=True, help="dataset root")
        sp.add_argument("--split", default="val", help="split to use")
        if name == "eval":
            sp.add_argument("--classes", type=int, default=None, help="dataset classes incl. background")
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help="train the four objective variants", formatter_class=fmt)
    training(sp)
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("complexity", help="parameter and FLOP report", formatter_class=fmt)
    sp.add_argument("--preset", choices=sorted(PRESETS), default="paper-scale", help="model size preset")
    sp.add_argument("--input-size", type=int, default=None, help="input side length (default: preset)")
    common(sp)
    sp.set_defaults(func=cmd_complexity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, ValueError, TypeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
