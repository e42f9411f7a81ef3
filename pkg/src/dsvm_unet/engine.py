"""Training, evaluation, checkpointing and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .complexity import ComplexityReport, count_parameters, estimate_flops
from .data import AugmentConfig, Sample, compute_stats, iterate_batches, preprocess
from .distill import DistillConfig, DistillHeads, progressive_loss, projection_loss
from .losses import LossWeights, NonFiniteLossError, bcedice_with_logits, cedice_loss, total_loss
from .metrics import MetricReport, aggregate, binary_report, confusion_counts, multiclass_report, pooled
from .network import DSVMUNet, ModelConfig
from .ssm import ContractError

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalResult",
    "AblationResult",
    "cosine_lr",
    "train",
    "evaluate",
    "predict_masks",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "build_from_checkpoint",
    "strip_heads",
    "count_parameters",
    "estimate_flops",
    "ComplexityReport",
    "LOG_COLUMNS",
    "ABLATION_COLUMNS",
]

LOG_COLUMNS = ("step", "epoch", "lr", "l_seg", "l_proj", "l_prog", "l_total")
CHECKPOINT_FORMAT = "dsvm-unet-checkpoint/1"
SCHEDULES = ("periodic", "restart", "clamp")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 1e-2
    t_max: int = 50
    eta_min: float = 1e-5
    schedule: str = "periodic"
    seed: int = 0
    threads: int = 1
    grad_clip: float = 0.0
    output_dir: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.base_lr > self.eta_min > 0:
            raise ValueError("need base_lr > eta_min > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.t_max < 1:
            raise ValueError("batch_size and t_max must be >= 1")

    @property
    def multiclass(self) -> bool:
        return self.model.num_classes > 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"model": ModelConfig, "distill": DistillConfig, "loss": LossWeights, "augment": AugmentConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                for f in fields(typ):
                    if f.name in sub and isinstance(sub[f.name], list):
                        sub[f.name] = tuple(sub[f.name])
                d[key] = typ(**sub)
        return cls(**d)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        kw = dict(model=ModelConfig.paper_scale(), epochs=300, batch_size=32)
        kw.update(overrides)
        return cls(**kw)


def cosine_lr(t: float, t_max: int = 50, eta_max: float = 1e-3, eta_min: float = 1e-5, mode: str = "periodic") -> float:
    """Cosine annealing from eta_max at t=0 to eta_min at t=t_max.

    Past t_max: ``periodic`` keeps following the cosine (back up to eta_max
    at 2 t_max), ``restart`` jumps back to eta_max every t_max steps,
    ``clamp`` stays at eta_min.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if mode == "restart":
        t = t % t_max
    elif mode == "clamp":
        t = min(t, t_max)
    elif mode != "periodic":
        raise ValueError(f"unknown schedule mode {mode!r}")
    c = math.cos(math.pi * t / t_max)
    # convex-combination form is exact at both endpoints
    return 0.5 * (1 + c) * eta_max + 0.5 * (1 - c) * eta_min


# ---------------------------------------------------------------- helpers


def _seed_everything(seed: int, threads: int) -> None:
    if threads > 0:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def param_checksum(*modules: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _batch_hash(images: torch.Tensor, masks: torch.Tensor) -> str:
    h = hashlib.sha256()
    h.update(images.numpy().tobytes())
    h.update(masks.numpy().tobytes())
    return h.hexdigest()


def _seg_loss(logits: torch.Tensor, masks: torch.Tensor, w: LossWeights) -> torch.Tensor:
    if logits.shape[1] == 1:
        return bcedice_with_logits(logits[:, 0], masks.float(), w)
    return cedice_loss(logits, masks, w)


def _prepare_samples(samples: Sequence[Sample], size: int, stats) -> List[Sample]:
    return [preprocess(s, size, stats) for s in samples]


def _check_classes(samples: Sequence[Sample], num_classes: int) -> None:
    limit = max(num_classes, 2)
    for s in samples:
        if s.mask.size and (s.mask.min() < 0 or s.mask.max() >= limit):
            raise ValueError(
                f"sample {s.id} has label {int(s.mask.max())} but the model predicts {num_classes} class(es)"
            )


# ---------------------------------------------------------------- checkpoints


def flat_params(model: DSVMUNet, heads: Optional[DistillHeads]) -> Dict[str, torch.Tensor]:
    out = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if heads is not None:
        out.update({f"distill.{k}": v.detach().clone() for k, v in heads.state_dict().items()})
    return out


def save_checkpoint(path, cfg: TrainConfig, model, heads=None, optimizer=None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_json(),
        "params": flat_params(model, heads),
        "has_distill_heads": heads is not None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()},
    }
    blob.update(extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path_or_blob) -> dict:
    blob = path_or_blob
    if not isinstance(blob, dict):
        blob = torch.load(path_or_blob, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint of format {CHECKPOINT_FORMAT}")
    return blob


def strip_heads(blob: dict) -> dict:
    """Inference checkpoint: drop distillation heads and optimizer state."""
    blob = dict(blob)
    blob["params"] = {k: v for k, v in blob["params"].items() if not k.startswith("distill.")}
    blob["has_distill_heads"] = False
    blob["optimizer"] = None
    return blob


def build_from_checkpoint(path_or_blob, with_heads: bool = False):
    blob = load_checkpoint(path_or_blob)
    cfg = TrainConfig.from_dict(json.loads(blob["config"]))
    model = DSVMUNet(cfg.model)
    model_state = {k: v for k, v in blob["params"].items() if not k.startswith("distill.")}
    model.load_state_dict(model_state)
    heads = None
    if with_heads:
        if not blob["has_distill_heads"]:
            raise ValueError("checkpoint has no distillation heads")
        heads = DistillHeads(cfg.model, cfg.distill)
        heads.load_state_dict({k[len("distill."):]: v for k, v in blob["params"].items() if k.startswith("distill.")})
    return cfg, model, heads, blob


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    per_image: List[MetricReport]
    summary: MetricReport
    pooled: Optional[MetricReport] = None

    def primary(self) -> float:
        """Model-selection metric: mIoU for binary, mean DSC for multi-class."""
        return self.summary.dsc if self.summary.per_class else self.summary.miou


@torch.no_grad()
def predict_masks(model: DSVMUNet, samples: Sequence[Sample], batch_size: int = 8) -> List[np.ndarray]:
    """Hard masks: sigmoid > 0.5 (single logit) or arg-max over classes."""
    model.eval()
    preds = []
    for _, images, _ in iterate_batches(samples, batch_size, shuffle=False):
        logits = model(images).logits
        if logits.shape[1] == 1:
            out = (torch.sigmoid(logits[:, 0]) > 0.5).long()
        else:
            out = logits.argmax(1)
        preds.extend(out.numpy())
    return preds


def evaluate(
    model_or_checkpoint: Union[DSVMUNet, str, Path, dict],
    samples: Sequence[Sample],
    norm_stats=None,
    num_classes: Optional[int] = None,
    batch_size: int = 8,
    preprocessed: bool = False,
) -> EvalResult:
    """Per-image and aggregated metrics.

    Raw samples are resized and standardised with the checkpoint's stored
    statistics unless ``preprocessed`` is set.
    """
    if isinstance(model_or_checkpoint, DSVMUNet):
        model = model_or_checkpoint
    else:
        _, model, _, blob = build_from_checkpoint(model_or_checkpoint)
        norm_stats = norm_stats or blob.get("norm_stats")
    K = model.cfg.num_classes
    if num_classes is not None and max(num_classes, 2) != max(K, 2):
        raise ValueError(f"dataset has {num_classes} classes but the model predicts {K}")
    _check_classes(samples, K)
    if not preprocessed:
        samples = _prepare_samples(samples, model.cfg.input_size, norm_stats)
    preds = predict_masks(model, samples, batch_size)
    reports, counts = [], []
    for s, p in zip(samples, preds):
        if K == 1:
            reports.append(binary_report(p, s.mask, id=s.id))
            counts.append(confusion_counts(p, s.mask))
        else:
            reports.append(multiclass_report(p, s.mask, K, id=s.id))
    return EvalResult(reports, aggregate(reports), pooled(counts) if counts else None)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: DSVMUNet
    heads: DistillHeads
    log: List[dict]
    best_metric: float
    best_epoch: int
    init_checksum: str
    first_batch_hash: str
    norm_stats: tuple
    last_eval: Optional[EvalResult] = None
    checkpoint_path: Optional[Path] = None


def _append_log(path: Optional[Path], rows: List[dict]) -> None:
    if path is None:
        return
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS])


def train(
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Optional[Sequence[Sample]] = None,
    out_dir=None,
    resume=None,
    on_step: Optional[Callable[[dict], None]] = None,
    norm_stats=None,
) -> TrainResult:
    """AdamW + per-epoch cosine schedule on seg + alpha*proj + beta*prog.

    All three loss terms are computed and logged on every step, whatever
    the weights. With ``out_dir`` set, writes ``train_log.csv``,
    ``last.pt``, ``best.pt`` and ``summary.json``. ``resume`` takes a
    checkpoint written by a previous run and continues after its epoch.
    Normalisation statistics default to those of ``train_samples``.
    """
    if not train_samples:
        raise ValueError("empty training set")
    _seed_everything(cfg.seed, cfg.threads)
    _check_classes(train_samples, cfg.model.num_classes)
    out = Path(out_dir) if out_dir else (Path(cfg.output_dir) if cfg.output_dir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv" if out is not None else None

    blob = load_checkpoint(resume) if resume is not None else None
    if blob is not None:
        stats = tuple(blob["norm_stats"])
    else:
        stats = tuple(norm_stats) if norm_stats is not None else compute_stats(train_samples)
    train_set = _prepare_samples(train_samples, cfg.model.input_size, stats)
    val_set = _prepare_samples(val_samples, cfg.model.input_size, stats) if val_samples else None
    if val_set is None:
        log.warning("no validation split; selecting the best checkpoint on the training set")

    model = DSVMUNet(cfg.model)
    heads = DistillHeads(cfg.model, cfg.distill)
    init_checksum = param_checksum(model, heads)
    params = list(model.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)

    start_epoch, step = 0, 0
    best, best_epoch = -math.inf, -1
    if blob is not None:
        model.load_state_dict({k: v for k, v in blob["params"].items() if not k.startswith("distill.")})
        heads.load_state_dict({k[8:]: v for k, v in blob["params"].items() if k.startswith("distill.")})
        opt.load_state_dict(blob["optimizer"])
        start_epoch, step = blob["epoch"], blob["step"]
        best, best_epoch = blob["best"]["value"], blob["best"]["epoch"]
        init_checksum = blob.get("init_checksum", init_checksum)
        torch.set_rng_state(blob["rng"]["torch"])
        np.random.set_state(blob["rng"]["numpy"])
        random.setstate(blob["rng"]["python"])

    _, first_images, first_masks = next(iterate_batches(train_set, cfg.batch_size, cfg.seed, 0, cfg.augment))
    first_batch_hash = _batch_hash(first_images, first_masks)

    rows: List[dict] = []
    last_eval = None
    w = cfg.loss
    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.t_max, cfg.base_lr, cfg.eta_min, cfg.schedule)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        epoch_rows = []
        for _, images, masks in iterate_batches(train_set, cfg.batch_size, cfg.seed, epoch, cfg.augment):
            try:
                out_ = model(images)
            except ContractError as exc:
                if torch.isfinite(images).all() and all(torch.isfinite(p).all() for p in params):
                    raise
                raise NonFiniteLossError(f"step {step + 1} (epoch {epoch}): non-finite input or weights ({exc})") from exc
            if not torch.isfinite(out_.logits).all():
                raise NonFiniteLossError(f"step {step + 1} (epoch {epoch}): non-finite network output")
            l_seg = _seg_loss(out_.logits, masks, w)
            l_proj = projection_loss(out_.pyramid, heads)
            l_prog = progressive_loss(out_.pyramid, heads)
            try:
                l_total = total_loss(l_seg, l_proj, l_prog, w)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"step {step + 1} (epoch {epoch}): {exc}") from exc
            opt.zero_grad(set_to_none=True)
            l_total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            row = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "l_seg": l_seg.item(),
                "l_proj": l_proj.item(),
                "l_prog": l_prog.item(),
                "l_total": l_total.item(),
            }
            epoch_rows.append(row)
            if on_step is not None:
                on_step(row)
        rows.extend(epoch_rows)
        _append_log(log_path, epoch_rows)

        last_eval = evaluate(model, val_set or train_set, preprocessed=True, batch_size=cfg.batch_size)
        metric = last_eval.primary()
        improved = metric > best
        if improved:
            best, best_epoch = metric, epoch
        log.info("epoch %d lr %.2e loss %.4f val %.4f", epoch, lr, epoch_rows[-1]["l_total"], metric)
        if out is not None:
            extra = dict(
                epoch=epoch + 1,
                step=step,
                best={"metric": "mdsc" if cfg.multiclass else "miou", "value": best, "epoch": best_epoch},
                norm_stats=list(stats),
                init_checksum=init_checksum,
            )
            save_checkpoint(out / "last.pt", cfg, model, heads, opt, **extra)
            if improved:
                save_checkpoint(out / "best.pt", cfg, model, heads, opt, **extra)

    if out is not None:
        summary = {
            "config": cfg.to_dict(),
            "steps": step,
            "best": {"value": best, "epoch": best_epoch},
            "final": asdict(last_eval.summary) if last_eval else None,
            "init_checksum": init_checksum,
            "first_batch_hash": first_batch_hash,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    return TrainResult(
        model=model,
        heads=heads,
        log=rows,
        best_metric=best,
        best_epoch=best_epoch,
        init_checksum=init_checksum,
        first_batch_hash=first_batch_hash,
        norm_stats=stats,
        last_eval=last_eval,
        checkpoint_path=(out / "best.pt") if out is not None else None,
    )


# ---------------------------------------------------------------- ablation

ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))
ABLATION_COLUMNS = ("L_BceDice", "L_Proj", "L_Prog", "mIoU", "DSC", "Acc", "Spe", "Sen", "Avg")
_METRIC_KEYS = (("mIoU", "miou"), ("DSC", "dsc"), ("Acc", "acc"), ("Spe", "spe"), ("Sen", "sen"))


@dataclass
class AblationResult:
    rows: List[dict]
    raw: Dict[int, List[dict]]
    seeds: List[int]

    def formatted(self, digits: int = 4) -> List[dict]:
        out = []
        for r in self.rows:
            line = {k: r[k] for k in ABLATION_COLUMNS[:3]}
            for name in ABLATION_COLUMNS[3:]:
                mean, std = r[name]
                line[name] = f"{mean:.{digits}f}" if len(self.seeds) == 1 else f"{mean:.{digits}f}±{std:.{digits}f}"
            out.append(line)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(self.formatted())


def run_ablation(
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Optional[Sequence[Sample]] = None,
    seeds: Sequence[int] = (0,),
    out_dir=None,
    norm_stats=None,
) -> AblationResult:
    """Train baseline, +proj, +prog and +both with shared seeds, init and data order."""
    raw: Dict[int, List[dict]] = {}
    for seed in seeds:
        runs = []
        for use_proj, use_prog in ABLATION_ROWS:
            loss = replace(cfg.loss, alpha=cfg.loss.alpha if use_proj else 0.0, beta=cfg.loss.beta if use_prog else 0.0)
            run_cfg = replace(cfg, seed=seed, loss=loss)
            tag = f"seed{seed}_proj{int(use_proj)}_prog{int(use_prog)}"
            res = train(
                run_cfg, train_samples, val_samples, out_dir=Path(out_dir) / tag if out_dir else None, norm_stats=norm_stats
            )
            s = res.last_eval.summary
            runs.append(
                {
                    "proj": use_proj,
                    "prog": use_prog,
                    "metrics": {name: getattr(s, key) for name, key in _METRIC_KEYS},
                    "init_checksum": res.init_checksum,
                    "first_batch_hash": res.first_batch_hash,
                }
            )
        if len({r["init_checksum"] for r in runs}) != 1 or len({r["first_batch_hash"] for r in runs}) != 1:
            raise RuntimeError(f"seed {seed}: ablation rows do not share initialisation and data order")
        raw[seed] = runs

    rows = []
    for i, (use_proj, use_prog) in enumerate(ABLATION_ROWS):
        row = {"L_BceDice": "✓", "L_Proj": "✓" if use_proj else "×", "L_Prog": "✓" if use_prog else "×"}
        per_seed = [raw[s][i]["metrics"] for s in seeds]
        for name, _ in _METRIC_KEYS:
            vals = np.array([m[name] for m in per_seed])
            row[name] = (float(vals.mean()), float(vals.std()))
        avgs = np.array([np.mean([m[n] for n, _ in _METRIC_KEYS]) for m in per_seed])
        row["Avg"] = (float(avgs.mean()), float(avgs.std()))
        rows.append(row)
    result = AblationResult(rows, raw, list(seeds))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        result.write_csv(Path(out_dir) / "ablation.csv")
    return result
