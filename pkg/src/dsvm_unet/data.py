"""Dataset IO, synthetic shape data, augmentation and preprocessing.

On-disk layout (shared by real and synthetic data)::

    <root>/<split>/images/<id>.png   RGB
    <root>/<split>/masks/<id>.png    8-bit; binary 0/255 or class index
"""

from __future__ import annotations

import json
import logging
import os
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "AugmentConfig",
    "SynthConfig",
    "DatasetError",
    "load_dataset",
    "generate_synthetic",
    "render_sample",
    "augment",
    "preprocess",
    "compute_stats",
    "dataset_stats",
    "sample_rng",
    "iterate_batches",
    "split_samples",
    "IMAGE_EXTS",
]

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    """image: (C, H, W) float32; mask: (H, W) int64 (binary or class index)."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ spatially")


@dataclass
class AugmentConfig:
    flip_horizontal_p: float = 0.5
    flip_vertical_p: float = 0.5
    rotation_p: float = 0.5
    rotation_choices: Tuple[int, ...] = (90, 180, 270)
    rotation_mode: str = "right-angle"
    max_angle: float = 30.0
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_horizontal_p", "flip_vertical_p", "rotation_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.rotation_mode not in ("right-angle", "continuous"):
            raise ValueError("rotation_mode must be 'right-angle' or 'continuous'")
        if self.rotation_mode == "right-angle" and any(a % 90 for a in self.rotation_choices):
            raise ValueError("right-angle rotation choices must be multiples of 90")


@dataclass
class SynthConfig:
    n_samples: int = 64
    size: int = 64
    num_classes: int = 2
    shapes: str = "mixed"
    noise: float = 0.04
    seed: int = 0
    n_val: int = 0

    def __post_init__(self):
        if self.size % 32:
            raise ValueError("synthetic size must be divisible by 32")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError("num_classes must be in [2, 256]")
        if self.shapes not in ("ellipses", "polygons", "mixed"):
            raise ValueError("shapes must be 'ellipses', 'polygons' or 'mixed'")


# ---------------------------------------------------------------- loading


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def _read_mask(path: Path, binary: bool) -> np.ndarray:
    with Image.open(path) as im:
        m = np.asarray(im.convert("L"), dtype=np.int64)
    return (m > 127).astype(np.int64) if binary else m


def _list(d: Path):
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_dataset(root, split: str, size: Optional[int] = None, num_classes: int = 2) -> List[Sample]:
    """Load ``<root>/<split>`` sorted by id.

    Binary datasets (num_classes <= 2) threshold masks at 127. Images and
    masks whose size differs from ``size`` (or from each other) are resized,
    the mask with nearest-neighbour.
    """
    base = Path(root) / split
    images, masks = _list(base / "images"), _list(base / "masks")
    if not images:
        warnings.warn(f"no images found under {base / 'images'}")
        return []
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DatasetError(f"missing masks for ids: {', '.join(missing)}")
    binary = num_classes <= 2
    out = []
    for sid in sorted(images):
        img = _read_image(images[sid])
        mask = _read_mask(masks[sid], binary)
        target = size or img.shape[-1]
        if img.shape[-2:] != (target, target) or mask.shape != (target, target):
            img, mask = _resize_image(img, target), _resize_mask(mask, target)
        if not binary and mask.size and mask.max() >= num_classes:
            raise DatasetError(f"{sid}: mask value {mask.max()} >= num_classes {num_classes}")
        out.append(Sample(sid, img, mask))
    return out


# ---------------------------------------------------------------- synthesis

# class colours for multi-class data, well separated in RGB
_PALETTE = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.90, 0.80, 0.15],
        [0.75, 0.25, 0.80],
        [0.15, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.45, 0.25, 0.10],
    ]
)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _ellipse(size, rng, yy, xx):
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.28, 2) * size
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _polygon(size, rng, yy, xx):
    # vertices on an ellipse in angular order -> convex polygon
    n = int(rng.integers(3, 8))
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.1, 0.3, 2) * size
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    vy, vx = cy + ry * np.sin(ang), cx + rx * np.cos(ang)
    inside = np.ones_like(yy, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        inside &= cross >= 0
    return inside


def render_sample(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One (uint8 HxWx3 image, uint8 HxW label map) pair."""
    size = cfg.size
    yy, xx = _grid(size)
    for _ in range(1000):
        labels = np.zeros((size, size), dtype=np.uint8)
        n_shapes = int(rng.integers(1, 4))
        kinds = []
        for _ in range(n_shapes):
            kind = cfg.shapes if cfg.shapes != "mixed" else ("ellipses", "polygons")[int(rng.integers(2))]
            inside = (_ellipse if kind == "ellipses" else _polygon)(size, rng, yy, xx)
            k = 1 if cfg.num_classes == 2 else int(rng.integers(1, cfg.num_classes))
            labels[inside] = k
            kinds.append(k)
        frac = np.count_nonzero(labels) / labels.size
        if 0.02 <= frac <= 0.6:
            break
    else:  # pragma: no cover - the shape sizes make this practically unreachable
        raise RuntimeError("could not draw a mask with foreground fraction in [0.02, 0.6]")

    # skin-like smooth background
    base = np.array([0.78, 0.62, 0.52]) + rng.uniform(-0.08, 0.08, 3)
    gy, gx = rng.uniform(-0.15, 0.15, 2)
    shade = 1 + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
    img = base[:, None, None] * shade[None]
    if cfg.num_classes == 2:
        lesion = base * rng.uniform(0.35, 0.6) + rng.uniform(-0.05, 0.05, 3)
        img[:, labels > 0] = lesion[:, None]
    else:
        for k in np.unique(labels[labels > 0]):
            colour = _PALETTE[(k - 1) % len(_PALETTE)] * (1 + ((k - 1) // len(_PALETTE)) * -0.3)
            img[:, labels == k] = (colour + rng.uniform(-0.05, 0.05, 3))[:, None]
    img = img + rng.normal(0, cfg.noise, img.shape)
    img = np.clip(img, 0, 1)
    img8 = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    if cfg.num_classes == 2:
        labels = labels * 255
    return img8, labels


def _write_split(root: Path, split: str, cfg: SynthConfig, count: int, split_code: int) -> List[str]:
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, split_code, i])
        img, mask = render_sample(cfg, rng)
        sid = f"{split}_{i:05d}"
        Image.fromarray(img, "RGB").save(root / split / "images" / f"{sid}.png")
        Image.fromarray(mask, "L").save(root / split / "masks" / f"{sid}.png")
        ids.append(sid)
    return ids


def generate_synthetic(cfg: SynthConfig, root) -> Path:
    """Write train (and optional val) splits plus ``manifest.json``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"train": _write_split(root, "train", cfg, cfg.n_samples, 0)}
    if cfg.n_val:
        splits["val"] = _write_split(root, "val", cfg, cfg.n_val, 1)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"synth_config": asdict(cfg), "splits": splits}, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------- transforms


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-sample generator, independent of iteration order and worker layout."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random flips and rotation applied identically to image and mask."""
    img, mask = sample.image, sample.mask
    if rng.random() < cfg.flip_horizontal_p:
        img, mask = img[..., ::-1], mask[..., ::-1]
    if rng.random() < cfg.flip_vertical_p:
        img, mask = img[..., ::-1, :], mask[..., ::-1, :]
    if rng.random() < cfg.rotation_p:
        if cfg.rotation_mode == "right-angle":
            k = int(rng.choice(cfg.rotation_choices)) // 90
            img, mask = np.rot90(img, k, axes=(-2, -1)), np.rot90(mask, k, axes=(-2, -1))
        else:
            angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
            img = ndimage.rotate(img, angle, axes=(-1, -2), reshape=False, order=1, mode="reflect")
            mask = ndimage.rotate(mask, angle, axes=(-1, -2), reshape=False, order=0, mode="nearest")
    return Sample(sample.id, np.ascontiguousarray(img), np.ascontiguousarray(mask))


def _resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[-2:] == (size, size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0].numpy()


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    H, W = mask.shape
    if (H, W) == (size, size):
        return mask
    rows = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    return mask[rows[:, None], cols[None, :]]


def split_samples(samples: Sequence[Sample], train_fraction: float = 0.7, seed: int = 0):
    """Deterministic train/val partition for datasets shipped without a val split."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng([seed, 104729]).permutation(len(samples))
    cut = int(round(train_fraction * len(samples)))
    pick = lambda idx: [samples[i] for i in sorted(idx)]
    return pick(order[:cut]), pick(order[cut:])


def compute_stats(samples: Sequence[Sample]) -> Tuple[List[float], List[float]]:
    """Per-channel mean and standard deviation over all pixels."""
    stack = np.stack([s.image for s in samples]).astype(np.float64)
    return stack.mean(axis=(0, 2, 3)).tolist(), stack.std(axis=(0, 2, 3)).tolist()


def dataset_stats(root, samples: Sequence[Sample], split: str = "train"):
    """Normalisation statistics of the training split, cached in ``<root>/norm_stats.json``."""
    path = Path(root) / "norm_stats.json"
    if path.exists():
        d = json.loads(path.read_text())
        if d.get("split") == split and d.get("count") == len(samples):
            return d["mean"], d["std"]
    mean, std = compute_stats(samples)
    try:
        path.write_text(json.dumps({"split": split, "count": len(samples), "mean": mean, "std": std}))
    except OSError as exc:
        log.warning("could not cache normalisation stats: %s", exc)
    return mean, std


def preprocess(sample: Sample, size: int, stats=None) -> Sample:
    """Resize (bilinear image, nearest mask) and standardise per channel.

    Channels with zero variance are left unstandardised, with a warning.
    """
    img = _resize_image(sample.image, size).astype(np.float32)
    mask = _resize_mask(sample.mask, size)
    if stats is None:
        mean = img.mean(axis=(1, 2))
        std = img.std(axis=(1, 2))
    else:
        mean, std = np.asarray(stats[0], dtype=np.float32), np.asarray(stats[1], dtype=np.float32)
    img = img.copy()
    for c in range(img.shape[0]):
        if std[c] <= 1e-12:
            warnings.warn(f"{sample.id}: channel {c} has zero variance, skipping standardisation")
            continue
        img[c] = (img[c] - mean[c]) / std[c]
    return Sample(sample.id, img, mask)


def iterate_batches(
    samples: Sequence[Sample],
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    augment_cfg: Optional[AugmentConfig] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[List[str], torch.Tensor, torch.Tensor]]:
    """Yield (ids, images (B,C,H,W), masks (B,H,W)) in an order fixed by (seed, epoch)."""
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng([seed, epoch, 7919]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        if augment_cfg is not None:
            chunk = [augment(s, augment_cfg, sample_rng(seed, s.id, epoch)) for s in chunk]
        images = torch.from_numpy(np.stack([s.image for s in chunk]).astype(np.float32))
        masks = torch.from_numpy(np.stack([s.mask for s in chunk]).astype(np.int64))
        yield [s.id for s in chunk], images, masks
