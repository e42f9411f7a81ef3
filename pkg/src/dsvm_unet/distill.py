"""Projection and progressive self-distillation over a feature pyramid.

Projection: every encoder level and every non-final decoder level is mapped
to the shape of f^d_1 (spatial linear map, then a 1x1 Conv1d over channels)
and regressed onto f^d_1, the last decoder feature.

Progressive: adjacent levels are compared after the deeper one is reduced
with a 1x1 Conv2d and bilinearly upsampled 2x. In the encoder the deeper
feature is the teacher; in the decoder the shallower (later) one is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import ModelConfig, FeaturePyramid, level_shape
from .ssm import ContractError

__all__ = [
    "DistillConfig",
    "ProjectionHead",
    "AlignHead",
    "DistillHeads",
    "mse_distill",
    "project_feature",
    "projection_terms",
    "projection_loss",
    "align_adjacent",
    "progressive_terms",
    "progressive_loss",
]

SPATIAL_MODES = ("learned", "interpolation")
DECODER_STUDENT_MODES = ("exclude-teacher", "literal")


@dataclass
class DistillConfig:
    """Structural options of the two distillation losses.

    ``decoder_students``: "exclude-teacher" uses f^d_2..f^d_M as projection
    students; "literal" uses f^d_1..f^d_{M-1}.
    """

    teacher_detach: bool = True
    proj_spatial_mode: str = "learned"
    decoder_students: str = "exclude-teacher"

    def __post_init__(self):
        if self.proj_spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"proj_spatial_mode must be one of {SPATIAL_MODES}")
        if self.decoder_students not in DECODER_STUDENT_MODES:
            raise ValueError(f"decoder_students must be one of {DECODER_STUDENT_MODES}")

    def decoder_levels(self, levels: int) -> List[int]:
        if self.decoder_students == "literal":
            return list(range(1, levels))
        return list(range(2, levels + 1))


def _bilinear_matrix(src_hw, dst_hw) -> torch.Tensor:
    """(dst_pixels, src_pixels) matrix of bilinear resizing."""
    n = src_hw[0] * src_hw[1]
    basis = torch.eye(n).reshape(n, 1, *src_hw)
    out = F.interpolate(basis, size=dst_hw, mode="bilinear", align_corners=False)
    return out.reshape(n, -1).t().contiguous()


class ProjectionHead(nn.Module):
    """Maps a level-l feature to (C, H/4, W/4).

    The spatial map is a learned linear map over the flattened pixels shared
    by all channels (initialised to bilinear resizing); level 1 skips it.
    """

    def __init__(self, level: int, base_dim: int, height: int, width: int, spatial_mode: str = "learned"):
        super().__init__()
        if spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"unknown spatial mode {spatial_mode!r}")
        self.level = level
        self.in_shape = level_shape(level, base_dim, height, width)
        self.out_shape = level_shape(1, base_dim, height, width)
        self.spatial_mode = spatial_mode
        c_in, h, w = self.in_shape
        c_out, H1, W1 = self.out_shape
        self.spatial_map = None
        if level > 1 and spatial_mode == "learned":
            self.spatial_map = nn.Linear(h * w, H1 * W1, bias=False)
            if not self.spatial_map.weight.is_meta:
                with torch.no_grad():
                    self.spatial_map.weight.copy_(_bilinear_matrix((h, w), (H1, W1)))
        self.channel_map = nn.Conv1d(c_in, c_out, kernel_size=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if tuple(f.shape[-3:]) != self.in_shape:
            raise ContractError(f"level {self.level} head expects {self.in_shape}, got {tuple(f.shape[-3:])}")
        c_out, H1, W1 = self.out_shape
        if self.level > 1 and self.spatial_mode == "interpolation":
            f = F.interpolate(f, size=(H1, W1), mode="bilinear", align_corners=False)
        x = f.flatten(-2)
        if self.spatial_map is not None:
            x = self.spatial_map(x)
        x = self.channel_map(x)
        return x.reshape(*x.shape[:-1], H1, W1)


class AlignHead(nn.Module):
    """Level l -> level l-1 shape: 1x1 Conv2d halving channels, then 2x bilinear upsampling."""

    def __init__(self, level: int, base_dim: int):
        super().__init__()
        if level < 2:
            raise ValueError("align heads exist for levels >= 2")
        self.level = level
        c_in = base_dim * 2 ** (level - 1)
        self.channel_map = nn.Conv2d(c_in, c_in // 2, kernel_size=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-3] != self.channel_map.in_channels:
            raise ContractError(
                f"level {self.level} align head expects {self.channel_map.in_channels} channels, got {f.shape[-3]}"
            )
        x = self.channel_map(f)
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class DistillHeads(nn.Module):
    """All trainable alignment heads, keyed ``proj.{branch}.{level}`` and ``prog.{branch}.{pair}``.

    Training-only: the segmentation network never calls them.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: DistillConfig = None):
        super().__init__()
        cfg = cfg or DistillConfig()
        self.cfg = cfg
        self.levels = M = model_cfg.levels
        C, S = model_cfg.base_dim, model_cfg.input_size
        mk = lambda l: ProjectionHead(l, C, S, S, cfg.proj_spatial_mode)
        self.proj = nn.ModuleDict(
            {
                "enc": nn.ModuleDict({str(l): mk(l) for l in range(1, M + 1)}),
                "dec": nn.ModuleDict({str(l): mk(l) for l in cfg.decoder_levels(M)}),
            }
        )
        self.prog = nn.ModuleDict(
            {
                branch: nn.ModuleDict({self.pair_key(l): AlignHead(l, C) for l in range(2, M + 1)})
                for branch in ("enc", "dec")
            }
        )

    @staticmethod
    def pair_key(level: int) -> str:
        return f"{level - 1}_{level}"

    def projection(self, branch: str, level: int) -> ProjectionHead:
        return self.proj[branch][str(level)]

    def align(self, branch: str, level: int) -> AlignHead:
        return self.prog[branch][self.pair_key(level)]


def mse_distill(student: torch.Tensor, teacher: torch.Tensor, detach: bool = True) -> torch.Tensor:
    """Mean squared difference over all elements (batch included)."""
    if student.shape != teacher.shape:
        raise ContractError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    if detach:
        teacher = teacher.detach()
    return F.mse_loss(student, teacher, reduction="mean")


def project_feature(f: torch.Tensor, level: int, head: ProjectionHead) -> torch.Tensor:
    if head.level != level:
        raise ContractError(f"head for level {head.level} applied to level {level}")
    return head(f)


def align_adjacent(f_deep: torch.Tensor, head: AlignHead) -> torch.Tensor:
    return head(f_deep)


def _check_finite(pyramid: FeaturePyramid) -> None:
    for name, feats in (("encoder", pyramid.encoder_feats), ("decoder", pyramid.decoder_feats)):
        for f in feats:
            if not torch.isfinite(f).all():
                raise ContractError(f"non-finite {name} feature of shape {tuple(f.shape)}")


def projection_terms(pyramid: FeaturePyramid, heads: DistillHeads) -> List[Tuple[str, torch.Tensor]]:
    """Individual projection distillation terms as (name, value) pairs."""
    _check_finite(pyramid)
    cfg = heads.cfg
    M = pyramid.levels
    teacher = pyramid.dec(1)
    terms = []
    for l in range(1, M + 1):
        s = project_feature(pyramid.enc(l), l, heads.projection("enc", l))
        terms.append((f"enc{l}", mse_distill(s, teacher, cfg.teacher_detach)))
    for l in cfg.decoder_levels(M):
        s = project_feature(pyramid.dec(l), l, heads.projection("dec", l))
        terms.append((f"dec{l}", mse_distill(s, teacher, cfg.teacher_detach)))
    return terms


def projection_loss(pyramid: FeaturePyramid, heads: DistillHeads) -> torch.Tensor:
    return torch.stack([v for _, v in projection_terms(pyramid, heads)]).sum()


def progressive_terms(pyramid: FeaturePyramid, heads: DistillHeads) -> List[Tuple[str, torch.Tensor]]:
    """Adjacent-level terms; the deeper member of each pair is always the one aligned."""
    _check_finite(pyramid)
    detach = heads.cfg.teacher_detach
    terms = []
    for l in range(2, pyramid.levels + 1):
        deep = pyramid.enc(l).detach() if detach else pyramid.enc(l)
        teacher = align_adjacent(deep, heads.align("enc", l))
        terms.append((f"enc{l - 1}_{l}", mse_distill(pyramid.enc(l - 1), teacher, detach=False)))
        student = align_adjacent(pyramid.dec(l), heads.align("dec", l))
        terms.append((f"dec{l - 1}_{l}", mse_distill(student, pyramid.dec(l - 1), detach)))
    return terms


def progressive_loss(pyramid: FeaturePyramid, heads: DistillHeads) -> torch.Tensor:
    return torch.stack([v for _, v in progressive_terms(pyramid, heads)]).sum()
