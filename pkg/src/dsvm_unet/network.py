"""U-shaped VSS network exposing its multi-level encoder/decoder features.

Level l (1..M) features have shape (2^(l-1) C, H / 2^(l+1), W / 2^(l+1)).
Blocks run on channels-last tokens; features are exposed channels-first.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn

from .ssm import ContractError, VSSBlock

__all__ = [
    "ConfigError",
    "ModelConfig",
    "FeaturePyramid",
    "ForwardOutput",
    "PatchEmbed",
    "PatchMerge",
    "PatchExpand",
    "FinalProjection",
    "DSVMUNet",
    "level_shape",
    "load_pretrained",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 1
    base_dim: int = 16
    levels: int = 4
    encoder_depths: Tuple[int, ...] = (2, 2, 2, 2)
    decoder_depths: Tuple[int, ...] = (2, 2, 2, 1)
    patch_size: int = 4
    state_dim: int = 16
    expansion: int = 2
    input_size: int = 64
    skip_mode: str = "add"

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.validate()

    def validate(self) -> None:
        if self.levels != 4:
            raise ConfigError("levels is fixed at 4")
        if self.patch_size != 4:
            raise ConfigError("patch_size is fixed at 4")
        if len(self.encoder_depths) != 4 or len(self.decoder_depths) != 4:
            raise ConfigError("encoder_depths and decoder_depths need 4 entries")
        if min(self.encoder_depths + self.decoder_depths) < 1:
            raise ConfigError("stage depths must be positive")
        if self.num_classes < 1 or self.in_channels < 1 or self.base_dim < 1:
            raise ConfigError("num_classes, in_channels and base_dim must be >= 1")
        if self.base_dim % 4:
            raise ConfigError("base_dim must be divisible by 4 (final 4x expansion)")
        if self.input_size % 2 ** (self.levels + 1):
            raise ConfigError(f"input_size {self.input_size} not divisible by {2 ** (self.levels + 1)}")
        if self.skip_mode not in ("add", "concat"):
            raise ConfigError(f"skip_mode must be 'add' or 'concat', got {self.skip_mode!r}")

    def dim(self, level: int) -> int:
        return self.base_dim * 2 ** (level - 1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        kw = dict(base_dim=96, input_size=256)
        kw.update(overrides)
        return cls(**kw)


def level_shape(level: int, base_dim: int, height: int, width: int) -> Tuple[int, int, int]:
    """(channels, h, w) of a level-``level`` feature for an H x W input."""
    s = 2 ** (level + 1)
    return base_dim * 2 ** (level - 1), height // s, width // s


@dataclass
class FeaturePyramid:
    """Encoder features [f^e_1..f^e_M] and decoder features [f^d_M..f^d_1].

    Maps are (B, C_l, h_l, w_l).
    """

    encoder_feats: List[torch.Tensor]
    decoder_feats: List[torch.Tensor]

    @property
    def levels(self) -> int:
        return len(self.encoder_feats)

    def enc(self, level: int) -> torch.Tensor:
        return self.encoder_feats[level - 1]

    def dec(self, level: int) -> torch.Tensor:
        return self.decoder_feats[self.levels - level]

    def check_shapes(self, base_dim: int, height: int, width: int) -> None:
        if len(self.decoder_feats) != self.levels:
            raise ContractError("encoder and decoder pyramids differ in depth")
        for l in range(1, self.levels + 1):
            want = level_shape(l, base_dim, height, width)
            for name, f in (("encoder", self.enc(l)), ("decoder", self.dec(l))):
                if tuple(f.shape[-3:]) != want:
                    raise ContractError(f"{name} level {l}: shape {tuple(f.shape[-3:])}, expected {want}")


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    pyramid: FeaturePyramid


class PatchEmbed(nn.Module):
    """Non-overlapping 4x4 patches -> C channels, then LayerNorm. Returns tokens."""

    def __init__(self, in_channels: int, dim: int, patch_size: int = 4):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        H, W = image.shape[-2:]
        if H % self.patch_size or W % self.patch_size:
            raise ConfigError(f"image size {H}x{W} not divisible by patch size {self.patch_size}")
        return self.norm(self.proj(image).permute(0, 2, 3, 1))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat + LayerNorm + linear 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ContractError(f"patch merge needs even spatial dims, got {H}x{W}")
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


def _pixel_shuffle_tokens(x: torch.Tensor, scale: int) -> torch.Tensor:
    B, H, W, C = x.shape
    c = C // (scale * scale)
    x = x.reshape(B, H, W, scale, scale, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H * scale, W * scale, c)


class PatchExpand(nn.Module):
    """Linear C -> 2C, rearranged to (2H, 2W, C/2), then LayerNorm."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ContractError(f"patch expand needs an even channel count, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2:
            raise ContractError(f"patch expand needs an even channel count, got {x.shape[-1]}")
        return self.norm(_pixel_shuffle_tokens(self.expand(x), 2))


class FinalProjection(nn.Module):
    """4x expansion of f^d_1 (C -> 4C linear, 4x4 rearrange to C/4) and a 1x1 map to K logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.expand = nn.Linear(dim, 4 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 4)
        self.head = nn.Conv2d(dim // 4, num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm(_pixel_shuffle_tokens(self.expand(x), 4))
        return self.head(x.permute(0, 3, 1, 2))


class _Stage(nn.Module):
    def __init__(self, dim: int, depth: int, state_dim: int, expansion: int):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            self.add_module(f"block{i}", VSSBlock(dim, state_dim=state_dim, expansion=expansion))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(self.depth):
            x = getattr(self, f"block{i}")(x)
        return x


class _Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.levels
        for l in range(1, cfg.levels + 1):
            self.add_module(f"stage{l}", _Stage(cfg.dim(l), cfg.encoder_depths[l - 1], cfg.state_dim, cfg.expansion))
            if l < cfg.levels:
                self.add_module(f"downsample{l}", PatchMerge(cfg.dim(l)))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for l in range(1, self.levels + 1):
            x = getattr(self, f"stage{l}")(x)
            feats.append(x)
            if l < self.levels:
                x = getattr(self, f"downsample{l}")(x)
        return feats


class _Decoder(nn.Module):
    # decoder_depths are listed deepest-first: entry 0 drives level M
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.levels
        self.skip_mode = cfg.skip_mode
        M = cfg.levels
        for l in range(M, 0, -1):
            self.add_module(f"stage{l}", _Stage(cfg.dim(l), cfg.decoder_depths[M - l], cfg.state_dim, cfg.expansion))
            if l < M:
                self.add_module(f"upsample{l}", PatchExpand(cfg.dim(l + 1)))
                if cfg.skip_mode == "concat":
                    self.add_module(f"skip_reduce{l}", nn.Linear(2 * cfg.dim(l), cfg.dim(l), bias=False))

    def forward(self, enc_feats: List[torch.Tensor]) -> List[torch.Tensor]:
        M = self.levels
        x = getattr(self, f"stage{M}")(enc_feats[M - 1])
        feats = [x]
        for l in range(M - 1, 0, -1):
            x = getattr(self, f"upsample{l}")(x)
            skip = enc_feats[l - 1]
            if self.skip_mode == "add":
                x = x + skip
            else:
                x = getattr(self, f"skip_reduce{l}")(torch.cat([x, skip], dim=-1))
            x = getattr(self, f"stage{l}")(x)
            feats.append(x)
        return feats


class DSVMUNet(nn.Module):
    """Patch embedding, VSS encoder, VSS decoder with skips, final projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.base_dim, cfg.patch_size)
        self.encoder = _Encoder(cfg)
        self.decoder = _Decoder(cfg)
        self.final_proj = FinalProjection(cfg.base_dim, cfg.num_classes)

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        cfg = self.cfg
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise ContractError(f"expected (B, {cfg.in_channels}, H, W) image, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        if H % 2 ** (cfg.levels + 1) or W % 2 ** (cfg.levels + 1):
            raise ContractError(f"image size {H}x{W} not divisible by {2 ** (cfg.levels + 1)}")
        enc = self.encoder(self.patch_embed(image))
        dec = self.decoder(enc)
        logits = self.final_proj(dec[-1])
        to_map = lambda t: t.permute(0, 3, 1, 2)
        pyramid = FeaturePyramid([to_map(f) for f in enc], [to_map(f) for f in dec])
        return ForwardOutput(logits, pyramid)


def load_pretrained(model: nn.Module, path, strict: bool = False):
    """Load a state dict (or a checkpoint holding one) into ``model``.

    Hook for externally converted backbone weights; returns the missing and
    unexpected key lists from ``load_state_dict``.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = blob.get("model", blob) if isinstance(blob, dict) else blob
    return model.load_state_dict(state, strict=strict)
