"""Parameter counts and analytic forward cost.

MACs are counted per module from shapes alone. Two totals are kept:

* ``macs_dense``: nn.Linear and nn.Conv2d layers only, which is what
  module-hook profilers (thop, ptflops, fvcore) attribute;
* ``macs``: additionally the per-direction einsum projections and the
  selective scan recurrence, which hook-based counters do not see.

A scan step costs 4 MACs per (token, channel, state) (discretised A,
input injection, state update, readout) plus 2 per (token, channel)
(delta * u and the D skip). Norms, activations, softplus and exp are not
counted. FLOPs are reported as 2 x MACs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch

from .distill import DistillConfig, DistillHeads
from .network import DSVMUNet, ModelConfig

__all__ = ["ComplexityReport", "count_parameters", "estimate_flops", "complexity_report", "REFERENCE_POINTS"]

# (params in M, GFLOPs) as published for the plain VSS U-Net and the distilled variant
REFERENCE_POINTS = {"vm-unet": (27.42, 4.11), "dsvm-unet": (22.63, 3.65)}


@dataclass
class ComplexityReport:
    input_size: int
    param_count_inference: int
    param_count_training: int
    macs: int
    macs_dense: int
    per_module: Dict[str, dict] = field(default_factory=dict)

    @property
    def flops_forward(self) -> int:
        return 2 * self.macs

    @property
    def params_m(self) -> float:
        return self.param_count_inference / 1e6

    def summary(self) -> dict:
        return {
            "input_size": self.input_size,
            "param_count_inference": self.param_count_inference,
            "param_count_training": self.param_count_training,
            "flops_forward": self.flops_forward,
            "macs_forward": self.macs,
            "macs_dense_layers": self.macs_dense,
            "gflops_forward": self.flops_forward / 1e9,
            "gmacs_dense_layers": self.macs_dense / 1e9,
        }


def _n_params(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_parameters(model_cfg: ModelConfig, distill_cfg: Optional[DistillConfig] = None):
    """(inference, training, per-module) parameter counts, built on the meta device."""
    with torch.device("meta"):
        model = DSVMUNet(model_cfg)
        heads = DistillHeads(model_cfg, distill_cfg or DistillConfig())
    per = {name: _n_params(m) for name, m in _top_modules(model)}
    per["distill.proj"] = _n_params(heads.proj)
    per["distill.prog"] = _n_params(heads.prog)
    inference = _n_params(model)
    return inference, inference + _n_params(heads), per


def _top_modules(model: DSVMUNet):
    yield "patch_embed", model.patch_embed
    for branch in ("encoder", "decoder"):
        for name, m in getattr(model, branch).named_children():
            yield f"{branch}.{name}", m
    yield "final_proj", model.final_proj


def _vss_macs(cfg: ModelConfig, dim: int, tokens: int):
    E, N, K = cfg.expansion * dim, cfg.state_dim, 4
    R = math.ceil(dim / 16)
    dense = tokens * dim * 2 * E + tokens * E * 9 + tokens * E * dim
    proj = K * tokens * E * (R + 2 * N) + K * tokens * R * E
    scan = K * tokens * E * (4 * N + 2)
    return dense, dense + proj + scan


def estimate_flops(model_cfg: ModelConfig, input_size: Optional[int] = None) -> Dict[str, tuple]:
    """Per-module (dense MACs, total MACs) for one forward pass of a single image."""
    cfg = model_cfg
    S = input_size or cfg.input_size
    tokens = lambda l: (S // 2 ** (l + 1)) ** 2
    C, M = cfg.base_dim, cfg.levels
    out: Dict[str, tuple] = {}

    def add(name, dense, total=None):
        out[name] = (dense, dense if total is None else total)

    add("patch_embed", tokens(1) * C * cfg.in_channels * cfg.patch_size ** 2)
    for l in range(1, M + 1):
        d, T = cfg.dim(l), tokens(l)
        for branch, depth in (("encoder", cfg.encoder_depths[l - 1]), ("decoder", cfg.decoder_depths[M - l])):
            dense, total = _vss_macs(cfg, d, T)
            add(f"{branch}.stage{l}", depth * dense, depth * total)
        if l < M:
            add(f"encoder.downsample{l}", tokens(l + 1) * 4 * d * 2 * d)
            d_up = cfg.dim(l + 1)
            add(f"decoder.upsample{l}", tokens(l + 1) * d_up * 2 * d_up)
            if cfg.skip_mode == "concat":
                add(f"decoder.skip_reduce{l}", T * 2 * d * d)
    add("final_proj", tokens(1) * C * 4 * C + S * S * (C // 4) * cfg.num_classes)
    return out


def complexity_report(model_cfg: ModelConfig, distill_cfg: Optional[DistillConfig] = None, input_size=None) -> ComplexityReport:
    inference, training, per_params = count_parameters(model_cfg, distill_cfg)
    per_macs = estimate_flops(model_cfg, input_size)
    per = {}
    for name, n in per_params.items():
        dense, total = per_macs.get(name, (0, 0))
        per[name] = {"params": n, "macs_dense": dense, "macs": total}
    return ComplexityReport(
        input_size=input_size or model_cfg.input_size,
        param_count_inference=inference,
        param_count_training=training,
        macs=sum(t for _, t in per_macs.values()),
        macs_dense=sum(d for d, _ in per_macs.values()),
        per_module=per,
    )
