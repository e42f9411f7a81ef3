"""Selective state-space scan, four-direction 2-D scanning and the VSS block.

The continuous system h'(t) = A h(t) + B x(t), y(t) = C h(t) is discretized
with zero-order hold on A and the Euler simplification on B:

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t

A is diagonal per inner channel and stored as A = -exp(A_log).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ContractError",
    "SSMParams",
    "ScanInput",
    "linear_recurrence",
    "selective_scan_sequential",
    "selective_scan",
    "cross_scan",
    "cross_merge",
    "SS2D",
    "VSSBlock",
    "vss_block_forward",
]


class ContractError(ValueError):
    """Raised when an input violates a shape or value precondition."""


@dataclass
class SSMParams:
    """Per-channel state-space parameters.

    ``A_log`` has shape (..., D, N) and ``D_skip`` (..., D); leading dims
    broadcast against the batch dims of the scan input (SS2D uses one group
    per scan direction).
    """

    A_log: torch.Tensor
    D_skip: torch.Tensor
    delta_bias: Optional[torch.Tensor] = None

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    @property
    def state_dim(self) -> int:
        return self.A_log.shape[-1]

    @property
    def inner_dim(self) -> int:
        return self.A_log.shape[-2]

    def validate(self) -> None:
        if self.A_log.ndim < 2 or self.state_dim < 1 or self.inner_dim < 1:
            raise ContractError(f"A_log must be (..., D, N) with D, N >= 1, got {tuple(self.A_log.shape)}")
        if self.D_skip.shape[-1] != self.inner_dim:
            raise ContractError("D_skip last dim must equal inner dim")
        if not torch.isfinite(self.A_log).all():
            raise ContractError("A_log must be finite")


@dataclass
class ScanInput:
    """One (or a batch of) sequences to scan.

    u, delta: (..., L, D); B_seq, C_seq: (..., L, N).
    """

    u: torch.Tensor
    delta: torch.Tensor
    B_seq: torch.Tensor
    C_seq: torch.Tensor

    @property
    def length(self) -> int:
        return self.u.shape[-2]

    def validate(self, params: Optional[SSMParams] = None) -> None:
        L = self.u.shape[-2] if self.u.ndim >= 2 else 0
        if L < 1:
            raise ContractError("sequence length must be >= 1")
        for name in ("delta", "B_seq", "C_seq"):
            t = getattr(self, name)
            if t.ndim < 2 or t.shape[-2] != L:
                raise ContractError(f"{name} length {t.shape[-2] if t.ndim >= 2 else None} != u length {L}")
        if self.delta.shape != self.u.shape:
            raise ContractError(f"delta shape {tuple(self.delta.shape)} != u shape {tuple(self.u.shape)}")
        if self.B_seq.shape != self.C_seq.shape:
            raise ContractError("B_seq and C_seq must share a shape")
        if not (self.delta > 0).all():
            raise ContractError("delta must be strictly positive")
        if params is not None:
            params.validate()
            if params.inner_dim != self.u.shape[-1]:
                raise ContractError(f"inner dim {params.inner_dim} != u channels {self.u.shape[-1]}")
            if params.state_dim != self.B_seq.shape[-1]:
                raise ContractError(f"state dim {params.state_dim} != B_seq width {self.B_seq.shape[-1]}")


def _recur_(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """In place: x[t] <- a[t] * x[t-1] + x[t] along dim 0."""
    for t in range(1, x.shape[0]):
        x[t].addcmul_(a[t], x[t - 1])
    return x


def _recur_reverse_(a: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """In place adjoint of :func:`_recur_`: g[t] <- g[t] + a[t+1] * g[t+1]."""
    for t in range(g.shape[0] - 2, -1, -1):
        g[t].addcmul_(a[t + 1], g[t + 1])
    return g


class _LinearRecurrence(torch.autograd.Function):
    """h_t = a_t * h_{t-1} + x_t along dim 0 with h_{-1} = 0."""

    @staticmethod
    def forward(ctx, a, x):
        a = a.contiguous()
        h = _recur_(a, x.contiguous().clone())
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    def backward(ctx, grad_h):
        a, h = ctx.saved_tensors
        gx = _recur_reverse_(a, grad_h.contiguous().clone())
        ga = torch.zeros_like(gx)
        ga[1:] = gx[1:] * h[:-1]
        return ga, gx


def linear_recurrence(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Evaluate h_t = a_t h_{t-1} + x_t over dim 0 (differentiable)."""
    if a.shape != x.shape:
        a = a.expand_as(x)
    return _LinearRecurrence.apply(a, x)


class _SelectiveScanFn(torch.autograd.Function):
    """Fused scan on time-major tensors.

    delta, u: (L, M, D); Bs, Cs: (L, M, N); A: (M, D, N); Dskip: (M, D);
    h0: (M, D, N). The backward is written out by hand so the (L, M, D, N)
    state tensor is touched as few times as possible.
    """

    @staticmethod
    def forward(ctx, delta, u, Bs, Cs, A, Dskip, h0):
        a = torch.exp(delta.unsqueeze(-1) * A)
        h = (delta * u).unsqueeze(-1) * Bs.unsqueeze(-2)
        h[0].addcmul_(a[0], h0)
        _recur_(a, h)
        y = torch.matmul(h, Cs.unsqueeze(-1)).squeeze(-1)
        y.addcmul_(Dskip, u)
        ctx.save_for_backward(delta, u, Bs, Cs, A, Dskip, h0, a, h)
        return y, h[-1].clone()

    @staticmethod
    def backward(ctx, gy, gh_last):
        delta, u, Bs, Cs, A, Dskip, h0, a, h = ctx.saved_tensors
        gy = gy.contiguous()
        g_Dskip = (gy * u).sum(0)
        g_u = gy * Dskip
        g_C = torch.matmul(gy.unsqueeze(-2), h).squeeze(-2)

        gx = gy.unsqueeze(-1) * Cs.unsqueeze(-2)
        if gh_last is not None:
            gx[-1] += gh_last
        _recur_reverse_(a, gx)

        du = delta * u
        g_du = torch.matmul(gx, Bs.unsqueeze(-1)).squeeze(-1)
        g_B = torch.matmul(du.unsqueeze(-2), gx).squeeze(-2)
        g_h0 = gx[0] * a[0]

        # d(loss)/d(delta*A) = gx_t * h_{t-1} * a_t
        gdA = gx.mul_(a)
        gdA[1:].mul_(h[:-1])
        gdA[0].mul_(h0)
        g_delta = (gdA * A).sum(-1) + g_du * u
        g_A = torch.einsum("lmdn,lmd->mdn", gdA, delta)
        g_u = g_u + g_du * delta
        return g_delta, g_u, g_B, g_C, g_A, g_Dskip, g_h0


def _prepare(inp: ScanInput, params: SSMParams, h0):
    inp.validate(params)
    if h0 is not None and h0.shape[-2:] != params.A_log.shape[-2:]:
        raise ContractError(f"h0 trailing shape {tuple(h0.shape[-2:])} != (D, N)")


def selective_scan_sequential(
    inp: ScanInput,
    params: SSMParams,
    h0: Optional[torch.Tensor] = None,
    return_state: bool = False,
):
    """Reference scan: the literal step-by-step recurrence in float64.

    Kept deliberately naive; this is the oracle for :func:`selective_scan`.
    """
    _prepare(inp, params, h0)
    f64 = torch.float64
    u, delta = inp.u.to(f64), inp.delta.to(f64)
    Bs, Cs = inp.B_seq.to(f64), inp.C_seq.to(f64)
    A = -torch.exp(params.A_log.to(f64))
    Dskip = params.D_skip.to(f64)

    batch = torch.broadcast_shapes(u.shape[:-2], A.shape[:-2], Bs.shape[:-2])
    h = torch.zeros(*batch, A.shape[-2], A.shape[-1], dtype=f64, device=u.device)
    if h0 is not None:
        h = h + h0.to(f64)
    ys = []
    for t in range(u.shape[-2]):
        dt = delta[..., t, :].unsqueeze(-1)
        h = torch.exp(dt * A) * h + dt * Bs[..., t, :].unsqueeze(-2) * u[..., t, :].unsqueeze(-1)
        ys.append((h * Cs[..., t, :].unsqueeze(-2)).sum(-1) + Dskip * u[..., t, :])
    y = torch.stack(ys, dim=-2)
    return (y, h) if return_state else y


def selective_scan(
    inp: ScanInput,
    params: SSMParams,
    h0: Optional[torch.Tensor] = None,
    return_state: bool = False,
):
    """Vectorized selective scan in the input dtype.

    Discretization and readout run for all steps at once in a time-major
    layout; only the state recurrence itself steps through time. Returns y
    shaped like ``inp.u`` (and the final state (..., D, N) if asked).
    """
    _prepare(inp, params, h0)
    D, N = params.inner_dim, params.state_dim
    batch = torch.broadcast_shapes(
        inp.u.shape[:-2], inp.B_seq.shape[:-2], params.A_log.shape[:-2], params.D_skip.shape[:-1]
    )
    L = inp.length

    def time_major(t, width):
        t = t.expand(*batch, L, width).reshape(-1, L, width)
        return t.transpose(0, 1).contiguous()

    delta = time_major(inp.delta, D)
    u = time_major(inp.u, D)
    Bs = time_major(inp.B_seq, N)
    Cs = time_major(inp.C_seq, N)
    A = (-torch.exp(params.A_log)).expand(*batch, D, N).reshape(-1, D, N)
    Dskip = params.D_skip.expand(*batch, D).reshape(-1, D)
    if h0 is None:
        h0 = u.new_zeros(())
    h0 = h0.expand(*batch, D, N).reshape(-1, D, N)

    y, h_last = _SelectiveScanFn.apply(delta, u, Bs, Cs, A, Dskip, h0)
    y = y.transpose(0, 1).reshape(*batch, L, D)
    if return_state:
        return y, h_last.reshape(*batch, D, N)
    return y


def cross_scan(x: torch.Tensor) -> torch.Tensor:
    """Flatten a (..., C, H, W) map into 4 directional sequences (..., 4, H*W, C).

    Directions: row-major, column-major, and the reversals of both.
    """
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ContractError(f"expected (..., C, H, W) with H, W >= 1, got {tuple(x.shape)}")
    rows = x.flatten(-2).transpose(-1, -2)
    cols = x.transpose(-1, -2).flatten(-2).transpose(-1, -2)
    return torch.stack([rows, cols, rows.flip(-2), cols.flip(-2)], dim=-3)


def cross_merge(seqs: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Inverse-permute the four sequences back to grid order and sum them."""
    if seqs.ndim < 3 or seqs.shape[-3] != 4 or seqs.shape[-2] != H * W:
        raise ContractError(f"expected (..., 4, {H * W}, C), got {tuple(seqs.shape)}")
    rows = seqs[..., 0, :, :] + seqs[..., 2, :, :].flip(-2)
    cols = seqs[..., 1, :, :] + seqs[..., 3, :, :].flip(-2)
    C = seqs.shape[-1]
    lead = seqs.shape[:-3]
    rows = rows.transpose(-1, -2).reshape(*lead, C, H, W)
    cols = cols.transpose(-1, -2).reshape(*lead, C, W, H).transpose(-1, -2)
    return rows + cols


class SS2D(nn.Module):
    """2-D selective scan over four directions with independent parameters."""

    n_directions = 4

    def __init__(
        self,
        dim: int,
        state_dim: int = 16,
        expansion: int = 2,
        dt_rank: Optional[int] = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        super().__init__()
        self.dim = dim
        self.state_dim = state_dim
        self.inner_dim = expansion * dim
        self.dt_rank = dt_rank or math.ceil(dim / 16)
        K, E, N, R = self.n_directions, self.inner_dim, state_dim, self.dt_rank

        self.in_proj = nn.Linear(dim, 2 * E, bias=False)
        self.conv2d = nn.Conv2d(E, E, kernel_size=3, padding=1, groups=E, bias=True)
        self.x_proj_weight = nn.Parameter(torch.empty(K, R + 2 * N, E))
        self.dt_proj_weight = nn.Parameter(torch.empty(K, E, R))
        self.delta_bias = nn.Parameter(torch.empty(K, E))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, N + 1, dtype=torch.float32)).repeat(K, E, 1))
        self.D_skip = nn.Parameter(torch.ones(K, E))
        self.out_norm = nn.LayerNorm(E)
        self.out_proj = nn.Linear(E, dim, bias=False)
        self._init_ssm(dt_min, dt_max)

    @torch.no_grad()
    def _init_ssm(self, dt_min, dt_max):
        E, R = self.inner_dim, self.dt_rank
        if self.x_proj_weight.is_meta:
            return
        bound = E ** -0.5
        self.x_proj_weight.uniform_(-bound, bound)
        self.dt_proj_weight.uniform_(-(R ** -0.5), R ** -0.5)
        dt = torch.exp(torch.rand(self.n_directions, E) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        dt = dt.clamp(min=1e-4)
        # inverse softplus so softplus(delta_bias) == dt at init
        self.delta_bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def ssm_params(self) -> SSMParams:
        return SSMParams(self.A_log, self.D_skip, self.delta_bias)

    def scan_inputs(self, xs: torch.Tensor) -> ScanInput:
        """Project direction sequences (B, K, L, E) to per-token (delta, B, C)."""
        R, N = self.dt_rank, self.state_dim
        proj = torch.einsum("bkle,kce->bklc", xs, self.x_proj_weight)
        dts, Bs, Cs = torch.split(proj, [R, N, N], dim=-1)
        dts = torch.einsum("bklr,ker->bkle", dts, self.dt_proj_weight)
        delta = F.softplus(dts + self.delta_bias[:, None, :])
        return ScanInput(xs, delta, Bs, Cs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C) tokens
        Bn, H, W, _ = x.shape
        xz = self.in_proj(x)
        xi, z = xz.chunk(2, dim=-1)
        xi = F.silu(self.conv2d(xi.permute(0, 3, 1, 2)))
        xs = cross_scan(xi)
        ys = selective_scan(self.scan_inputs(xs), self.ssm_params())
        y = cross_merge(ys, H, W).permute(0, 2, 3, 1)
        y = self.out_norm(y) * F.silu(z)
        return self.out_proj(y)


class VSSBlock(nn.Module):
    """Pre-norm residual block around :class:`SS2D`: x + ss2d(norm(x))."""

    def __init__(self, dim: int, state_dim: int = 16, expansion: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.ss2d = SS2D(dim, state_dim=state_dim, expansion=expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ss2d(self.norm(x))


def vss_block_forward(x: torch.Tensor, block: VSSBlock) -> torch.Tensor:
    """Checked functional entry point for a VSS block on (..., H, W, C) tokens."""
    if not torch.isfinite(x).all():
        raise ContractError("VSS block input contains non-finite values")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != block.ss2d.dim:
        raise ContractError(f"expected (B, H, W, {block.ss2d.dim}) tokens, got {tuple(x.shape)}")
    out = block(x)
    return out[0] if squeeze else out
