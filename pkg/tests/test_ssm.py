import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dsvm_unet.ssm import (
    SS2D,
    ContractError,
    ScanInput,
    SSMParams,
    VSSBlock,
    cross_merge,
    cross_scan,
    linear_recurrence,
    selective_scan,
    selective_scan_sequential,
    vss_block_forward,
)


def random_case(g, L, D, N, batch=(), dtype=torch.float32):
    inp = ScanInput(
        u=torch.randn(*batch, L, D, generator=g, dtype=dtype),
        delta=torch.rand(*batch, L, D, generator=g, dtype=dtype) * 0.5 + 0.01,
        B_seq=torch.randn(*batch, L, N, generator=g, dtype=dtype),
        C_seq=torch.randn(*batch, L, N, generator=g, dtype=dtype),
    )
    params = SSMParams(torch.randn(D, N, generator=g, dtype=dtype) * 0.5, torch.randn(D, generator=g, dtype=dtype))
    return inp, params


def norm_rel(a, b):
    return ((a.double() - b.double()).abs().max() / b.double().abs().max().clamp_min(1e-30)).item()


def test_scalar_recurrence_by_hand():
    # D = N = 1, A = -1, B = C = 1, delta = 1, D_skip = 0
    u = torch.tensor([[1.0], [2.0], [0.0]])
    inp = ScanInput(u, torch.ones(3, 1), torch.ones(3, 1), torch.ones(3, 1))
    params = SSMParams(torch.zeros(1, 1), torch.zeros(1))
    a = math.exp(-1)
    expected = torch.tensor([[1.0], [a + 2], [a * (a + 2)]])
    assert torch.allclose(selective_scan(inp, params), expected, atol=1e-6)
    assert torch.allclose(selective_scan_sequential(inp, params).float(), expected, atol=1e-6)


def test_zero_input_gives_zero_output():
    g = torch.Generator().manual_seed(0)
    inp, params = random_case(g, 10, 4, 3)
    inp.u.zero_()
    assert selective_scan(inp, params).abs().max() == 0


def test_skip_only_when_C_is_zero():
    g = torch.Generator().manual_seed(1)
    inp, params = random_case(g, 7, 3, 2)
    inp.C_seq.zero_()
    assert torch.allclose(selective_scan(inp, params), params.D_skip * inp.u)


@pytest.mark.parametrize("batch", [(), (2,), (2, 4)])
def test_matches_oracle_with_batch_dims(batch):
    g = torch.Generator().manual_seed(2)
    inp, params = random_case(g, 12, 5, 4, batch)
    h0 = torch.randn(*batch, 5, 4, generator=g)
    y, h = selective_scan(inp, params, h0, return_state=True)
    yr, hr = selective_scan_sequential(inp, params, h0, return_state=True)
    assert norm_rel(y, yr) < 1e-5
    assert norm_rel(h, hr) < 1e-5


def test_state_carry_equals_full_scan():
    g = torch.Generator().manual_seed(3)
    inp, params = random_case(g, 20, 3, 4, dtype=torch.float64)
    y_full = selective_scan(inp, params)
    first = ScanInput(*(getattr(inp, k)[:8] for k in ("u", "delta", "B_seq", "C_seq")))
    second = ScanInput(*(getattr(inp, k)[8:] for k in ("u", "delta", "B_seq", "C_seq")))
    y1, h = selective_scan(first, params, return_state=True)
    y2 = selective_scan(second, params, h0=h)
    assert torch.allclose(torch.cat([y1, y2]), y_full, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 24), D=st.integers(1, 6), N=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_oracle_property(L, D, N, seed):
    g = torch.Generator().manual_seed(seed)
    inp, params = random_case(g, L, D, N)
    assert norm_rel(selective_scan(inp, params), selective_scan_sequential(inp, params)) < 1e-5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0))
def test_linear_in_u(seed, scale):
    g = torch.Generator().manual_seed(seed)
    inp, params = random_case(g, 9, 3, 2, dtype=torch.float64)
    y = selective_scan(inp, params)
    scaled = ScanInput(inp.u * scale, inp.delta, inp.B_seq, inp.C_seq)
    assert torch.allclose(selective_scan(scaled, params), y * scale, rtol=1e-10, atol=1e-12)


def test_causality():
    g = torch.Generator().manual_seed(4)
    inp, params = random_case(g, 16, 3, 3, dtype=torch.float64)
    y = selective_scan(inp, params)
    u2 = inp.u.clone()
    u2[10:] += 5.0
    y2 = selective_scan(ScanInput(u2, inp.delta, inp.B_seq, inp.C_seq), params)
    assert torch.equal(y[:10], y2[:10])
    assert not torch.allclose(y[10:], y2[10:])


def test_gradcheck_selective_scan():
    g = torch.Generator().manual_seed(5)
    inp, params = random_case(g, 6, 3, 2, batch=(2,), dtype=torch.float64)
    h0 = torch.randn(2, 3, 2, generator=g, dtype=torch.float64)
    leaves = [inp.u, inp.delta, inp.B_seq, inp.C_seq, params.A_log, params.D_skip, h0]
    for t in leaves:
        t.requires_grad_(True)

    def f(u, dl, B, C, A_log, Dk, h):
        y, hl = selective_scan(ScanInput(u, dl, B, C), SSMParams(A_log, Dk), h, return_state=True)
        return y, hl

    assert torch.autograd.gradcheck(f, leaves, eps=1e-6, atol=1e-7, rtol=1e-5)


def test_gradcheck_linear_recurrence():
    g = torch.Generator().manual_seed(6)
    a = torch.rand(7, 3, generator=g, dtype=torch.float64).requires_grad_()
    x = torch.randn(7, 3, generator=g, dtype=torch.float64).requires_grad_()
    assert torch.autograd.gradcheck(linear_recurrence, (a, x))


def test_contract_errors():
    g = torch.Generator().manual_seed(7)
    inp, params = random_case(g, 5, 3, 2)
    bad = ScanInput(inp.u, -inp.delta, inp.B_seq, inp.C_seq)
    with pytest.raises(ContractError):
        selective_scan(bad, params)
    with pytest.raises(ContractError):
        selective_scan(ScanInput(inp.u, inp.delta, inp.B_seq[:4], inp.C_seq), params)
    with pytest.raises(ContractError):
        selective_scan(inp, SSMParams(torch.zeros(3, 5), torch.zeros(3)))


def test_cross_scan_orders_and_merge_roundtrip():
    x = torch.arange(2 * 3 * 4, dtype=torch.float32).reshape(1, 2, 3, 4)
    seqs = cross_scan(x)
    assert seqs.shape == (1, 4, 12, 2)
    assert seqs[0, 0, :, 0].tolist() == list(range(12))
    assert seqs[0, 1, :, 0].tolist() == [0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11]
    assert seqs[0, 2, :, 0].tolist() == list(range(11, -1, -1))
    assert torch.equal(cross_merge(seqs, 3, 4), 4 * x)


def test_ss2d_preserves_token_shape():
    m = SS2D(8, state_dim=4)
    y = m(torch.randn(2, 5, 6, 8))
    assert y.shape == (2, 5, 6, 8) and torch.isfinite(y).all()


def test_ss2d_dt_init_range():
    torch.manual_seed(0)
    m = SS2D(16)
    dt = torch.nn.functional.softplus(m.delta_bias)
    assert dt.min() >= 1e-4 - 1e-7 and dt.max() <= 0.1 + 1e-6


def test_vss_block_forward_contracts():
    blk = VSSBlock(8, state_dim=4)
    x = torch.randn(4, 4, 8)
    assert vss_block_forward(x, blk).shape == x.shape
    with pytest.raises(ContractError):
        vss_block_forward(torch.randn(1, 4, 4, 6), blk)
    x[0, 0, 0] = float("nan")
    with pytest.raises(ContractError):
        vss_block_forward(x, blk)


def test_gradcheck_vss_block():
    torch.manual_seed(0)
    blk = VSSBlock(4, state_dim=2).double()
    x = torch.randn(1, 3, 3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: vss_block_forward(t, blk), (x,), eps=1e-6, atol=1e-6, rtol=1e-4)
