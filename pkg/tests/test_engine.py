import csv
import json
import math

import numpy as np
import pytest
import torch

from dsvm_unet.data import Sample
from dsvm_unet.engine import (
    ABLATION_COLUMNS,
    LOG_COLUMNS,
    TrainConfig,
    build_from_checkpoint,
    cosine_lr,
    evaluate,
    load_checkpoint,
    run_ablation,
    strip_heads,
    train,
)
from dsvm_unet.losses import LossWeights, NonFiniteLossError
from dsvm_unet.network import ModelConfig

SMALL = ModelConfig(base_dim=8, encoder_depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1, 1), state_dim=4)


def small_cfg(**kw):
    kw.setdefault("model", SMALL)
    kw.setdefault("epochs", 1)
    kw.setdefault("batch_size", 4)
    return TrainConfig(**kw)


def test_cosine_endpoints_exact():
    assert cosine_lr(0) == 1e-3
    assert cosine_lr(50) == 1e-5
    assert cosine_lr(100) == 1e-3
    assert cosine_lr(25) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)


def test_cosine_matches_torch_scheduler():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=1e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=50, eta_min=1e-5)
    for t in range(160):
        closed = sched._get_closed_form_lr()[0] if t else 1e-3
        assert cosine_lr(t) == pytest.approx(closed, rel=1e-9, abs=1e-15)
        opt.step()
        sched.step()


def test_cosine_modes():
    assert cosine_lr(60, mode="clamp") == 1e-5
    assert cosine_lr(60, mode="restart") == cosine_lr(10)
    assert cosine_lr(60, mode="periodic") == pytest.approx(cosine_lr(40), rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(1, mode="linear")
    with pytest.raises(ValueError):
        cosine_lr(-1)


def test_config_roundtrip_and_validation():
    cfg = small_cfg(loss=LossWeights(alpha=0.3), seed=5)
    assert TrainConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")
    with pytest.raises(ValueError):
        TrainConfig(base_lr=1e-6)
    paper = TrainConfig.paper()
    assert (paper.epochs, paper.batch_size, paper.model.base_dim) == (300, 32, 96)


def test_train_writes_artifacts(tmp_path, tiny_splits):
    tr, va = tiny_splits
    res = train(small_cfg(epochs=2), tr, va, out_dir=tmp_path)
    for name in ("train_log.csv", "last.pt", "best.pt", "summary.json"):
        assert (tmp_path / name).exists()
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 1 + 2 * 3
    assert [float(r[2]) for r in rows[1:]] == [1e-3] * 3 + [cosine_lr(1)] * 3
    assert res.best_epoch in (0, 1) and 0 <= res.best_metric <= 1

    blob = load_checkpoint(tmp_path / "last.pt")
    assert blob["epoch"] == 2 and blob["has_distill_heads"]
    assert any(k.startswith("distill.") for k in blob["params"])
    cfg, model, heads, _ = build_from_checkpoint(blob, with_heads=True)
    assert cfg.epochs == 2 and heads is not None
    ev = evaluate(tmp_path / "last.pt", va)
    direct = evaluate(res.model, va, res.norm_stats)
    assert ev.summary.miou == direct.summary.miou
    assert len(ev.per_image) == len(va) and ev.pooled is not None


def test_inference_checkpoint_has_no_heads(tmp_path, tiny_splits):
    tr, va = tiny_splits
    train(small_cfg(), tr, va, out_dir=tmp_path)
    slim = strip_heads(load_checkpoint(tmp_path / "best.pt"))
    assert not any(k.startswith("distill.") for k in slim["params"]) and slim["optimizer"] is None
    torch.save(slim, tmp_path / "slim.pt")
    assert evaluate(tmp_path / "slim.pt", va).summary.miou == evaluate(tmp_path / "best.pt", va).summary.miou
    with pytest.raises(ValueError):
        build_from_checkpoint(tmp_path / "slim.pt", with_heads=True)


def test_determinism(tiny_splits):
    tr, va = tiny_splits
    a = train(small_cfg(seed=3), tr, va)
    b = train(small_cfg(seed=3), tr, va)
    assert a.log == b.log and a.init_checksum == b.init_checksum
    c = train(small_cfg(seed=4), tr, va)
    assert c.log != a.log


def test_resume_matches_uninterrupted(tmp_path, tiny_splits):
    tr, va = tiny_splits
    full = train(small_cfg(epochs=2), tr, va)
    train(small_cfg(epochs=1), tr, va, out_dir=tmp_path)
    resumed = train(small_cfg(epochs=2), tr, va, out_dir=tmp_path, resume=tmp_path / "last.pt")
    assert resumed.log == full.log[3:]
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert len(rows) == 1 + 6


def test_zero_weights_still_log_distill_terms(tiny_splits):
    tr, va = tiny_splits
    res = train(small_cfg(loss=LossWeights(alpha=0, beta=0)), tr, va)
    for row in res.log:
        assert row["l_proj"] > 0 and row["l_prog"] > 0
        assert row["l_total"] == pytest.approx(row["l_seg"], rel=1e-6)


def test_multiclass_training(tmp_path):
    g = np.random.default_rng(0)
    samples = []
    for i in range(4):
        mask = np.zeros((64, 64), np.int64)
        mask[8:30, 8:30] = 1
        mask[34:60, 30:60] = 2
        img = np.stack([mask == k for k in range(3)]).astype(np.float32) + 0.1 * g.random((3, 64, 64), dtype=np.float32)
        samples.append(Sample(f"m{i}", img, mask))
    cfg = small_cfg(model=ModelConfig(**{**SMALL.__dict__, "num_classes": 3}))
    res = train(cfg, samples, samples)
    report = res.last_eval.summary
    assert [r["class"] for r in report.per_class] == [1, 2]
    assert res.best_metric == report.dsc


def test_label_and_class_errors(tiny_splits):
    tr, va = tiny_splits
    bad = [Sample("b", tr[0].image, np.full_like(tr[0].mask, 2))]
    with pytest.raises(ValueError, match="label"):
        train(small_cfg(), bad)
    res = train(small_cfg(), tr[:4])
    with pytest.raises(ValueError, match="classes"):
        evaluate(res.model, va, res.norm_stats, num_classes=5)
    with pytest.raises(ValueError):
        train(small_cfg(), [])


def test_non_finite_is_diagnosed(tiny_splits):
    tr, _ = tiny_splits
    poisoned = [Sample(s.id, np.full_like(s.image, np.nan), s.mask) for s in tr[:4]]
    with pytest.raises(NonFiniteLossError, match="step 1"):
        train(small_cfg(), poisoned)


def test_ablation_shape_and_shared_init(tmp_path, tiny_splits):
    tr, va = tiny_splits
    res = run_ablation(small_cfg(), tr[:8], va, seeds=(0, 1), out_dir=tmp_path)
    assert len(res.rows) == 4
    metric_cols = ABLATION_COLUMNS[3:]
    assert len(metric_cols) == 6
    assert [(r["L_Proj"], r["L_Prog"]) for r in res.rows] == [("×", "×"), ("✓", "×"), ("×", "✓"), ("✓", "✓")]
    for seed in (0, 1):
        assert len({r["init_checksum"] for r in res.raw[seed]}) == 1
        assert len({r["first_batch_hash"] for r in res.raw[seed]}) == 1
    assert res.raw[0][0]["init_checksum"] != res.raw[1][0]["init_checksum"]
    table = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(table) == 4 and tuple(table[0]) == ABLATION_COLUMNS
    assert all("±" in table[0][c] for c in metric_cols)
    avg = res.rows[0]["Avg"][0]
    per_seed = [np.mean(list(res.raw[s][0]["metrics"].values())) for s in (0, 1)]
    assert avg == pytest.approx(np.mean(per_seed))
