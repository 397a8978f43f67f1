from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from motionlm.lm import LMConfig, MotionLM
from motionlm.tasks import make_training_set
from motionlm.trainer import (NonFiniteLossError, TrainConfig, TrainReport, batches, exact_matches, make_batch,
                              overfit_probe, per_row_losses, train, validate)


def tiny_model(M=16):
    torch.manual_seed(0)
    return MotionLM(LMConfig(d_model=32, enc_layers=1, dec_layers=1, heads=2, ffn=64, motion_vocab=M, code_dim=8,
                             max_len=200, dropout=0.0))


@pytest.fixture(scope="module")
def tokens(small_corpus):
    return {m: [(i * 7 + len(m)) % 16 for i in range(len(small_corpus.motions[m].data) // 8)]
            for m in small_corpus.motions}


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, warmup=10)
    assert cfg.lr_at(0) == pytest.approx(1e-4) and cfg.lr_at(9) == pytest.approx(1e-3)
    assert cfg.lr_at(500) == 1e-3


def test_report_json_round_trip(tmp_path):
    r = TrainReport([1.0, float("nan")], [0.5, 0.25], {"MG": [float("nan"), 2.0]}, [{"step": 2, "total": 1.0}])
    back = TrainReport.from_json(r.to_json())
    assert math.isnan(back.text_loss[1]) and back.motion_loss == r.motion_loss
    assert "NaN" not in r.to_json()
    assert len(r.write_csv(tmp_path / "l.csv").read_text().splitlines()) == 3


def test_per_row_losses_sum_to_means(small_corpus, tokens):
    model = tiny_model().eval()
    insts = list(make_training_set(small_corpus, tokens, seed=1, count=12))
    b = make_batch(insts)
    with torch.no_grad():
        st, nt, sm, nm = per_row_losses(model, b)
        L_t, L_m = model.loss(b)
    assert float(st.sum() / nt.sum()) == pytest.approx(float(L_t), rel=1e-5)
    assert float(sm.sum() / nm.sum()) == pytest.approx(float(L_m), rel=1e-5)


def test_batches_are_deterministic_and_bounded(small_corpus, tokens):
    def run():
        it = make_training_set(small_corpus, tokens, seed=2)
        return [tuple(b.kinds) for b in batches(it, 4, 6, 2, 3, 0)]
    a = run()
    assert len(a) == 6 and a == run()


def test_training_lowers_validation_loss(tmp_path, small_corpus, tokens):
    model = tiny_model()
    val = {"MU": list(make_training_set(small_corpus, tokens, {"MU": 1}, seed=9, count=8))}
    before = validate(model, val)["total"]
    cfg = TrainConfig(steps=60, batch_size=8, lr=3e-3, warmup=5, eval_interval=30, checkpoint_dir=str(tmp_path))
    report = train(model, make_training_set(small_corpus, tokens, seed=0), cfg, val)
    assert report.steps == 60 and len(report.validation) == 2
    assert report.validation[-1]["total"] < before
    assert {p.name for p in tmp_path.iterdir()} >= {"lm_best.ckpt", "lm_last.ckpt", "lm_final.ckpt"}


def test_non_finite_loss_is_reported(small_corpus, tokens):
    model = tiny_model()
    with torch.no_grad():
        model.heads.text.weight.fill_(float("nan"))
    cfg = TrainConfig(steps=3, batch_size=4, eval_interval=100)
    with pytest.raises(NonFiniteLossError):
        train(model, make_training_set(small_corpus, tokens, seed=0), cfg, {})


def test_overfit_probe_memorizes_small_set(small_corpus, tokens):
    insts = list(make_training_set(small_corpus, tokens, {"MU": 1, "MG": 1, "T2S": 1}, seed=5, count=4))
    model = tiny_model()
    res = overfit_probe(model, insts, steps=400, lr=3e-3, warmup=10, check_every=50)
    assert res.token_accuracy > 0.95 and res.exact_matches == 4
    assert exact_matches(model, insts) == 4
