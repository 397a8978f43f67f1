"""Acceptance suite: twelve end-to-end criteria at their stated tolerances.

Heavy fixtures (tokenizer and sequence-model training on the default synthetic
corpus) are session-scoped and shared. Each criterion records one PASS/FAIL
line, printed in the terminal summary.
"""
from __future__ import annotations

import math
import random
import socket
import time

import numpy as np
import pytest
import torch

from motionlm.annotate import MockBackend, annotate_video, package_dataset, standins_from_corpus
from motionlm.checkpoint import CheckpointError, from_bytes, load_checkpoint, to_bytes
from motionlm.corpus import (BadMagicError, CorpusConfig, MotionFormatError, MotionSequence, ShapeMismatchError,
                             TruncatedPayloadError, build_corpus, judge_rules, motion_from_bytes, motion_to_bytes)
from motionlm.diagnostics import lm_gradcheck, vq_gradcheck
from motionlm.evalmetrics.cycle import bleu1, shuffled_baseline
from motionlm.evalmetrics.judge import JudgePair, RuleJudge, lcs_score
from motionlm.evalmetrics.motion import diversity, fid, multimodality
from motionlm.lm import LMConfig, MotionLM, Sampler, collate
from motionlm.pipeline import LoopConfig, _Seeds
from motionlm.tasks import make_training_set
from motionlm.tokenizer import VQConfig, VQTrainConfig, nearest_codes
from motionlm.trainer import TrainConfig, make_batch, overfit_probe
from motionlm.vocab import TEXT_VOCAB_SIZE
from motionlm.workflow import corpus_split, load_pipeline, tokenize_corpus, train_language_model, train_tokenizer

from metric_table import TABLE
from test_text_metrics import score as table_score

SCENES_FOR_CYCLE = 20
JUNCTIONS = 50


@pytest.fixture(scope="session")
def corpus():
    c = build_corpus(CorpusConfig(), seed=0)
    return c, corpus_split(c)


@pytest.fixture(scope="session")
def trained_tokenizer(corpus, tmp_path_factory):
    c, split = corpus
    path = tmp_path_factory.mktemp("vq") / "tok.ckpt"
    t0 = time.perf_counter()
    tok, held = train_tokenizer(c, split, VQConfig(), VQTrainConfig(), path)
    return tok, held, time.perf_counter() - t0, path


@pytest.fixture(scope="session")
def tokens(corpus, trained_tokenizer):
    return tokenize_corpus(trained_tokenizer[0], corpus[0])


@pytest.fixture(scope="session")
def trained_pipeline(corpus, trained_tokenizer, tmp_path_factory):
    c, split = corpus
    out = tmp_path_factory.mktemp("lm")
    t0 = time.perf_counter()
    _, report = train_language_model(c, split, trained_tokenizer[0], LMConfig(), TrainConfig(), out)
    return load_pipeline(report.checkpoint), report, time.perf_counter() - t0


def _timed(limit_s, t0):
    took = time.perf_counter() - t0
    return took, took < limit_s


# --- 1 ---------------------------------------------------------------------

def test_c01_gradient_integrity(acceptance):
    t0 = time.perf_counter()
    vq, audit = vq_gradcheck(tol=1e-5)
    lm = lm_gradcheck(tol=1e-5)
    took, fast = _timed(120, t0)
    ok = vq.ok and lm.ok and audit.ok and fast
    acceptance(1, "gradient integrity", ok,
               f"vq max rel {vq.max_rel_err:.1e}, lm max rel {lm.max_rel_err:.1e}, "
               f"stop-gradient zeros {audit.ok}, {took:.0f}s")
    assert ok, (vq.flagged(), lm.flagged(), audit)


# --- 2 ---------------------------------------------------------------------

def test_c02_quantizer_oracle(acceptance):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    M, d = 512, 128
    mismatches = 0
    for trial in range(1000):
        codes = torch.randn(M, d, generator=g)
        if trial % 4 == 0:  # duplicated codes force ties
            codes[torch.randint(M, (64,), generator=g)] = codes[torch.randint(M, (64,), generator=g)]
        z = torch.randn(1, d, generator=g)
        if trial % 3 == 0:
            z = codes[torch.randint(M, (1,), generator=g)].clone()
        dist = ((z.double() - codes.double()) ** 2).sum(1)
        best = int(torch.nonzero(dist == dist.min())[0])  # lowest index among exact minima
        mismatches += int(nearest_codes(z, codes)[0]) != best
    took, fast = _timed(60, t0)
    ok = mismatches == 0 and fast
    acceptance(2, "quantizer oracle", ok, f"{mismatches} mismatches / 1000, {took:.0f}s")
    assert ok


# --- 3 ---------------------------------------------------------------------

def test_c03_head_range(acceptance, corpus, tokens, trained_pipeline):
    t0 = time.perf_counter()
    c, split = corpus
    train_c = c.subset(split.train)
    torch.manual_seed(1)
    models = [MotionLM(LMConfig(dropout=0.0)).eval(), trained_pipeline[0].lm]
    sampler = Sampler("topk", k=10 ** 6)  # full-support sampling from each head
    gen = torch.Generator().manual_seed(0)
    need = 100_000
    # positions of one modality come from the tasks whose targets are in that modality
    sources = {"motion": ({"MG": 1.0, "MiB": 1.0}, 512), "text": ({"T2S": 1.0, "CT2S": 1.0}, TEXT_VOCAB_SIZE)}
    counts = {"text": 0, "motion": 0}
    bad = {"text": 0, "motion": 0}
    for name, (weights, hi) in sources.items():
        for m_i, model in enumerate(models):
            stream = make_training_set(train_c, tokens, weights, seed=10 + m_i)
            seen = 0
            while seen < need // len(models):
                with torch.no_grad():
                    out = model(make_batch([next(stream) for _ in range(64)]))
                ids = torch.tensor(sampler.sample(out.motion if name == "motion" else out.text, gen))
                bad[name] += int(((ids < 0) | (ids >= hi)).sum())
                seen += len(ids)
            counts[name] += seen
    took, fast = _timed(120, t0)
    ok = min(counts.values()) >= need and sum(bad.values()) == 0 and fast
    acceptance(3, "head-range guarantee", ok,
               f"{counts['motion']} motion / {counts['text']} text positions, violations {bad}, {took:.0f}s")
    assert ok


# --- 4 ---------------------------------------------------------------------

def test_c04_causality(acceptance, corpus, tokens):
    t0 = time.perf_counter()
    c, split = corpus
    torch.manual_seed(2)
    model = MotionLM(LMConfig(dropout=0.0)).eval()
    rng = random.Random(0)
    insts = list(make_training_set(c.subset(split.train), tokens, seed=4, count=100))
    failures = 0
    for inst in insts:
        b = collate([(inst.condition, inst.target)])
        n = int(b.tgt_mask[0].sum())
        t = rng.randrange(n)
        b2 = collate([(inst.condition, inst.target)])
        for j in range(t + 1, n):
            hi = 512 if b2.dec_motion[0, j] else 256
            b2.dec_ids[0, j] = rng.randrange(hi)
        with torch.no_grad():
            x, y = model(b), model(b2)
        failures += any(not torch.equal(x.at(0, s), y.at(0, s)) for s in range(t + 1))
    took, fast = _timed(60, t0)
    ok = failures == 0 and fast
    acceptance(4, "causality", ok, f"{failures} of 100 trials changed earlier logits, {took:.0f}s")
    assert ok


# --- 5 ---------------------------------------------------------------------

def test_c05_init_loss(acceptance, corpus, tokens):
    t0 = time.perf_counter()
    c, split = corpus
    torch.manual_seed(3)
    model = MotionLM(LMConfig(dropout=0.0)).eval()
    batch = make_batch(list(make_training_set(c.subset(split.train), tokens, seed=5, count=64)))
    with torch.no_grad():
        L_t, L_m = model.loss(batch)
    rt = float(L_t) / math.log(TEXT_VOCAB_SIZE)
    rm = float(L_m) / math.log(512)
    took, fast = _timed(60, t0)
    ok = abs(rt - 1) <= 0.05 and abs(rm - 1) <= 0.05 and fast
    acceptance(5, "init-loss calibration", ok,
               f"L_t {float(L_t):.3f} vs ln N {math.log(TEXT_VOCAB_SIZE):.3f}, "
               f"L_m {float(L_m):.3f} vs ln M {math.log(512):.3f}, {took:.0f}s")
    assert ok


# --- 6 ---------------------------------------------------------------------

def test_c06_capacity(acceptance, corpus, tokens, trained_tokenizer):
    t0 = time.perf_counter()
    c, split = corpus
    torch.manual_seed(4)
    model = MotionLM(LMConfig(), trained_tokenizer[0].codebook.embeddings.detach())
    insts = list(make_training_set(c.subset(split.train), tokens, seed=6, count=32))
    res = overfit_probe(model, insts, steps=2000)
    took, fast = _timed(15 * 60, t0)
    ok = res.token_accuracy > 0.95 and res.exact_matches >= 30 and fast
    acceptance(6, "capacity oracle", ok,
               f"token accuracy {res.token_accuracy:.4f}, exact {res.exact_matches}/32 after {res.steps_run} steps, "
               f"{took:.0f}s")
    assert ok


# --- 7 ---------------------------------------------------------------------

def test_c07_tokenizer_quality(acceptance, trained_tokenizer):
    tok, held, took, _ = trained_tokenizer
    ok = held["mse"] < 0.05 and held["perplexity"] > 512 / 16 and took < 20 * 60
    acceptance(7, "tokenizer quality", ok,
               f"held-out mse {held['mse']:.4f}, perplexity {held['perplexity']:.1f}, {took:.0f}s")
    assert ok


# --- 8 ---------------------------------------------------------------------

def test_c08_metric_oracles(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    table_ok = True
    for metric, cand, refs, expected in TABLE:
        err = abs(table_score(metric, cand, refs) - expected)
        table_ok &= err <= (1e-6 if metric == "cider" else 1e-9)
        worst = max(worst, err)
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 16))
    self_fid = fid(a, a)
    d, s = 8, 1.5
    m = np.full(d, 0.5)
    g1, g2 = rng.normal(size=(40000, d)), m + s * rng.normal(size=(40000, d))
    expected = m @ m + d * (1 - s) ** 2
    gauss_err = abs(fid(g1, g2) - expected) / expected
    x = rng.normal(size=(600, 4))
    brute_div = np.mean([np.linalg.norm(p - q) for i, p in enumerate(x[:200]) for q in x[i + 1:200]])
    sd = np.linalg.norm(x[:300] - x[300:], axis=1).std()
    div_ok = abs(diversity(x, 300, 1) - brute_div) < 4 * sd / math.sqrt(300)
    groups = [rng.normal(size=(20, 4)) for _ in range(30)]
    brute_mm = np.mean([np.mean([np.linalg.norm(p - q) for i, p in enumerate(gr) for q in gr[i + 1:]])
                        for gr in groups])
    mm_ok = abs(multimodality(groups, 10, 2) - brute_mm) < 4 * sd / math.sqrt(300)
    took, fast = _timed(120, t0)
    ok = table_ok and len(TABLE) >= 10 and self_fid <= 1e-6 and gauss_err < 0.05 and div_ok and mm_ok and fast
    acceptance(8, "metric oracles", ok,
               f"{len(TABLE)} table cases worst err {worst:.1e}, FID(a,a) {self_fid:.1e}, "
               f"gaussian rel err {gauss_err:.3f}, div ok {div_ok}, mm ok {mm_ok}, {took:.0f}s")
    assert ok


# --- 9 ---------------------------------------------------------------------

def test_c09_closed_loop_structure(acceptance, corpus, trained_pipeline):
    t0 = time.perf_counter()
    c, split = corpus
    pipe = trained_pipeline[0]
    scene = c.subset(split.test).records[0].scene_text
    trace = pipe.run_full(scene, LoopConfig(rounds=4, seed=0))
    n_steps = sum(len(s) for s in trace.steps)
    M = pipe.lm.cfg.motion_vocab
    all_ids = trace.long_motion_tokens + [i for s in trace.segments for i in s]
    oov = sum(not 0 <= i < M for i in all_ids)
    replay = pipe.replay(trace)
    took, fast = _timed(600, t0)
    ok = (not trace.errors and len(trace.tasks) == 4 and 4 <= n_steps <= 20
          and len(trace.transitions) == len(trace.segments) - 1 and trace.long_motion_frames >= 1000
          and oov == 0 and replay.to_json() == trace.to_json() and fast)
    acceptance(9, "closed-loop structure", ok,
               f"{len(trace.tasks)} tasks, {n_steps} steps, {len(trace.transitions)} transitions, "
               f"{trace.long_motion_frames} frames, {oov} oov, replay exact {replay.to_json() == trace.to_json()}, "
               f"errors {trace.errors}, {took:.0f}s")
    assert ok


# --- 10 --------------------------------------------------------------------

@pytest.fixture(scope="session")
def cycle_traces(corpus, trained_pipeline):
    c, split = corpus
    scenes = c.subset(split.test).scenes()
    pipe = trained_pipeline[0]
    t0 = time.perf_counter()
    traces = [pipe.run_full(scenes[sid][0].scene_text, LoopConfig(rounds=4, seed=100 + i))
              for i, sid in enumerate(sorted(scenes)[:SCENES_FOR_CYCLE])]
    return traces, time.perf_counter() - t0


def test_c10_cycle_consistency(acceptance, corpus, trained_pipeline, cycle_traces):
    c, split = corpus
    traces, loop_time = cycle_traces
    fw = [s for tr in traces for g in tr.steps for s in g]
    bw = [d for tr in traces for d in tr.backward_steps]
    aligned = len(fw) == len(bw) and len(traces) == SCENES_FOR_CYCLE
    paired = float(np.mean([bleu1(b, f) for f, b in zip(fw, bw)])) if aligned else 0.0
    mu, sd = shuffled_baseline(fw, bw, bleu1, permutations=200, seed=0) if aligned else (1.0, 0.0)

    judge = RuleJudge(judge_rules(c))
    gt, shuffled = [], []
    test = c.subset(split.test)
    rng = np.random.default_rng(0)
    for recs in test.scenes().values():
        for r in recs:
            hist = recs[r.segment_index - 1].task_text if r.segment_index else ""
            gt.append(JudgePair("CT2T", {"scene": r.scene_text, "history": hist}, r.task_text))
            gt.append(JudgePair("T2S", {"task": r.task_text}, r.step_texts[0]))
    cands = [p.candidate for p in gt]
    for p, j in zip(gt, rng.permutation(len(gt))):
        shuffled.append(JudgePair(p.kind, p.condition, cands[j]))
    lcs_gt = lcs_score(gt, judge).score
    lcs_sh = lcs_score(shuffled, judge).score
    total = trained_pipeline[2] + loop_time
    ok = aligned and paired >= mu + 2 * sd and lcs_gt == 1.0 and lcs_sh < 0.3 and total < 30 * 60
    acceptance(10, "cycle consistency", ok,
               f"step BLEU-1 {paired:.3f} vs shuffled {mu:.3f}±{sd:.3f} over {len(fw)} pairs; "
               f"LCS ground truth {lcs_gt:.3f} shuffled {lcs_sh:.3f}; training+loop {total:.0f}s")
    assert ok


# --- 11 --------------------------------------------------------------------

def test_c11_in_between_smoothness(acceptance, corpus, tokens, trained_pipeline, cycle_traces):
    t0 = time.perf_counter()
    c, split = corpus
    pipe = trained_pipeline[0]
    traces, _ = cycle_traces
    # sanity for the measurement: a real gap cut out of a held-out motion should bridge its own cut
    oracle = []
    for mid in split.test[:JUNCTIONS]:
        ids = tokens[mid]
        a = max(1, len(ids) // 2 - 3)
        oracle.append([pipe.junction_discontinuity(ids[:a], gap, ids[a + 6:]) for gap in (ids[a:a + 6], [])])
    oracle_with, oracle_without = np.mean(oracle, 0)
    pairs = [(a, b) for tr in traces for a, b in zip(tr.segments[:-1], tr.segments[1:])][:JUNCTIONS]
    cfg = LoopConfig(seed=7)
    transitions = pipe.in_between(pairs, cfg, _Seeds(cfg.seed))
    with_tr = float(np.mean([pipe.junction_discontinuity(a, t, b, cfg.context)
                             for (a, b), t in zip(pairs, transitions)]))
    without = float(np.mean([pipe.junction_discontinuity(a, [], b, cfg.context) for a, b in pairs]))
    took, fast = _timed(300, t0)
    ok = len(pairs) == JUNCTIONS and with_tr <= without and fast
    acceptance(11, "in-between smoothness", ok,
               f"mean max jump {with_tr:.4f} with transitions vs {without:.4f} without over {len(pairs)} junctions, "
               f"mean transition length {np.mean([len(t) for t in transitions]):.2f}; "
               f"ground-truth gaps {oracle_with:.4f} vs {oracle_without:.4f}, {took:.0f}s")
    assert ok


# --- 12 --------------------------------------------------------------------

def test_c12_formats(acceptance, tmp_path, monkeypatch):
    checks = {}
    rng = np.random.default_rng(0)
    m = MotionSequence("m", rng.normal(size=(57, 16)).astype(np.float32), 20)
    buf = motion_to_bytes(m)
    checks["amot round trip"] = motion_to_bytes(motion_from_bytes(buf)) == buf

    torch.manual_seed(0)
    from motionlm.lm import lm_section
    from motionlm.tokenizer import VQVAE, checkpoint_sections
    secs = {**checkpoint_sections(VQVAE(VQConfig())), "lm": lm_section(MotionLM(LMConfig()))}
    raw = to_bytes(secs)
    checks["checkpoint round trip"] = to_bytes(from_bytes(raw)) == raw

    def raises(fn, err):
        try:
            fn()
        except err:
            return True
        except Exception:
            return False
        return False

    checks["error taxonomy"] = all([
        raises(lambda: motion_from_bytes(b"XXXX" + buf[4:]), BadMagicError),
        raises(lambda: motion_from_bytes(buf[:-8]), TruncatedPayloadError),
        raises(lambda: motion_from_bytes(buf + b"\0" * 4), ShapeMismatchError),
        raises(lambda: motion_from_bytes(buf[:4] + b"\x09\0\0\0" + buf[8:]), MotionFormatError),
        raises(lambda: from_bytes(b"NOPE" + raw[4:]), CheckpointError),
        raises(lambda: from_bytes(raw[:-16]), CheckpointError),
        raises(lambda: load_checkpoint(tmp_path / "absent.ckpt"), FileNotFoundError),
    ])

    def no_network(*a, **k):
        raise AssertionError("network access during mock annotation")

    monkeypatch.setattr(socket.socket, "connect", no_network)
    small = build_corpus(CorpusConfig(samples_per_family=6), seed=1)
    videos = standins_from_corpus(small)
    outs = []
    for name in ("a", "b"):
        anns = [annotate_video(v, hs, MockBackend(), 6, 20, parallelism=4) for v, hs in videos.items()]
        outs.append(package_dataset(anns, tmp_path / name, {"mode": "mock"}))
    checks["mock annotate deterministic offline"] = all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("annotations.jsonl", "manifest.json"))
    ok = all(checks.values())
    acceptance(12, "formats", ok, ", ".join(f"{k}: {v}" for k, v in checks.items()))
    assert ok


# --- example-level checks on the trained artifacts (not numbered criteria) --

def test_tokenizer_loss_decreases(trained_tokenizer):
    losses = np.array(load_checkpoint(trained_tokenizer[3])["tokenizer"].extra["losses"])
    assert losses[-100:].mean() < 0.5 * losses[:100].mean()


def test_lm_every_task_improves_on_init(corpus, tokens, trained_pipeline):
    from motionlm.trainer import validate
    from motionlm.workflow import validation_sets
    c, split = corpus
    torch.manual_seed(0)
    init = MotionLM(LMConfig(), trained_pipeline[0].lm.codebook)
    before = validate(init, validation_sets(c.subset(split.val), tokens))
    after = trained_pipeline[1].validation[-1]
    worse = {k: (before[k], after[k]) for k in before if k != "total" and after[k] >= before[k]}
    assert not worse


def _family_rates(corpus, pipe, traces):
    from motionlm.corpus import family_of
    from motionlm.evalmetrics.motion import FeatureExtractor
    c, split = corpus
    order = {s.text: s.order for s in c.scene_types}
    plan = [family_of(t) == want for tr in traces for t, want in zip(tr.tasks, order[tr.scene])]
    steps = [family_of(s) == family_of(t) for tr in traces for t, g in zip(tr.tasks, tr.steps) for s in g]
    fe = FeatureExtractor(pipe.tok)
    train = c.subset(split.train)
    feats = fe([train.motions[r.motion_id] for r in train.records if not r.text_only])
    labels = [r.family for r in train.records if not r.text_only]
    fams = sorted(set(labels))
    centroids = np.stack([feats[[lab == f for lab in labels]].mean(0) for f in fams])
    synth = []
    for tr in traces:
        for s, seg in zip([s for g in tr.steps for s in g], tr.segments):
            f = fe([pipe.decode(seg)])[0]
            synth.append(fams[int(np.argmin(((centroids - f) ** 2).sum(1)))] == family_of(s))
    return float(np.mean(plan)), float(np.mean(steps)), float(np.mean(synth))


@pytest.fixture(scope="session")
def family_rates(corpus, trained_pipeline, cycle_traces):
    return _family_rates(corpus, trained_pipeline[0], cycle_traces[0])


def test_decomposed_steps_match_task_family(family_rates):
    assert family_rates[1] >= 0.6


def test_synthesized_segments_match_step_family(family_rates):
    assert family_rates[2] >= 0.6


@pytest.mark.xfail(reason="scene+history to next-task lookup is not learned within the default "
                          "training budget; see the decisions ledger", strict=False)
def test_planned_tasks_follow_scene_order(family_rates):
    assert family_rates[0] >= 0.6
