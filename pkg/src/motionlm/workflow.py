"""End-to-end steps shared by the CLI and the test fixtures."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .corpus import Corpus, Split, split_corpus
from .lm import LMConfig, MotionLM, load_lm
from .pipeline import Pipeline
from .tasks import all_instances, make_training_set, write_manifest
from .tokenizer import (VQConfig, VQTrainConfig, VQVAE, checkpoint_sections, evaluate_reconstruction,
                        load_tokenizer, train_vqvae)
from .trainer import TrainConfig, TrainReport, train
from .vocab import TASK_KINDS

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.8, 0.1, 0.1)


def corpus_split(corpus: Corpus, seed: int = 0) -> Split:
    return split_corpus(corpus, SPLIT_RATIOS, seed)


def train_tokenizer(corpus: Corpus, split: Split, vq: VQConfig, vq_train: VQTrainConfig,
                    out_path: str | Path) -> tuple[VQVAE, dict]:
    motions = [corpus.motions[m] for m in split.train]
    result = train_vqvae(motions, vq, vq_train, out_path)
    held_out = evaluate_reconstruction(result.model, [corpus.motions[m] for m in split.test])
    return load_tokenizer(out_path), held_out


@torch.no_grad()
def tokenize_corpus(tokenizer: VQVAE, corpus: Corpus) -> dict[str, list[int]]:
    return {mid: tokenizer.tokenize(m).ids for mid, m in corpus.motions.items()}


def validation_sets(corpus: Corpus, tokens: dict, per_task: int = 32) -> dict:
    out = {}
    for kind in TASK_KINDS:
        insts = all_instances(corpus, tokens, kind)
        if len(insts) > per_task:
            idx = np.linspace(0, len(insts) - 1, per_task).round().astype(int)
            insts = [insts[i] for i in idx]
        out[kind] = insts
    return out


def train_language_model(corpus: Corpus, split: Split, tokenizer: VQVAE, lm_cfg: LMConfig,
                         train_cfg: TrainConfig, out_dir: str | Path, seed: int = 0) -> tuple[MotionLM, TrainReport]:
    """Joint training on every task kind; the final checkpoint holds tokenizer and model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokens = tokenize_corpus(tokenizer, corpus)
    train_c = corpus.subset(split.train)
    val_c = corpus.subset(split.val)
    torch.manual_seed(seed)
    model = MotionLM(lm_cfg, tokenizer.codebook.embeddings.detach())
    cfg = TrainConfig(**{**asdict(train_cfg), "checkpoint_dir": str(out_dir)})
    stream = make_training_set(train_c, tokens, cfg.weights, cfg.seed)
    seg_tokens = float(np.mean([len(tokens[m]) for m in split.train]))
    tok_secs = checkpoint_sections(tokenizer, {"mean_segment_tokens": seg_tokens})
    report = train(model, stream, cfg, validation_sets(val_c, tokens), tok_secs)
    (out_dir / "train_report.json").write_text(report.to_json() + "\n")
    report.write_csv(out_dir / "train_loss.csv")
    write_manifest(list(make_training_set(train_c, tokens, cfg.weights, cfg.seed, count=cfg.batch_size * 8)),
                   out_dir / "manifest_head.jsonl", {"seed": cfg.seed, "note": "first pool of the sampled stream"})
    return model, report


def load_pipeline(checkpoint: str | Path, fps: int = 20) -> Pipeline:
    secs = load_checkpoint(checkpoint)
    tok = load_tokenizer(secs)
    lm = load_lm(secs)
    seg = secs["tokenizer"].extra.get("mean_segment_tokens", 26.0)
    return Pipeline(lm, tok, seg, fps)
