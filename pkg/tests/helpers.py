from __future__ import annotations

import torch

from motionlm.lm import LMConfig, MotionLM
from motionlm.pipeline import Pipeline
from motionlm.tokenizer import VQConfig, VQVAE


def tiny_pipeline(seed: int = 0) -> Pipeline:
    """Untrained tokenizer and sequence model small enough for unit tests."""
    torch.manual_seed(seed)
    tok = VQVAE(VQConfig(codebook_size=16, code_dim=8, width=16, depth=1)).eval()
    lm = MotionLM(LMConfig(d_model=32, enc_layers=1, dec_layers=1, heads=2, ffn=64, motion_vocab=16, code_dim=8,
                           max_len=256, dropout=0.0), tok.codebook.embeddings.detach())
    return Pipeline(lm, tok, mean_segment_tokens=12.0)
