"""Finite-difference gradient audits of the tokenizer loss and the sequence model on tiny nets."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .lm import LMConfig, MotionLM, collate
from .numerics import GradCheckReport, float64_mode, grad_check
from .tokenizer import VQConfig, VQVAE, vq_loss
from .vocab import MixedStream, TAGS


@dataclass
class StopGradientAudit:
    embed_term_encoder_grad: float  # max |d embed / d encoder|, must be exactly 0
    commit_term_codebook_grad: float  # max |d commit / d codebook|, must be exactly 0

    @property
    def ok(self) -> bool:
        return self.embed_term_encoder_grad == 0.0 and self.commit_term_codebook_grad == 0.0


def tiny_vq(seed: int = 0) -> tuple[VQVAE, torch.Tensor]:
    torch.manual_seed(seed)
    cfg = VQConfig(codebook_size=8, code_dim=4, downsample=2, width=6, depth=1, channels=3)
    model = VQVAE(cfg)
    x = torch.randn(2, 8, 3)
    with torch.no_grad():  # spread codes over the latent range so several are selected
        z = model.encode_normalized(x).reshape(-1, 4)
        model.codebook.embeddings.copy_(z[torch.randperm(len(z))[:8]] + 0.05 * torch.randn(8, 4))
    return model, x


def vq_gradcheck(seed: int = 0, tol: float = 1e-5) -> tuple[GradCheckReport, StopGradientAudit]:
    with float64_mode():
        model, x = tiny_vq(seed)
        params = dict(model.named_parameters())
        report = grad_check(lambda: model.loss(x)[0], params, tol=tol)

        z = model.encode_normalized(x)
        ids, z_q = model.quantize(z)
        x_rec = model.decode(z_q)
        enc = [p for n, p in model.named_parameters() if n.startswith("encoder.")]
        embed_only = vq_loss(x_rec.detach(), x_rec.detach(), z, z_q, 1.0, 0.0)
        g_enc = torch.autograd.grad(embed_only, enc, allow_unused=True)
        commit_only = vq_loss(x_rec.detach(), x_rec.detach(), z, z_q, 0.0, 1.0)
        (g_cb,) = torch.autograd.grad(commit_only, [model.codebook.embeddings], allow_unused=True)
    audit = StopGradientAudit(
        max((0.0 if g is None else float(g.abs().max()) for g in g_enc), default=0.0),
        0.0 if g_cb is None else float(g_cb.abs().max()),
    )
    return report, audit


def tiny_lm(seed: int = 0) -> tuple[MotionLM, object]:
    torch.manual_seed(seed)
    cfg = LMConfig(d_model=16, enc_layers=2, dec_layers=2, heads=2, ffn=32, motion_vocab=8, code_dim=4,
                   max_len=64, dropout=0.0)
    model = MotionLM(cfg, torch.randn(8, 4))
    for p in model.parameters():  # larger weights so every path carries a visible gradient
        torch.nn.init.normal_(p, 0.0, 0.3)
    pairs = [
        (MixedStream.tokens([TAGS["MU"]]) + MixedStream.motion_span([1, 5, 2]), MixedStream.text("ab")),
        (MixedStream.tokens([TAGS["MG"]]) + MixedStream.text("wave"), MixedStream.motion_span([3, 0, 7, 7])),
    ]
    return model, collate(pairs)


def lm_gradcheck(seed: int = 0, tol: float = 1e-5, max_entries: int | None = 64) -> GradCheckReport:
    with float64_mode():
        model, batch = tiny_lm(seed)

        def loss():
            L_t, L_m = model.loss(batch)
            return L_t + L_m

        return grad_check(loss, dict(model.named_parameters()), eps=1e-3, tol=tol,
                          max_entries=max_entries, seed=seed, stencil=4)
