"""Encoder-decoder sequence model over mixed text/motion streams.

Text ids embed through a learned table; motion ids gather rows of the frozen
tokenizer codebook and pass through an adapter into the model width. Two
disjoint output heads score text (width N) and motion (width M); which head a
decoder position uses is fixed by the modality expected at that position.

Motion spans in decoder targets are preceded by their length written as
decimal digits, so the decoder knows how many motion positions follow before
the closing marker.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Section, load_checkpoint, load_state, state_tensors
from .vocab import (BOS, DIGITS, EOS, MOTION_CLOSE, MOTION_OPEN, PAD, TEXT_VOCAB_SIZE,
                    MixedStream, StreamError)


@dataclass
class LMConfig:
    d_model: int = 256
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    ffn: int = 512
    text_vocab: int = TEXT_VOCAB_SIZE
    motion_vocab: int = 512
    code_dim: int = 128
    max_len: int = 256
    dropout: float = 0.1
    adapter_layers: int = 1

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.text_vocab < 2 or self.motion_vocab < 2:
            raise ValueError("vocabularies need at least 2 entries")
        if self.adapter_layers not in (1, 2):
            raise ValueError("adapter_layers must be 1 or 2")


class LengthOverflowError(ValueError):
    pass


# --- decoder serialization -------------------------------------------------

def serialize_target(stream: MixedStream) -> tuple[list[int], list[bool]]:
    """Decoder target sequence: the stream with a length header before each motion span."""
    ids: list[int] = []
    mot: list[bool] = []
    i = 0
    while i < len(stream):
        tok, is_m = stream.ids[i], stream.motion[i]
        if not is_m and tok == MOTION_OPEN:
            j = i + 1
            while j < len(stream) and stream.motion[j]:
                j += 1
            header = [ord(ch) for ch in str(j - i - 1)]
            ids += header
            mot += [False] * len(header)
        ids.append(tok)
        mot.append(is_m)
        i += 1
    return ids, mot


# --- model -----------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.h, self.dh = heads, d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d, bias=False)  # a key bias only shifts each softmax row
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def project_kv(self, kv):
        B, Lk, _ = kv.shape
        k = self.k(kv).view(B, Lk, self.h, self.dh).transpose(1, 2)
        v = self.v(kv).view(B, Lk, self.h, self.dh).transpose(1, 2)
        return k, v

    def forward(self, x, kv, allowed):
        return self.attend(x, *self.project_kv(kv), allowed)

    def attend(self, x, k, v, allowed):
        B, Lq, D = x.shape
        q = self.q(x).view(B, Lq, self.h, self.dh).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.dh)
        att = att.masked_fill(~allowed[:, None], float("-inf")).softmax(-1)
        out = (self.drop(att) @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(cfg.d_model), nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.heads, cfg.dropout)
        self.ff = FeedForward(cfg.d_model, cfg.ffn, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, allowed):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, allowed))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.heads, cfg.dropout)
        self.cross_attn = Attention(d, cfg.heads, cfg.dropout)
        self.ff = FeedForward(d, cfg.ffn, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, self_allowed, memory, cross_allowed):
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, self_allowed))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory, cross_allowed))
        return x + self.drop(self.ff(self.ln3(x)))

    def step(self, x, cache: dict, cross_allowed):
        """One new position given cached keys/values of earlier positions (inference only)."""
        h = self.ln1(x)
        k, v = self.self_attn.project_kv(h)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        allowed = torch.ones(x.shape[0], 1, k.shape[2], dtype=torch.bool)
        x = x + self.self_attn.attend(h, k, v, allowed)
        x = x + self.cross_attn.attend(self.ln2(x), cache["ck"], cache["cv"], cross_allowed)
        return x + self.ff(self.ln3(x))


class Adapter(nn.Module):
    """Maps codebook rows (width d) into the model width D."""

    def __init__(self, d: int, D: int, layers: int = 1):
        super().__init__()
        if layers == 1:
            self.net = nn.Linear(d, D)
        else:
            self.net = nn.Sequential(nn.Linear(d, D), nn.GELU(), nn.Linear(D, D))

    def forward(self, z):
        return self.net(z)


class DualHeads(nn.Module):
    def __init__(self, D: int, N: int, M: int):
        super().__init__()
        self.text = nn.Linear(D, N)
        self.motion = nn.Linear(D, M)


@dataclass
class Batch:
    cond_ids: torch.Tensor      # (B, Lc)
    cond_motion: torch.Tensor   # (B, Lc) bool
    cond_mask: torch.Tensor     # (B, Lc) bool, True on real positions
    dec_ids: torch.Tensor       # (B, Lt) decoder inputs
    dec_motion: torch.Tensor
    tgt_ids: torch.Tensor       # (B, Lt) targets
    tgt_motion: torch.Tensor    # expected modality per position
    tgt_mask: torch.Tensor
    kinds: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.cond_ids.shape[0]


def collate(pairs: Sequence[tuple[MixedStream, MixedStream]], kinds: Sequence[str] | None = None) -> Batch:
    """Pad (condition, target) stream pairs into a teacher-forcing batch."""
    B = len(pairs)
    if B == 0:
        raise ValueError("empty batch")
    targets = [serialize_target(t) for _, t in pairs]
    Lc = max(len(c) for c, _ in pairs)
    Lt = max(1, max(len(t[0]) for t in targets))
    cond_ids = torch.full((B, Lc), PAD, dtype=torch.long)
    cond_mot = torch.zeros((B, Lc), dtype=torch.bool)
    cond_mask = torch.zeros((B, Lc), dtype=torch.bool)
    dec_ids = torch.full((B, Lt), PAD, dtype=torch.long)
    dec_mot = torch.zeros((B, Lt), dtype=torch.bool)
    tgt_ids = torch.full((B, Lt), PAD, dtype=torch.long)
    tgt_mot = torch.zeros((B, Lt), dtype=torch.bool)
    tgt_mask = torch.zeros((B, Lt), dtype=torch.bool)
    for b, ((cond, _), (tids, tmot)) in enumerate(zip(pairs, targets)):
        n = len(cond)
        cond_ids[b, :n] = torch.tensor(cond.ids, dtype=torch.long)
        cond_mot[b, :n] = torch.tensor(cond.motion, dtype=torch.bool)
        cond_mask[b, :n] = True
        m = len(tids)
        tgt_ids[b, :m] = torch.tensor(tids, dtype=torch.long)
        tgt_mot[b, :m] = torch.tensor(tmot, dtype=torch.bool)
        tgt_mask[b, :m] = True
        dec_ids[b, 0] = BOS
        dec_ids[b, 1:m] = tgt_ids[b, : m - 1]
        dec_mot[b, 1:m] = tgt_mot[b, : m - 1]
    return Batch(cond_ids, cond_mot, cond_mask, dec_ids, dec_mot, tgt_ids, tgt_mot, tgt_mask,
                 list(kinds) if kinds is not None else [])


@dataclass
class Logits:
    """Per-position logits from exactly one head; rows follow (batch, position) order."""

    text: torch.Tensor        # (n_text, N)
    motion: torch.Tensor      # (n_motion, M)
    text_pos: torch.Tensor    # (n_text, 2) of (b, t)
    motion_pos: torch.Tensor  # (n_motion, 2)

    def at(self, b: int, t: int) -> torch.Tensor:
        for logits, pos in ((self.text, self.text_pos), (self.motion, self.motion_pos)):
            hit = ((pos[:, 0] == b) & (pos[:, 1] == t)).nonzero()
            if len(hit):
                return logits[hit[0, 0]]
        raise KeyError((b, t))


class MotionLM(nn.Module):
    def __init__(self, cfg: LMConfig, codebook: torch.Tensor | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.d_model
        self.text_embed = nn.Embedding(cfg.text_vocab, D)
        self.adapter = Adapter(cfg.code_dim, D, cfg.adapter_layers)
        if codebook is None:
            codebook = torch.randn(cfg.motion_vocab, cfg.code_dim)
        if tuple(codebook.shape) != (cfg.motion_vocab, cfg.code_dim):
            raise ValueError(f"codebook shape {tuple(codebook.shape)} does not match config")
        self.register_buffer("codebook", codebook.detach().clone().to(torch.get_default_dtype()))
        self.pos_enc = nn.Embedding(cfg.max_len, D)
        self.pos_dec = nn.Embedding(cfg.max_len, D)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.ln_enc = nn.LayerNorm(D)
        self.ln_dec = nn.LayerNorm(D)
        self.heads = DualHeads(D, cfg.text_vocab, cfg.motion_vocab)
        self.drop = nn.Dropout(cfg.dropout)
        self.apply(self._init)

    @staticmethod
    def _init(m: nn.Module) -> None:
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)

    # -- embedding
    def embed_stream(self, ids: torch.Tensor, is_motion: torch.Tensor) -> torch.Tensor:
        N, M = self.cfg.text_vocab, self.cfg.motion_vocab
        t_ids, m_ids = ids[~is_motion], ids[is_motion]
        if len(t_ids) and (t_ids.min() < 0 or t_ids.max() >= N):
            raise StreamError("text id out of range")
        if len(m_ids) and (m_ids.min() < 0 or m_ids.max() >= M):
            raise StreamError("motion id out of range")
        x = self.text_embed(torch.where(is_motion, torch.zeros_like(ids), ids))
        if len(m_ids):
            # adapt the whole table then gather, so a row's value never depends
            # on which other motion ids share the batch
            table = self.adapter(self.codebook)
            x = torch.where(is_motion[..., None], table[torch.where(is_motion, ids, 0)], x)
        return x

    def embed_single(self, stream: MixedStream) -> torch.Tensor:
        stream.validate(self.cfg.text_vocab, self.cfg.motion_vocab)
        ids = torch.tensor([stream.ids], dtype=torch.long)
        mot = torch.tensor([stream.motion], dtype=torch.bool)
        return self.embed_stream(ids, mot)[0]

    # -- encoder / decoder
    def encode(self, ids, is_motion, mask):
        L = ids.shape[1]
        if L > self.cfg.max_len:
            raise LengthOverflowError(f"condition length {L} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(L)
        x = self.drop(self.embed_stream(ids, is_motion) + self.pos_enc(pos)[None])
        allowed = mask[:, None, :].expand(-1, L, -1)
        for layer in self.encoder:
            x = layer(x, allowed)
        return self.ln_enc(x)

    def decode_hidden(self, memory, mem_mask, ids, is_motion, mask):
        L = ids.shape[1]
        if L > self.cfg.max_len:
            raise LengthOverflowError(f"target length {L} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(L)
        x = self.drop(self.embed_stream(ids, is_motion) + self.pos_dec(pos)[None])
        causal = torch.ones(L, L, dtype=torch.bool).tril()
        self_allowed = causal[None] & mask[:, None, :]
        cross_allowed = mem_mask[:, None, :].expand(-1, L, -1)
        for layer in self.decoder:
            x = layer(x, self_allowed, memory, cross_allowed)
        return self.ln_dec(x)

    def forward(self, batch: Batch) -> Logits:
        memory = self.encode(batch.cond_ids, batch.cond_motion, batch.cond_mask)
        h = self.decode_hidden(memory, batch.cond_mask, batch.dec_ids, batch.dec_motion,
                               batch.tgt_mask | _first(batch.tgt_mask))
        text_sel = batch.tgt_mask & ~batch.tgt_motion
        motion_sel = batch.tgt_mask & batch.tgt_motion
        # heads run over every position before selection for the same reason
        return Logits(self.heads.text(h)[text_sel], self.heads.motion(h)[motion_sel],
                      text_sel.nonzero(), motion_sel.nonzero())

    def token_losses(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, Logits]:
        """Per-position cross-entropies for text and motion targets."""
        logits = self(batch)
        t_tgt = batch.tgt_ids[batch.tgt_mask & ~batch.tgt_motion]
        m_tgt = batch.tgt_ids[batch.tgt_mask & batch.tgt_motion]
        ce_t = F.cross_entropy(logits.text, t_tgt, reduction="none")
        ce_m = F.cross_entropy(logits.motion, m_tgt, reduction="none")
        return ce_t, ce_m, logits

    def loss(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """(L_t, L_m): mean cross-entropy over text and over motion target positions.

        A modality absent from the batch contributes a zero loss.
        """
        ce_t, ce_m, _ = self.token_losses(batch)
        if len(ce_t) == 0 and len(ce_m) == 0:
            raise ValueError("batch has no unmasked target positions")
        zero = self.text_embed.weight.sum() * 0.0
        L_t = ce_t.mean() if len(ce_t) else zero
        L_m = ce_m.mean() if len(ce_m) else zero
        return L_t, L_m

    # -- generation
    @torch.no_grad()
    def generate(self, conditions: Sequence[MixedStream], plan: "Plan",
                 sampler: "Sampler | None" = None, seed: int = 0) -> list["Generated"]:
        sampler = sampler or Sampler()
        gen = torch.Generator().manual_seed(int(seed))
        for c in conditions:
            c.validate(self.cfg.text_vocab, self.cfg.motion_vocab)
        batch = collate([(c, MixedStream()) for c in conditions])
        memory = self.encode(batch.cond_ids, batch.cond_motion, batch.cond_mask)
        cross_allowed = batch.cond_mask[:, None, :]
        caches = []
        for layer in self.decoder:
            ck, cv = layer.cross_attn.project_kv(memory)
            caches.append({"ck": ck, "cv": cv})
        states = [_RowState(plan) for _ in conditions]
        rows = torch.arange(len(conditions))
        last_ids = torch.full((len(conditions),), BOS, dtype=torch.long)
        last_mot = torch.zeros(len(conditions), dtype=torch.bool)
        t = 0
        while len(rows):
            if t >= self.cfg.max_len:
                for r in rows.tolist():
                    states[r].truncated = True
                    states[r].done = True
                break
            x = self.embed_stream(last_ids[:, None], last_mot[:, None]) + self.pos_dec.weight[t]
            for layer, cache in zip(self.decoder, caches):
                x = layer.step(x, cache, cross_allowed)
            h = self.ln_dec(x)[:, 0]
            active = [states[r] for r in rows.tolist()]
            text_rows = [i for i, st in enumerate(active) if not st.expects_motion]
            motion_rows = [i for i, st in enumerate(active) if st.expects_motion]
            picks: dict[int, int] = {}
            if text_rows:
                logits = self.heads.text(h[text_rows])
                for j, i in enumerate(text_rows):
                    allowed = active[i].allowed_text()
                    if allowed is not None:
                        masked = torch.full_like(logits[j], float("-inf"))
                        masked[allowed] = logits[j][allowed]
                        logits[j] = masked
                    else:  # text runs never contain these
                        logits[j, list(_NOT_IN_TEXT)] = float("-inf")
                for i, tok in zip(text_rows, sampler.sample(logits, gen)):
                    picks[i] = tok
            if motion_rows:
                logits = self.heads.motion(h[motion_rows])
                for i, tok in zip(motion_rows, sampler.sample(logits, gen)):
                    picks[i] = tok
            new_ids, new_mot = [], []
            for i, st in enumerate(active):
                was_motion = st.expects_motion
                st.push(picks[i])
                new_ids.append(picks[i])
                new_mot.append(was_motion)
            keep = torch.tensor([not st.done for st in active], dtype=torch.bool)
            rows = rows[keep]
            last_ids = torch.tensor(new_ids, dtype=torch.long)[keep]
            last_mot = torch.tensor(new_mot, dtype=torch.bool)[keep]
            cross_allowed = cross_allowed[keep]
            for cache in caches:
                for key in cache:
                    cache[key] = cache[key][keep]
            t += 1
        return [s.result() for s in states]


def _first(mask: torch.Tensor) -> torch.Tensor:
    out = torch.zeros_like(mask)
    out[:, 0] = True
    return out


# --- plans and samplers ----------------------------------------------------

@dataclass
class Plan:
    """What to emit: a text run ending in eos, or one motion span."""

    modality: str  # "text" | "motion"
    max_len: int
    exact: bool = False  # motion only: spell max_len as the header instead of letting the model choose

    def __post_init__(self) -> None:
        if self.modality not in ("text", "motion"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.exact and self.modality != "motion":
            raise ValueError("exact length applies to motion plans only")


@dataclass
class Sampler:
    mode: str = "greedy"  # "greedy" | "topk"
    k: int = 10
    temperature: float = 1.0

    def sample(self, logits: torch.Tensor, gen: torch.Generator) -> list[int]:
        if self.mode == "greedy":
            return logits.argmax(-1).tolist()
        if self.mode != "topk":
            raise ValueError(f"unknown sampler {self.mode!r}")
        logits = logits / max(self.temperature, 1e-6)
        k = min(self.k, logits.shape[-1])
        vals, idx = logits.topk(k, dim=-1)
        probs = vals.softmax(-1)
        # rows whose finite entries are fewer than k keep zero mass on -inf slots
        choice = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
        return idx.gather(-1, choice[:, None]).squeeze(-1).tolist()


@dataclass
class Generated:
    stream: MixedStream
    truncated: bool
    raw_ids: list[int]


_NOT_IN_TEXT = (PAD, BOS, MOTION_OPEN, MOTION_CLOSE)


class _RowState:
    def __init__(self, plan: Plan):
        self.plan = plan
        self.ids: list[int] = []
        self.motion: list[bool] = []
        self.done = False
        self.truncated = False
        self.phase = "text" if plan.modality == "text" else "header"
        self.digits: list[int] = []
        self.remaining = 0

    @property
    def expects_motion(self) -> bool:
        return self.phase == "motion"

    def allowed_text(self) -> list[int] | None:
        """Header positions may only spell a positive count of up to three digits, then motion-open.

        The count is not capped here: pruning digits would turn a wanted 13 into a 1. Counts above
        ``max_len`` are clamped when the span opens.
        """
        if self.phase != "header":
            return None
        if self.plan.exact:
            want = str(self.plan.max_len)
            n = len(self.digits)
            return [ord(want[n])] if n < len(want) else [MOTION_OPEN]
        out = [d for d in DIGITS if self.digits or d != DIGITS[0]] if len(self.digits) < 3 else []
        if self.digits:
            out.append(MOTION_OPEN)
        return out

    def push(self, tok: int) -> None:
        self.ids.append(tok)
        self.motion.append(self.phase == "motion")
        if self.phase == "text":
            n_text = len(self.ids)
            if tok == EOS:
                self.done = True
            elif n_text >= self.plan.max_len:
                self.truncated = True
                self.done = True
        elif self.phase == "header":
            if tok == MOTION_OPEN:
                k = int("".join(chr(d) for d in self.digits))
                if k > self.plan.max_len:
                    k = self.plan.max_len
                    self.truncated = True
                self.remaining = k
                self.phase = "motion"
            else:
                self.digits.append(tok)
        else:
            self.remaining -= 1
            if self.remaining == 0:
                self.ids.append(MOTION_CLOSE)
                self.motion.append(False)
                self.done = True

    def result(self) -> Generated:
        raw = list(self.ids)
        ids, mot = list(self.ids), list(self.motion)
        if self.plan.modality == "motion":
            if MOTION_OPEN in ids:
                start = ids.index(MOTION_OPEN)
                ids, mot = ids[start:], mot[start:]
                if not (ids and ids[-1] == MOTION_CLOSE and not mot[-1]):
                    ids.append(MOTION_CLOSE)
                    mot.append(False)
            else:
                ids, mot = [MOTION_OPEN, MOTION_CLOSE], [False, False]
        return Generated(MixedStream(tuple(ids), tuple(mot)), self.truncated, raw)


# --- checkpoints -----------------------------------------------------------

def lm_section(model: MotionLM, extra: dict | None = None) -> Section:
    return Section(asdict(model.cfg), state_tensors(model), extra or {})


def load_lm(path_or_sections) -> MotionLM:
    secs = path_or_sections if isinstance(path_or_sections, dict) else load_checkpoint(path_or_sections)
    sec = secs["lm"]
    model = MotionLM(LMConfig(**sec.config), torch.from_numpy(np.array(sec.tensors["codebook"])))
    load_state(model, sec.tensors)
    model.eval()
    return model
