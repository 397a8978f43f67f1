"""VQ-VAE motion tokenizer: temporal conv encoder, nearest-code quantizer and decoder."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Section, load_checkpoint, load_state, save_checkpoint, state_tensors
from .corpus import MotionSequence
from .numerics import Adam, stop_gradient, straight_through

log = logging.getLogger(__name__)


@dataclass
class VQConfig:
    codebook_size: int = 512
    code_dim: int = 128
    downsample: int = 4
    width: int = 128
    depth: int = 2
    channels: int = 16
    beta_embed: float = 1.0
    beta_commit: float = 0.02
    reset_interval: int = 256

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        r = self.downsample
        if r < 1 or r & (r - 1):
            raise ValueError("downsample must be a power of two >= 1")
        if self.beta_embed < 0 or self.beta_commit < 0:
            raise ValueError("beta weights must be >= 0")
        if min(self.code_dim, self.width, self.channels) < 1 or self.depth < 0:
            raise ValueError("dimensions must be positive")


@dataclass
class TokenSequence:
    ids: list[int]
    modality: str
    vocab_size: int

    def __post_init__(self) -> None:
        if self.modality not in ("text", "motion"):
            raise ValueError(f"unknown modality {self.modality!r}")
        bad = [i for i in self.ids if not 0 <= i < self.vocab_size]
        if bad:
            raise ValueError(f"ids out of range [0, {self.vocab_size}): {bad[:5]}")

    def __len__(self) -> int:
        return len(self.ids)


class SequenceTooShortError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: dict[str, Section] | None):
        super().__init__(f"VQ-VAE loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


class ResUnit(nn.Module):
    def __init__(self, width: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        w = cfg.width
        layers: list[nn.Module] = [nn.Conv1d(cfg.channels, w, 3, padding=1), nn.ReLU()]
        for _ in range(int(math.log2(cfg.downsample))):
            layers.append(nn.Conv1d(w, w, 4, stride=2, padding=1))
            layers.extend(ResUnit(w, 3 ** i) for i in range(cfg.depth))
        layers.append(nn.ReLU())
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv1d(w, cfg.code_dim, 3, padding=1)

    def forward(self, x):  # (B, c, T) -> (B, d, T/r)
        return self.out(self.body(x))


class Decoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        w = cfg.width
        layers: list[nn.Module] = [nn.Conv1d(cfg.code_dim, w, 3, padding=1)]
        for _ in range(int(math.log2(cfg.downsample))):
            layers.extend(ResUnit(w, 3 ** i) for i in reversed(range(cfg.depth)))
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv1d(w, w, 3, padding=1))
        layers.append(nn.ReLU())
        layers.append(nn.Conv1d(w, cfg.channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z)


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        self.embeddings = nn.Parameter(torch.randn(size, dim) / math.sqrt(dim))
        # steps since each code was last selected
        self.register_buffer("usage", torch.zeros(size, dtype=torch.long))

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def nearest_codes(latent: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """Exact nearest code by squared Euclidean distance, ties to the lowest index.

    Distances are screened with the expanded form in float64; any row whose
    best candidates lie within rounding distance of each other is re-ranked
    with directly computed differences.
    """
    f = latent.detach().reshape(-1, latent.shape[-1]).double()
    e = embeddings.detach().double()
    if f.shape[0] == 0:
        raise ValueError("empty latent")
    ee = (e * e).sum(1)
    ff = (f * f).sum(1, keepdim=True)
    dist = ff - 2.0 * f @ e.T + ee[None, :]
    best = dist.min(1, keepdim=True).values
    margin = 1e-9 * (ff + ee.max())
    cand = dist <= best + margin
    ids = cand.to(torch.int8).argmax(1)
    for i in torch.nonzero(cand.sum(1) > 1).flatten().tolist():
        cols = torch.nonzero(cand[i]).flatten()
        exact = ((f[i][None, :] - e[cols]) ** 2).sum(1)
        ids[i] = cols[torch.argmin(exact)]
    return ids.reshape(latent.shape[:-1])


def vq_loss(x, x_rec, z, z_q, beta_embed: float, beta_commit: float) -> torch.Tensor:
    """Reconstruction + embedding + commitment, each a mean squared error.

    The embedding term only reaches the codebook and the commitment term only
    reaches the encoder.
    """
    for name, t in (("x", x), ("x_rec", x_rec), ("z", z), ("z_q", z_q)):
        if not torch.isfinite(t.detach()).all():
            raise ValueError(f"non-finite values in {name}")
    rec = F.mse_loss(x_rec, x)
    embed = F.mse_loss(stop_gradient(z), z_q)
    commit = F.mse_loss(z, stop_gradient(z_q))
    return rec + beta_embed * embed + beta_commit * commit


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim)
        self.decoder = Decoder(cfg)
        self.register_buffer("mean", torch.zeros(cfg.channels))
        self.register_buffer("std", torch.ones(cfg.channels))

    # normalized (B, T, c) <-> model space
    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean

    def encode_normalized(self, xn: torch.Tensor) -> torch.Tensor:
        """(B, T, c) normalized frames -> (B, T // r, d) latent."""
        r = self.cfg.downsample
        T = xn.shape[1]
        if T < r:
            raise SequenceTooShortError(f"sequence of {T} frames is shorter than r={r}")
        xn = xn[:, : (T // r) * r]
        return self.encoder(xn.transpose(1, 2)).transpose(1, 2)

    def encode(self, x: MotionSequence | torch.Tensor) -> torch.Tensor:
        if isinstance(x, MotionSequence):
            x = torch.from_numpy(x.data)[None]
        x = x.to(self.mean.dtype)
        return self.encode_normalized(self.normalize(x))

    def quantize(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if latent.numel() == 0:
            raise ValueError("empty latent")
        ids = stop_gradient(nearest_codes(latent, self.codebook.embeddings))
        return ids, self.codebook.embeddings[ids]

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        """(B, T^q, d) -> (B, T^q * r, c) normalized frames."""
        return self.decoder(z_q.transpose(1, 2)).transpose(1, 2)

    def forward(self, xn: torch.Tensor):
        z = self.encode_normalized(xn)
        ids, z_q = self.quantize(z)
        x_rec = self.decode(straight_through(z, z_q))
        return x_rec, z, z_q, ids

    def loss(self, xn: torch.Tensor):
        x_rec, z, z_q, ids = self(xn)
        T = x_rec.shape[1]
        return vq_loss(xn[:, :T], x_rec, z, z_q, self.cfg.beta_embed, self.cfg.beta_commit), ids, z

    # token-level helpers on frozen checkpoints
    @torch.no_grad()
    def tokenize(self, motion: MotionSequence) -> TokenSequence:
        ids, _ = self.quantize(self.encode(motion))
        return TokenSequence(ids[0].tolist(), "motion", self.cfg.codebook_size)

    @torch.no_grad()
    def detokenize(self, ids: Sequence[int], id: str = "", fps: int = 20) -> MotionSequence:
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("cannot decode an empty token sequence")
        x = self.denormalize(self.decode(self.codebook.embeddings[idx][None]))[0]
        return MotionSequence(id, x.float().numpy(), fps)


def perplexity(counts: np.ndarray) -> float:
    p = counts / max(counts.sum(), 1)
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def channel_stats(motions: Sequence[MotionSequence]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate([m.data for m in motions], 0).astype(np.float64)
    std = allf.std(0)
    return allf.mean(0).astype(np.float32), np.where(std > 1e-6, std, 1.0).astype(np.float32)


@dataclass
class VQTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    window: int = 48
    lr: float = 1e-3
    codebook_lr_scale: float = 10.0
    final_lr_frac: float = 1.0
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500


@dataclass
class VQTrainResult:
    model: VQVAE
    losses: list[float]
    usage_histogram: list[int]
    resets: int
    checkpoint: Path | None = None


def _crop_batch(motions, rng: np.random.Generator, batch: int, window: int) -> np.ndarray:
    out = np.empty((batch, window, motions[0].channels), np.float32)
    for b in range(batch):
        m = motions[int(rng.integers(len(motions)))]
        s = int(rng.integers(m.frames - window + 1))
        out[b] = m.data[s:s + window]
    return out


def train_vqvae(motions: Sequence[MotionSequence], cfg: VQConfig, train: VQTrainConfig,
                out_path: str | Path | None = None) -> VQTrainResult:
    """Train the tokenizer on random fixed-length crops; deterministic given ``train.seed``."""
    if not motions:
        raise ValueError("no motions to train on")
    r = cfg.downsample
    window = max(r, (train.window // r) * r)
    pool = [m for m in motions if m.frames >= window]
    if not pool:
        raise ValueError(f"no motion has at least {window} frames")
    torch.manual_seed(train.seed)
    rng = np.random.default_rng(train.seed)
    model = VQVAE(copy.deepcopy(cfg))
    mean, std = channel_stats(motions)
    model.mean.copy_(torch.from_numpy(mean))
    model.std.copy_(torch.from_numpy(std))
    # the codebook moves faster than the encoder, otherwise z outruns its codes
    opt = Adam(model.named_parameters(), lr=train.lr, clip_norm=train.clip_norm,
               lr_scale=lambda n: train.codebook_lr_scale if n.startswith("codebook.") else 1.0)

    losses: list[float] = []
    hist = np.zeros(cfg.codebook_size, np.int64)
    resets = 0
    last_good = None
    M = cfg.codebook_size
    for step in range(train.steps):
        cos = 0.5 * (1 + math.cos(math.pi * step / train.steps))
        opt.lr = train.lr * (train.final_lr_frac + (1 - train.final_lr_frac) * cos)
        xn = model.normalize(torch.from_numpy(_crop_batch(pool, rng, train.batch_size, window)))
        if step == 0:
            with torch.no_grad():
                z0 = model.encode_normalized(xn).reshape(-1, cfg.code_dim)
                pick = torch.randint(len(z0), (M,))
                model.codebook.embeddings.copy_(z0[pick] + 0.01 * torch.randn(M, cfg.code_dim) * z0.std())
        loss, ids, z = model.loss(xn)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

        with torch.no_grad():
            used = torch.zeros(M, dtype=torch.bool)
            used[ids.flatten()] = True
            usage = model.codebook.usage
            usage += 1
            usage[used] = 0
            np.add.at(hist, ids.flatten().numpy(), 1)
            dead = torch.nonzero(usage >= cfg.reset_interval).flatten()
            if len(dead):
                flat = z.detach().reshape(-1, cfg.code_dim)
                pick = torch.randint(len(flat), (len(dead),))
                model.codebook.embeddings[dead] = flat[pick]
                usage[dead] = 0
                resets += len(dead)
        if (step + 1) % train.checkpoint_every == 0 or step + 1 == train.steps:
            last_good = checkpoint_sections(model, {"step": step + 1})
            log.info("vq step %d loss %.4f resets %d", step + 1, losses[-1], resets)

    model.eval()
    result = VQTrainResult(model, losses, hist.tolist(), resets)
    if out_path is not None:
        extra = {"losses": losses, "usage_histogram": hist.tolist(), "resets": resets,
                 "train": asdict(train)}
        result.checkpoint = save_checkpoint(out_path, checkpoint_sections(model, extra))
    return result


def checkpoint_sections(model: VQVAE, extra: dict | None = None) -> dict[str, Section]:
    return {"tokenizer": Section(asdict(model.cfg), state_tensors(model), extra or {})}


def load_tokenizer(path_or_sections) -> VQVAE:
    secs = path_or_sections if isinstance(path_or_sections, dict) else load_checkpoint(path_or_sections)
    sec = secs["tokenizer"]
    model = VQVAE(VQConfig(**sec.config))
    load_state(model, sec.tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def evaluate_reconstruction(model: VQVAE, motions: Sequence[MotionSequence]) -> dict:
    """Mean squared error in normalized units plus code-usage perplexity."""
    se, n = 0.0, 0
    counts = np.zeros(model.cfg.codebook_size, np.int64)
    for m in motions:
        xn = model.normalize(torch.from_numpy(m.data)[None])
        x_rec, _, _, ids = model(xn)
        T = x_rec.shape[1]
        se += float(((x_rec - xn[:, :T]) ** 2).sum())
        n += x_rec.numel()
        np.add.at(counts, ids.flatten().numpy(), 1)
    return {"mse": se / n, "perplexity": perplexity(counts), "codes_used": int((counts > 0).sum())}
