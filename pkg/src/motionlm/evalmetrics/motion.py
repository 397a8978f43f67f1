"""Distribution metrics over motion features: FID, diversity, multimodality."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..corpus import MotionSequence


class InsufficientSamplesError(ValueError):
    pass


class FeatureExtractor:
    """Time-pooled pre-quantization encoder outputs of a frozen tokenizer."""

    def __init__(self, tokenizer, pooling: str = "mean"):
        if pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.tokenizer = tokenizer
        self.pooling = pooling

    @torch.no_grad()
    def __call__(self, motions: Sequence[MotionSequence]) -> np.ndarray:
        out = []
        for m in motions:
            z = self.tokenizer.encode(m)[0]  # (T/r, d)
            out.append((z.mean(0) if self.pooling == "mean" else z.max(0).values).double().numpy())
        return np.stack(out) if out else np.zeros((0, self.tokenizer.cfg.code_dim))


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The cross term uses Tr((A^1/2 B A^1/2)^1/2), which equals Tr((AB)^1/2) but only
    needs symmetric eigendecompositions; negative eigenvalues are clamped to 0.
    """
    a, b = np.asarray(features_a, float), np.asarray(features_b, float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with equal width")
    d = a.shape[1]
    if min(len(a), len(b)) < d + 1:
        raise InsufficientSamplesError(f"need at least {d + 1} samples per set, got {len(a)} and {len(b)}")
    mu = a.mean(0) - b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ca, cb = np.atleast_2d(ca), np.atleast_2d(cb)
    sa = _sqrt_psd(ca)
    w = np.linalg.eigvalsh(sa @ cb @ sa)
    cross = np.sqrt(np.clip(w, 0, None)).sum()
    return float(max(0.0, mu @ mu + np.trace(ca) + np.trace(cb) - 2 * cross))


def diversity(features: np.ndarray, pairs: int = 300, seed: int = 0) -> float:
    """Mean distance over disjoint random pairs (at most n // 2 of them)."""
    x = np.asarray(features, float)
    n = len(x)
    if n < 2:
        raise InsufficientSamplesError("diversity needs at least 2 samples")
    k = min(pairs, n // 2)
    perm = np.random.default_rng(seed).permutation(n)
    i, j = perm[0:2 * k:2], perm[1:2 * k:2]
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


def multimodality(groups: Sequence[np.ndarray], pairs: int = 10, seed: int = 0) -> float:
    """Within-condition diversity averaged over conditions."""
    if not groups:
        raise InsufficientSamplesError("multimodality needs at least one condition")
    return float(np.mean([diversity(g, pairs, seed + i) for i, g in enumerate(groups)]))
