"""Caption metrics: BLEU, ROUGE-L, CIDEr-D and an embedding-cosine similarity."""
from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

_WORD = re.compile(r"[a-z0-9']+")


def words(s: str) -> list[str]:
    return _WORD.findall(s.lower())


def _toks(s) -> list[str]:
    return words(s) if isinstance(s, str) else list(s)


def ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


# --- BLEU ------------------------------------------------------------------

def bleu(candidate, references, n: int = 4) -> float:
    """Sentence BLEU: clipped n-gram precisions, uniform geometric mean, closest-length brevity penalty.

    Any zero precision gives 0 (no smoothing). An empty candidate scores 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("need at least one reference")
    cand = _toks(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        c = ngrams(cand, k)
        total = sum(c.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for r in refs:
            for g, cnt in ngrams(r, k).items():
                max_ref[g] = max(max_ref[g], cnt)
        clipped = sum(min(cnt, max_ref[g]) for g, cnt in c.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / n
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


# --- ROUGE-L ---------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS-based F-measure; 0 when either side is empty or nothing is shared."""
    c, r = _toks(candidate), _toks(reference)
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


# --- CIDEr-D ---------------------------------------------------------------

@dataclass
class CorpusStats:
    """Document frequencies over reference sets; one set per evaluated item."""

    doc_freq: Counter
    ref_len: float  # log of the number of reference sets
    n: int = 4

    @classmethod
    def from_references(cls, reference_sets: Sequence[Sequence], n: int = 4) -> "CorpusStats":
        if not reference_sets:
            raise ValueError("CIDEr needs at least one reference set")
        df: Counter = Counter()
        for refs in reference_sets:
            seen = set()
            for r in refs:
                t = _toks(r)
                for k in range(1, n + 1):
                    seen.update(ngrams(t, k))
            df.update(seen)
        return cls(df, math.log(len(reference_sets)), n)


def _tfidf(toks: list[str], stats: CorpusStats):
    vecs, norms = [], []
    for k in range(1, stats.n + 1):
        v = {g: tf * (stats.ref_len - math.log(max(1.0, stats.doc_freq[g])))
             for g, tf in ngrams(toks, k).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider(candidate, references, stats: CorpusStats, sigma: float = 6.0) -> float:
    """CIDEr-D: clipped tf-idf cosine per order with a Gaussian length penalty, averaged, times 10."""
    if stats is None or not stats.doc_freq:
        raise ValueError("empty corpus statistics")
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("need at least one reference")
    cand = _toks(candidate)
    cv, cn = _tfidf(cand, stats)
    total = np.zeros(stats.n)
    for r in refs:
        rv, rn = _tfidf(r, stats)
        delta = len(cand) - len(r)
        pen = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        for k in range(stats.n):
            val = sum(min(x, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, x in cv[k].items())
            if cn[k] != 0 and rn[k] != 0:
                val /= cn[k] * rn[k]
            total[k] += val * pen
    return float(np.mean(total)) / len(refs) * 10.0


def cider_corpus(candidates: Sequence, reference_sets: Sequence[Sequence], sigma: float = 6.0) -> tuple[float, list[float]]:
    if len(candidates) != len(reference_sets):
        raise ValueError("one reference set per candidate")
    stats = CorpusStats.from_references(reference_sets)
    scores = [cider(c, refs, stats, sigma) for c, refs in zip(candidates, reference_sets)]
    return float(np.mean(scores)), scores


# --- embedding similarity ----------------------------------------------------

class TextEmbedder(Protocol):
    def __call__(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing of word unigrams and bigrams (deterministic, no training)."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _slot(self, feat: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(feat.encode(), digest_size=8).digest(), "little")
        return h % self.dim, 1.0 if (h >> 63) & 1 else -1.0

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        t = words(text)
        for f in t + [a + " " + b for a, b in zip(t, t[1:])]:
            i, s = self._slot(f)
            v[i] += s
        return v


class LMTextEmbedder:
    """Mean-pooled encoder states of a trained sequence model over the text's bytes."""

    def __init__(self, model):
        self.model = model

    def __call__(self, text: str) -> np.ndarray:
        import torch
        from ..vocab import MixedStream
        s = MixedStream.text(text)
        if len(s) == 0:
            return np.zeros(self.model.cfg.d_model)
        with torch.no_grad():
            ids = torch.tensor([s.ids])
            mot = torch.zeros_like(ids, dtype=torch.bool)
            h = self.model.encode(ids, mot, torch.ones_like(mot))
        return h[0].mean(0).double().numpy()


def embed_sim(candidate: str, reference: str, embedder: Callable[[str], np.ndarray] | None = None) -> float:
    """Cosine of the two embeddings; 0 if either is the zero vector."""
    embedder = embedder or HashingEmbedder()
    a, b = np.asarray(embedder(candidate), float), np.asarray(embedder(reference), float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
