"""Agreement between forward-path planned texts and backward-path descriptions."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .text import CorpusStats, HashingEmbedder, bleu, cider, embed_sim, rouge_l, words


@dataclass
class MetricReport:
    name: str
    value: float
    count: int
    config_hash: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError(f"{self.name}: non-finite value")
        if self.count <= 0:
            raise ValueError(f"{self.name}: empty sample")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _safe(fn, cand: str, ref: str) -> float:
    if not words(cand) or not words(ref):
        return 0.0
    return fn(cand, ref)


def paired_scores(forward: Sequence[str], backward: Sequence[str],
                  embedder: Callable[[str], np.ndarray] | None = None, tag: str = "") -> dict[str, MetricReport]:
    """Mean BLEU-1/4, ROUGE-L, CIDEr-D and embed_sim with backward texts as candidates."""
    if len(forward) != len(backward):
        raise ValueError("forward and backward texts must align one-to-one")
    if not forward:
        raise ValueError("no text pairs")
    embedder = embedder or HashingEmbedder()
    stats = CorpusStats.from_references([[f] for f in forward])
    h = config_hash({"tag": tag, "embedder": type(embedder).__name__, "n": len(forward)})
    rows = {
        "bleu1": [_safe(lambda c, r: bleu(c, [r], 1), b, f) for f, b in zip(forward, backward)],
        "bleu4": [_safe(lambda c, r: bleu(c, [r], 4), b, f) for f, b in zip(forward, backward)],
        "rouge_l": [_safe(rouge_l, b, f) for f, b in zip(forward, backward)],
        "cider": [_safe(lambda c, r: cider(c, [r], stats), b, f) for f, b in zip(forward, backward)],
        "embed_sim": [_safe(lambda c, r: embed_sim(c, r, embedder), b, f) for f, b in zip(forward, backward)],
    }
    return {k: MetricReport(f"{tag}{k}", float(np.mean(v)), len(v), h) for k, v in rows.items()}


def cycle_scores(trace, embedder=None) -> dict[str, dict[str, MetricReport]]:
    """Step level pairs every planned step with the description of the segment made from it;
    task level pairs planned tasks with their summaries."""
    fwd_steps = [s for group in trace.steps for s in group]
    out = {}
    if fwd_steps and len(trace.backward_steps) == len(fwd_steps):
        out["step"] = paired_scores(fwd_steps, trace.backward_steps, embedder, "step_")
    if trace.tasks and len(trace.backward_tasks) == len(trace.tasks):
        out["task"] = paired_scores(trace.tasks, trace.backward_tasks, embedder, "task_")
    return out


def shuffled_baseline(forward: Sequence[str], backward: Sequence[str], metric: Callable[[str, str], float],
                      permutations: int = 200, seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of the paired metric under random re-pairings."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(permutations):
        perm = rng.permutation(len(backward))
        vals.append(np.mean([_safe(metric, backward[j], f) for f, j in zip(forward, perm)]))
    return float(np.mean(vals)), float(np.std(vals))


def bleu1(cand: str, ref: str) -> float:
    return bleu(cand, [ref], 1)
