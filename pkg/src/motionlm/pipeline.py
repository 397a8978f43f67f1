"""Closed loop: scene -> tasks -> steps -> motion segments -> transitions -> long motion,
then motion -> step descriptions -> task summaries -> scene estimate."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import MotionSequence, write_motion
from .evalmetrics.cycle import cycle_scores
from .lm import MotionLM, Plan, Sampler
from .tasks import ParseError, parse, render
from .tokenizer import VQVAE

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


@dataclass
class LoopConfig:
    rounds: int = 4
    max_steps: int = 5
    context: int = 8              # boundary tokens per side for in-betweening
    budget_frac: float = 0.25     # transition budget as a fraction of mean segment tokens
    budget: int | None = None     # explicit transition budget in tokens, overrides budget_frac
    exact_transitions: bool = True  # transitions use the whole budget rather than a model-chosen length
    sampler: str = "topk"
    top_k: int = 10
    temperature: float = 1.0
    seed: int = 0
    max_text_len: int = 160
    max_motion_len: int = 64

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.max_steps != 5:
            raise ValueError("max_steps is fixed at 5")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")


@dataclass
class CallRecord:
    stage: str
    seed: int
    truncated: bool = False


@dataclass
class PipelineTrace:
    scene: str
    config: dict
    tasks: list[str] = field(default_factory=list)
    steps: list[list[str]] = field(default_factory=list)
    segments: list[list[int]] = field(default_factory=list)       # motion ids per step, in order
    segment_frames: list[int] = field(default_factory=list)
    segment_task: list[int] = field(default_factory=list)         # task index of each segment
    transitions: list[list[int]] = field(default_factory=list)
    long_motion_tokens: list[int] = field(default_factory=list)
    long_motion_frames: int = 0
    backward_steps: list[str] = field(default_factory=list)
    backward_tasks: list[str] = field(default_factory=list)
    backward_scene: str = ""
    cycle: dict = field(default_factory=dict)
    calls: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, s: str) -> "PipelineTrace":
        return cls(**json.loads(s))

    @property
    def seeds(self) -> list[int]:
        return [c["seed"] for c in self.calls]


class _Seeds:
    """Per-call seeds: drawn from a generator, or replayed from a recorded list."""

    def __init__(self, seed: int, replay: Sequence[int] | None = None):
        self.rng = np.random.default_rng(seed)
        self.replay = list(replay) if replay is not None else None

    def next(self) -> int:
        if self.replay is not None:
            if not self.replay:
                raise StageError("recorded seeds exhausted during replay")
            return self.replay.pop(0)
        return int(self.rng.integers(2**31 - 1))


class Pipeline:
    def __init__(self, lm: MotionLM, tokenizer: VQVAE, mean_segment_tokens: float, fps: int = 20):
        if lm.cfg.motion_vocab != tokenizer.cfg.codebook_size:
            raise ValueError("sequence model motion vocabulary differs from the tokenizer codebook")
        self.lm = lm.eval()
        self.tok = tokenizer.eval()
        self.mean_segment_tokens = float(mean_segment_tokens)
        self.fps = fps

    # -- helpers
    def _sampler(self, cfg: LoopConfig) -> Sampler:
        return Sampler(cfg.sampler, cfg.top_k, cfg.temperature)

    def _run(self, kind: str, slot_list: list[dict], modality: str, max_len: int, cfg: LoopConfig,
             seeds: _Seeds, trace: PipelineTrace | None, stage: str, exact: bool = False):
        seed = seeds.next()
        conds = [render(kind, s)[0] for s in slot_list]
        outs = self.lm.generate(conds, Plan(modality, max_len, exact), self._sampler(cfg), seed=seed)
        if trace is not None:
            trace.calls.append(asdict(CallRecord(stage, seed, any(o.truncated for o in outs))))
        return [parse(kind, o.stream) for o in outs]

    def transition_budget(self, cfg: LoopConfig) -> int:
        if cfg.budget is not None:
            return cfg.budget
        return int(round(cfg.budget_frac * self.mean_segment_tokens))

    # -- stages
    def plan_round(self, scene: str, history: str, cfg: LoopConfig, seeds: _Seeds,
                   trace: PipelineTrace | None = None) -> str:
        for _ in range(2):  # one retry with a fresh seed on empty output
            text = self._run("CT2T", [{"scene": scene, "history": history, "next_task": ""}], "text",
                             cfg.max_text_len, cfg, seeds, trace, "plan")[0].strip()
            if text:
                return text
        raise StageError("planning produced empty text twice")

    def decompose(self, scene: str, tasks: list[str], cfg: LoopConfig, seeds: _Seeds,
                  trace: PipelineTrace | None = None) -> list[list[str]]:
        outs = self._run("CT2S", [{"scene": scene, "task": t, "steps": []} for t in tasks], "text",
                         cfg.max_text_len, cfg, seeds, trace, "decompose")
        result = []
        for t, steps in zip(tasks, outs):
            steps = [s.strip() for s in steps if s.strip()][: cfg.max_steps]
            result.append(steps or [t])  # fall back to the task text itself
        return result

    def synthesize_segments(self, steps: list[str], cfg: LoopConfig, seeds: _Seeds,
                            trace: PipelineTrace | None = None) -> list[list[int]]:
        return self._run("MG", [{"text": s, "motion": []} for s in steps], "motion",
                         cfg.max_motion_len, cfg, seeds, trace, "synthesize")

    def synthesize_segment(self, step: str, cfg: LoopConfig, seed: int) -> tuple[list[int], MotionSequence]:
        ids = self.synthesize_segments([step], cfg, _Seeds(0, [seed]))[0]
        return ids, self.decode(ids)

    def in_between(self, pairs: list[tuple[list[int], list[int]]], cfg: LoopConfig, seeds: _Seeds,
                   trace: PipelineTrace | None = None, budget: int | None = None) -> list[list[int]]:
        budget = self.transition_budget(cfg) if budget is None else budget
        if budget == 0 or not pairs:
            return [[] for _ in pairs]
        k = cfg.context
        slots = [{"prefix": a[-k:], "suffix": b[:k], "gap": []} for a, b in pairs]
        return self._run("MiB", slots, "motion", budget, cfg, seeds, trace, "in_between",
                         exact=cfg.exact_transitions)

    def describe_segments(self, segments: list[list[int]], cfg: LoopConfig, seeds: _Seeds,
                          trace: PipelineTrace | None = None) -> list[str]:
        return self._run("MU", [{"motion": s, "text": ""} for s in segments], "text",
                         cfg.max_text_len, cfg, seeds, trace, "describe")

    def summarize_tasks(self, groups: list[list[str]], cfg: LoopConfig, seeds: _Seeds,
                        trace: PipelineTrace | None = None) -> list[str]:
        slots = [{"steps": [s for s in g if s] or ["none"], "task": ""} for g in groups]
        return self._run("S2T", slots, "text", cfg.max_text_len, cfg, seeds, trace, "summarize")

    def estimate_scene(self, tasks: list[str], cfg: LoopConfig, seeds: _Seeds,
                       trace: PipelineTrace | None = None) -> str:
        tasks = [t for t in tasks if t] or ["none"]
        return self._run("T2C", [{"tasks": tasks, "scene": ""}], "text", cfg.max_text_len,
                         cfg, seeds, trace, "scene")[0]

    @torch.no_grad()
    def decode(self, ids: Sequence[int]) -> MotionSequence:
        return self.tok.detokenize(list(ids), fps=self.fps)

    @torch.no_grad()
    def junction_discontinuity(self, prev: Sequence[int], transition: Sequence[int], nxt: Sequence[int],
                               context: int = 8) -> float:
        """Largest per-channel jump across the seams of prev-tail | transition | next-head.

        Each piece is decoded on its own, so a seam is a hard cut between poses. Decoding the
        pieces jointly would let the decoder blur a bare cut into something smoother than real
        motion, and then even a ground-truth gap scores worse than no gap.
        """
        pieces = [self.decode(p).data for p in (prev[-context:], transition, nxt[:context]) if len(p)]
        return max(float(np.abs(b[0] - a[-1]).max()) for a, b in zip(pieces[:-1], pieces[1:]))

    @staticmethod
    def join(segments: Sequence[list[int]], transitions: Sequence[list[int]]) -> list[int]:
        out = list(segments[0]) if segments else []
        for tr, seg in zip(transitions, segments[1:]):
            out += list(tr) + list(seg)
        return out

    # -- full loop
    def run_full(self, scene: str, cfg: LoopConfig | None = None, replay: Sequence[int] | None = None,
                 out_dir: str | Path | None = None) -> PipelineTrace:
        cfg = cfg or LoopConfig()
        cfg.validate()
        seeds = _Seeds(cfg.seed, replay)
        trace = PipelineTrace(scene, asdict(cfg))
        r = self.tok.cfg.downsample
        try:
            history = ""
            for _ in range(cfg.rounds):
                task = self.plan_round(scene, history, cfg, seeds, trace)
                trace.tasks.append(task)
                history = task
            trace.steps = self.decompose(scene, trace.tasks, cfg, seeds, trace)
            flat = [s for g in trace.steps for s in g]
            trace.segment_task = [i for i, g in enumerate(trace.steps) for _ in g]
            trace.segments = self.synthesize_segments(flat, cfg, seeds, trace)
            trace.segment_frames = [len(s) * r for s in trace.segments]
            pairs = list(zip(trace.segments[:-1], trace.segments[1:]))
            trace.transitions = self.in_between(pairs, cfg, seeds, trace)
            trace.long_motion_tokens = self.join(trace.segments, trace.transitions)
            trace.long_motion_frames = len(trace.long_motion_tokens) * r
        except (StageError, ParseError, ValueError) as e:
            trace.errors.append(f"forward: {e}")
            log.warning("forward path failed: %s", e)
            return trace

        try:
            trace.backward_steps = self.describe_segments(trace.segments, cfg, seeds, trace)
            groups = [[d for d, t in zip(trace.backward_steps, trace.segment_task) if t == i]
                      for i in range(len(trace.tasks))]
            trace.backward_tasks = self.summarize_tasks(groups, cfg, seeds, trace)
            trace.backward_scene = self.estimate_scene(trace.backward_tasks, cfg, seeds, trace)
        except (StageError, ParseError, ValueError) as e:
            trace.errors.append(f"backward: {e}")
            log.warning("backward path failed: %s", e)

        trace.cycle = {lvl: {k: asdict(v) for k, v in reps.items()} for lvl, reps in cycle_scores(trace).items()}
        if out_dir is not None:
            self.write_outputs(trace, out_dir)
        return trace

    def replay(self, trace: PipelineTrace) -> PipelineTrace:
        return self.run_full(trace.scene, LoopConfig(**trace.config), replay=trace.seeds)

    def write_outputs(self, trace: PipelineTrace, out_dir: str | Path) -> tuple[Path, Path | None]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tpath = out / "trace.json"
        tpath.write_text(trace.to_json() + "\n", "utf-8")
        mpath = None
        if trace.long_motion_tokens:
            mpath = out / "long_motion.amot"
            write_motion(mpath, self.decode(trace.long_motion_tokens))
        return tpath, mpath


def junction_jump(motion: np.ndarray, start: int, end: int) -> float:
    """Largest per-channel frame-to-frame change over frames [start, end)."""
    lo, hi = max(0, start), min(len(motion), end)
    if hi - lo < 2:
        return 0.0
    return float(np.abs(np.diff(motion[lo:hi], axis=0)).max())


def summary_table(trace: PipelineTrace) -> str:
    rows = [("scene", trace.scene)]
    for i, t in enumerate(trace.tasks):
        rows.append((f"task {i}", t))
        steps = trace.steps[i] if i < len(trace.steps) else []
        for j, s in enumerate(steps):
            rows.append((f"  step {j}", s))
    rows += [
        ("segments", str(len(trace.segments))),
        ("transitions", str(len(trace.transitions))),
        ("frames", str(trace.long_motion_frames)),
        ("backward scene", trace.backward_scene),
    ]
    for lvl, reps in trace.cycle.items():
        rows.append((f"cycle {lvl}", ", ".join(f"{k}={v['value']:.3f}" for k, v in reps.items())))
    for e in trace.errors:
        rows.append(("error", e))
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)
