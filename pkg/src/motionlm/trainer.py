"""Joint multitask training of the sequence model, plus the memorization probe."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import Section, save_checkpoint, state_tensors
from .lm import Batch, MotionLM, Plan, Sampler, collate, lm_section
from .numerics import Adam, NonFiniteLossError
from .tasks import PromptInstance, REGISTRY
from .vocab import TASK_KINDS

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 200
    clip_norm: float = 1.0
    seed: int = 0
    weights: dict[str, float] | None = None
    eval_interval: int = 500
    checkpoint_dir: str | None = None
    queue_size: int = 8
    bucket: int = 8  # batches drawn together and regrouped by length to cut padding

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0 or self.warmup < 0:
            raise ValueError("lr must be > 0 and warmup >= 0")

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr


@dataclass
class TrainReport:
    text_loss: list[float] = field(default_factory=list)
    motion_loss: list[float] = field(default_factory=list)
    per_task: dict[str, list[float]] = field(default_factory=dict)  # running mean per step
    validation: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    best_step: int | None = None
    checkpoint: str | None = None

    @property
    def steps(self) -> int:
        return len(self.text_loss)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return json.dumps(clean(asdict(self)), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "TrainReport":
        d = json.loads(s)
        nan = float("nan")
        fix = lambda xs: [nan if x is None else x for x in xs]  # noqa: E731
        d["text_loss"] = fix(d["text_loss"])
        d["motion_loss"] = fix(d["motion_loss"])
        d["per_task"] = {k: fix(v) for k, v in d["per_task"].items()}
        return cls(**d)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        kinds = sorted(self.per_task)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "text_loss", "motion_loss"] + [f"task_{k}" for k in kinds])
            for i in range(self.steps):
                w.writerow([i, self.text_loss[i], self.motion_loss[i]] + [self.per_task[k][i] for k in kinds])
        return path


# --- batching --------------------------------------------------------------

def make_batch(instances: Sequence[PromptInstance]) -> Batch:
    return collate([(i.condition, i.target) for i in instances], [i.kind for i in instances])


def _bucketed(instances: Iterator[PromptInstance], batch_size: int, bucket: int,
              seed: int) -> Iterator[list[PromptInstance]]:
    rng = np.random.default_rng(seed)
    while True:
        pool = [next(instances) for _ in range(batch_size * bucket)]
        pool.sort(key=lambda i: (len(i.condition) + len(i.target), len(i.condition)))
        chunks = [pool[j:j + batch_size] for j in range(0, len(pool), batch_size)]
        for j in rng.permutation(len(chunks)):
            yield chunks[j]


def _producer(instances: Iterator[PromptInstance], batch_size: int, steps: int,
              q: queue.Queue, stop: threading.Event, bucket: int, seed: int) -> None:
    try:
        groups = _bucketed(instances, batch_size, max(1, bucket), seed)
        for _ in range(steps):
            item = make_batch(next(groups))
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if stop.is_set():
                return
    except BaseException as e:  # surfaced to the consumer
        q.put(e)


def batches(instances: Iterator[PromptInstance], batch_size: int, steps: int,
            queue_size: int = 8, bucket: int = 1, seed: int = 0) -> Iterator[Batch]:
    """Assemble batches on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()
    t = threading.Thread(target=_producer, args=(instances, batch_size, steps, q, stop, bucket, seed),
                         daemon=True)
    t.start()
    try:
        for _ in range(steps):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        t.join(timeout=5)


def per_row_losses(model: MotionLM, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Summed cross-entropy and position counts per batch row, split by modality."""
    ce_t, ce_m, logits = model.token_losses(batch)
    B = len(batch)
    sum_t = torch.zeros(B, dtype=ce_t.dtype).index_add(0, logits.text_pos[:, 0], ce_t)
    sum_m = torch.zeros(B, dtype=ce_m.dtype).index_add(0, logits.motion_pos[:, 0], ce_m)
    n_t = torch.bincount(logits.text_pos[:, 0], minlength=B)
    n_m = torch.bincount(logits.motion_pos[:, 0], minlength=B)
    return sum_t, n_t, sum_m, n_m


@torch.no_grad()
def validate(model: MotionLM, val_sets: Mapping[str, Sequence[PromptInstance]], batch_size: int = 32) -> dict:
    """Token-mean cross-entropy per task kind, plus their mean as ``total``."""
    was_training = model.training
    model.eval()
    out = {}
    for kind, insts in val_sets.items():
        if not insts:
            continue
        s, n = 0.0, 0
        for i in range(0, len(insts), batch_size):
            st, nt, sm, nm = per_row_losses(model, make_batch(insts[i:i + batch_size]))
            s += float(st.sum() + sm.sum())
            n += int(nt.sum() + nm.sum())
        out[kind] = s / n
    out["total"] = float(np.mean([v for k, v in out.items()]))
    model.train(was_training)
    return out


# --- training --------------------------------------------------------------

def train(model: MotionLM, instances: Iterable[PromptInstance], cfg: TrainConfig,
          val_sets: Mapping[str, Sequence[PromptInstance]] | None = None,
          extra_sections: Mapping[str, Section] | None = None) -> TrainReport:
    """Optimize L_t + L_m; keeps and restores the weights with the lowest validation loss.

    ``extra_sections`` (e.g. the tokenizer) are copied into every checkpoint written.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr_at(0), clip_norm=cfg.clip_norm)
    report = TrainReport(per_task={k: [] for k in TASK_KINDS})
    run_sum = {k: 0.0 for k in TASK_KINDS}
    run_cnt = {k: 0 for k in TASK_KINDS}
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    best_val, best_state = math.inf, None
    t0 = time.perf_counter()
    model.train()

    def checkpoint(name: str, extra: dict) -> Path | None:
        if ckdir is None:
            return None
        secs = dict(extra_sections or {})
        secs["lm"] = lm_section(model, extra)
        return save_checkpoint(ckdir / name, secs)

    def evaluate(step: int) -> None:
        nonlocal best_val, best_state
        if not val_sets:
            return
        v = validate(model, val_sets)
        v["step"] = step
        report.validation.append(v)
        log.info("step %d val %.4f", step, v["total"])
        if v["total"] < best_val:
            best_val = v["total"]
            best_state = copy.deepcopy(model.state_dict())
            report.best_step = step
            checkpoint("lm_best.ckpt", {"step": step, "val": v})

    it = iter(instances)
    for step, batch in enumerate(batches(it, cfg.batch_size, cfg.steps, cfg.queue_size, cfg.bucket, cfg.seed)):
        opt.lr = cfg.lr_at(step)
        st, nt, sm, nm = per_row_losses(model, batch)
        L_t = st.sum() / nt.sum() if nt.sum() > 0 else st.sum() * 0
        L_m = sm.sum() / nm.sum() if nm.sum() > 0 else sm.sum() * 0
        loss = L_t + L_m
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at step {step}: L_t={float(L_t.detach())} L_m={float(L_m.detach())} kinds={batch.kinds}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.text_loss.append(float(L_t.detach()) if nt.sum() > 0 else float("nan"))
        report.motion_loss.append(float(L_m.detach()) if nm.sum() > 0 else float("nan"))
        per_row = ((st + sm) / (nt + nm).clamp(min=1)).detach()
        for kind, v in zip(batch.kinds, per_row.tolist()):
            run_sum[kind] = 0.98 * run_sum[kind] + 0.02 * v if run_cnt[kind] else v
            run_cnt[kind] += 1
        for k in TASK_KINDS:
            report.per_task[k].append(run_sum[k] if run_cnt[k] else float("nan"))
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
            evaluate(step + 1)
            checkpoint("lm_last.ckpt", {"step": step + 1})

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.wall_clock = time.perf_counter() - t0
    final = checkpoint("lm_final.ckpt", {"best_step": report.best_step, "report": json.loads(report.to_json())})
    report.checkpoint = str(final) if final else None
    return report


# --- memorization probe ----------------------------------------------------

@dataclass
class ProbeResult:
    token_accuracy: float
    exact_matches: int
    total: int
    steps_run: int
    history: list[dict] = field(default_factory=list)


@torch.no_grad()
def token_accuracy(model: MotionLM, batch: Batch) -> float:
    model.eval()
    logits = model(batch)
    t_tgt = batch.tgt_ids[batch.tgt_mask & ~batch.tgt_motion]
    m_tgt = batch.tgt_ids[batch.tgt_mask & batch.tgt_motion]
    hits = int((logits.text.argmax(-1) == t_tgt).sum()) + int((logits.motion.argmax(-1) == m_tgt).sum())
    return hits / (len(t_tgt) + len(m_tgt))


def plan_for(inst: PromptInstance, max_len: int) -> Plan:
    return Plan(REGISTRY[inst.kind].target_modality, max_len)


@torch.no_grad()
def exact_matches(model: MotionLM, instances: Sequence[PromptInstance], max_len: int = 160) -> int:
    model.eval()
    hits = 0
    for modality in ("text", "motion"):
        group = [i for i in instances if REGISTRY[i.kind].target_modality == modality]
        if not group:
            continue
        outs = model.generate([i.condition for i in group], Plan(modality, max_len), Sampler("greedy"))
        hits += sum(o.stream == i.target for o, i in zip(outs, group))
    return hits


def overfit_probe(model: MotionLM, instances: Sequence[PromptInstance], steps: int = 2000,
                  lr: float = 1e-3, warmup: int = 50, check_every: int = 100, seed: int = 0) -> ProbeResult:
    """Train on one fixed full batch; stop early once every instance is reproduced exactly."""
    torch.manual_seed(seed)
    batch = make_batch(instances)
    opt = Adam(model.named_parameters(), lr=lr)
    history = []
    step = 0
    exact = exact_matches(model, instances) if steps == 0 else 0
    while step < steps:
        model.train()
        opt.lr = lr * min(1.0, (step + 1) / max(warmup, 1))
        L_t, L_m = model.loss(batch)
        loss = L_t + L_m
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at probe step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % check_every == 0 or step == steps:
            acc = token_accuracy(model, batch)
            exact = exact_matches(model, instances) if acc > 0.95 else 0
            history.append({"step": step, "loss": float(loss.detach()), "token_accuracy": acc, "exact": exact})
            log.info("probe step %d loss %.4f acc %.4f exact %d", step, float(loss.detach()), acc, exact)
            if exact == len(instances):
                break
    acc = token_accuracy(model, batch)
    return ProbeResult(acc, exact, len(instances), step, history)
