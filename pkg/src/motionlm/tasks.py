"""Instruction task registry: render slots into (condition, target) streams and parse outputs back."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .corpus import Corpus, CorpusError
from .vocab import (EOS, MOTION_CLOSE, MOTION_OPEN, NONE, SEP, STEP, TAGS, TASK_KINDS,
                    MixedStream, StreamError, decode_text, encode_text)

SLOT_TYPES = ("text", "text_list", "motion")


class SlotError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, raw: MixedStream):
        super().__init__(msg)
        self.raw = raw


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    slots: tuple[tuple[str, str, str], ...]  # (name, type, prompt prefix)
    target: tuple[str, str]                  # (name, type)

    @property
    def target_modality(self) -> str:
        return "motion" if self.target[1] == "motion" else "text"


def load_templates(path: str | Path | None = None) -> tuple[int, dict[str, TaskSpec]]:
    if path is None:
        raw = resources.files("motionlm").joinpath("templates", "tasks_v1.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    doc = json.loads(raw)
    specs = {}
    for kind, d in doc["kinds"].items():
        if kind not in TAGS:
            raise ValueError(f"template names unknown task kind {kind!r}")
        slots = tuple(tuple(s) for s in d["slots"])
        for _, typ, _ in slots:
            if typ not in SLOT_TYPES:
                raise ValueError(f"{kind}: unknown slot type {typ!r}")
        specs[kind] = TaskSpec(kind, slots, tuple(d["target"]))
    missing = set(TASK_KINDS) - set(specs)
    if missing:
        raise ValueError(f"template lacks kinds {sorted(missing)}")
    return int(doc["version"]), specs


TEMPLATE_VERSION, REGISTRY = load_templates()


# --- rendering -------------------------------------------------------------

def _render_value(kind: str, name: str, typ: str, value) -> MixedStream:
    if typ == "motion":
        if isinstance(value, str) or not all(isinstance(i, (int, np.integer)) for i in value):
            raise SlotError(f"{kind}.{name}: expected motion ids")
        return MixedStream.motion_span(int(i) for i in value)
    if typ == "text":
        if not isinstance(value, str):
            raise SlotError(f"{kind}.{name}: expected text")
        return MixedStream.tokens([NONE]) if value == "" else MixedStream.text(value)
    if isinstance(value, str) or not all(isinstance(v, str) for v in value):
        raise SlotError(f"{kind}.{name}: expected a list of texts")
    if any(v == "" for v in value):
        raise SlotError(f"{kind}.{name}: list items must be nonempty")
    if not value:
        return MixedStream.tokens([NONE])
    out = MixedStream.text(value[0])
    for v in value[1:]:
        out = out + MixedStream.tokens([STEP]) + MixedStream.text(v)
    return out


def render(kind: str, slots: Mapping[str, object]) -> tuple[MixedStream, MixedStream]:
    """Condition is [tag] + (prompt, value, sep) per slot; target is the target slot's value."""
    spec = REGISTRY.get(kind)
    if spec is None:
        raise SlotError(f"unknown task kind {kind!r}")
    needed = [s[0] for s in spec.slots] + [spec.target[0]]
    missing = [n for n in needed if n not in slots]
    if missing:
        raise SlotError(f"{kind}: missing slots {missing}")
    cond = MixedStream.tokens([TAGS[kind]])
    for name, typ, prompt in spec.slots:
        cond = cond + MixedStream.text(prompt) + _render_value(kind, name, typ, slots[name])
        cond = cond + MixedStream.tokens([SEP])
    tname, ttyp = spec.target
    target = _render_value(kind, tname, ttyp, slots[tname])
    if ttyp != "motion":
        target = target + MixedStream.tokens([EOS])
    return cond, target


# --- parsing ---------------------------------------------------------------

def _parse_value(typ: str, ids: list[int], motion: list[bool], raw: MixedStream):
    s = MixedStream(tuple(ids), tuple(motion))
    if typ == "motion":
        if not ids or ids[0] != MOTION_OPEN or motion[0]:
            raise ParseError("motion output does not start with motion-open", raw)
        try:
            s.validate()
        except StreamError as e:
            raise ParseError(str(e), raw) from e
        segs = list(s.segments())
        if len(segs) != 1 or segs[0][0] != "motion":
            raise ParseError("expected exactly one motion span", raw)
        return segs[0][1]
    if any(motion) or MOTION_OPEN in ids or MOTION_CLOSE in ids:
        raise ParseError("motion markers inside a text output", raw)
    if ids == [NONE]:
        return [] if typ == "text_list" else ""
    if typ == "text":
        return decode_text(ids)
    parts, cur = [], []
    for t in ids:
        if t == STEP:
            parts.append(decode_text(cur))
            cur = []
        else:
            cur.append(t)
    parts.append(decode_text(cur))
    return parts


def parse(kind: str, output: MixedStream):
    """Recover the target slot value from a generated (or rendered) target stream.

    Text outputs may lack the final eos when generation was truncated.
    """
    spec = REGISTRY[kind]
    ids, mot = list(output.ids), list(output.motion)
    typ = spec.target[1]
    if typ != "motion":
        if EOS in ids:
            k = ids.index(EOS)
            ids, mot = ids[:k], mot[:k]
    return _parse_value(typ, ids, mot, output)


def parse_condition(kind: str, cond: MixedStream) -> dict:
    """Inverse of the condition half of ``render``."""
    spec = REGISTRY[kind]
    ids, mot = list(cond.ids), list(cond.motion)
    if not ids or ids[0] != TAGS[kind] or mot[0]:
        raise ParseError(f"condition does not start with the {kind} tag", cond)
    pos = 1
    out = {}
    for name, typ, prompt in spec.slots:
        p = encode_text(prompt)
        if ids[pos:pos + len(p)] != p:
            raise ParseError(f"prompt for slot {name!r} not found", cond)
        pos += len(p)
        end = pos
        while end < len(ids) and not (ids[end] == SEP and not mot[end]):
            end += 1
        if end == len(ids):
            raise ParseError(f"slot {name!r} is not terminated", cond)
        out[name] = _parse_value(typ, ids[pos:end], mot[pos:end], cond)
        pos = end + 1
    if pos != len(ids):
        raise ParseError("trailing tokens after the last slot", cond)
    return out


# --- training set ----------------------------------------------------------

@dataclass
class PromptInstance:
    kind: str
    slots: dict
    condition: MixedStream
    target: MixedStream
    source: dict = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "source": self.source}


def make_instance(kind: str, slots: dict, source: dict | None = None) -> PromptInstance:
    cond, tgt = render(kind, slots)
    return PromptInstance(kind, dict(slots), cond, tgt, source or {})


def mib_split(n: int, fractions: tuple[float, float, float] = (0.25, 0.5, 0.25)) -> tuple[int, int, int]:
    """(prefix, gap, suffix) token counts; prefix and suffix are floored, the gap takes the rest."""
    if n < 3:
        raise ValueError("in-between needs at least 3 tokens")
    a = max(1, int(n * fractions[0]))
    c = max(1, int(n * fractions[2]))
    b = n - a - c
    if b < 1:
        raise ValueError(f"split of {n} tokens leaves no gap")
    return a, b, c


class _Sources:
    """Eligible corpus items per kind, resolved lazily."""

    def __init__(self, corpus: Corpus, tokens: Mapping[str, Sequence[int]], mib_fractions):
        self.corpus = corpus
        self.tokens = tokens
        self.mib = mib_fractions
        self.scenes = corpus.scenes()
        motion_recs = [r for r in corpus.records if not r.text_only and r.motion_id in tokens]
        flat_steps = []
        for sid, recs in sorted(self.scenes.items()):
            seq = [(r, s) for r in recs for s in r.step_texts]
            flat_steps += [(sid, seq[i - 1][1], seq[i][1], seq[i][0].motion_id) for i in range(1, len(seq))]
        self.items: dict[str, list] = {
            "MG": [(r, j) for r in motion_recs for j in range(len(r.step_texts))],
            "MU": motion_recs,
            "MiB": [r for r in motion_recs if len(tokens[r.motion_id]) >= 3],
            "CT2T": list(corpus.records),
            "T2S": list(corpus.records),
            "S2T": list(corpus.records),
            "T2C": sorted(self.scenes),
            "CT2S": list(corpus.records),
            "CS2T": list(corpus.records),
            "CS2S": flat_steps,
            "S2C": sorted(self.scenes),
        }

    def history(self, r) -> str:
        if r.segment_index == 0:
            return ""
        return self.scenes[r.scene_id][r.segment_index - 1].task_text

    def build(self, kind: str, item) -> PromptInstance:
        if kind == "MG":
            r, j = item
            return make_instance(kind, {"text": r.step_texts[j], "motion": list(self.tokens[r.motion_id])},
                                 {"motion_id": r.motion_id, "step": j})
        if kind == "MU":
            return make_instance(kind, {"motion": list(self.tokens[item.motion_id]), "text": item.step_texts[0]},
                                 {"motion_id": item.motion_id})
        if kind == "MiB":
            ids = list(self.tokens[item.motion_id])
            a, b, _ = mib_split(len(ids), self.mib)
            return make_instance(kind, {"prefix": ids[:a], "gap": ids[a:a + b], "suffix": ids[a + b:]},
                                 {"motion_id": item.motion_id})
        if kind == "CS2S":
            sid, prev, nxt, mid = item
            return make_instance(kind, {"scene": self.scenes[sid][0].scene_text, "step": prev, "next_step": nxt},
                                 {"scene_id": sid, "motion_id": mid})
        if kind in ("T2C", "S2C"):
            recs = self.scenes[item]
            slots = {"scene": recs[0].scene_text}
            if kind == "T2C":
                slots["tasks"] = [r.task_text for r in recs]
            else:
                slots["steps"] = [r.step_texts[0] for r in recs]
            return make_instance(kind, slots, {"scene_id": item})
        r = item
        src = {"scene_id": r.scene_id, "segment_index": r.segment_index}
        slots = {"scene": r.scene_text, "task": r.task_text, "steps": list(r.step_texts)}
        if kind == "CT2T":
            slots = {"scene": r.scene_text, "history": self.history(r), "next_task": r.task_text}
        return make_instance(kind, slots, src)


def make_training_set(
    corpus: Corpus,
    tokens: Mapping[str, Sequence[int]],
    weights: Mapping[str, float] | None = None,
    seed: int = 0,
    count: int | None = None,
    mib_fractions: tuple[float, float, float] = (0.25, 0.5, 0.25),
) -> Iterator[PromptInstance]:
    """Sample instances with kind probabilities proportional to ``weights`` (uniform by default).

    ``tokens`` maps motion ids to their tokenizer ids. Yields forever unless ``count`` is given.
    """
    weights = dict(weights) if weights is not None else {k: 1.0 for k in TASK_KINDS}
    unknown = set(weights) - set(TASK_KINDS)
    if unknown:
        raise ValueError(f"unknown task kinds {sorted(unknown)}")
    if any(w < 0 for w in weights.values()):
        raise ValueError("task weights must be >= 0")
    kinds = [k for k in TASK_KINDS if weights.get(k, 0) > 0]
    if not kinds:
        raise ValueError("all task weights are zero")
    src = _Sources(corpus, tokens, mib_fractions)
    for k in kinds:
        if not src.items[k]:
            raise CorpusError(f"no eligible corpus records for task {k}")
    p = np.array([weights[k] for k in kinds], dtype=np.float64)
    p /= p.sum()
    rng = np.random.default_rng(seed)
    n = 0
    while count is None or n < count:
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        pool = src.items[kind]
        yield src.build(kind, pool[int(rng.integers(len(pool)))])
        n += 1


def all_instances(corpus: Corpus, tokens: Mapping[str, Sequence[int]], kind: str,
                  mib_fractions=(0.25, 0.5, 0.25)) -> list[PromptInstance]:
    """Every eligible instance of one kind, in corpus order (used for validation sets)."""
    src = _Sources(corpus, tokens, mib_fractions)
    return [src.build(kind, item) for item in src.items[kind]]


def write_manifest(instances: Sequence[PromptInstance], path: str | Path, header: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"template_version": TEMPLATE_VERSION, **(header or {})}, sort_keys=True)]
    lines += [json.dumps(i.descriptor(), sort_keys=True) for i in instances]
    path.write_text("\n".join(lines) + "\n", "utf-8")
    return path
