"""Hierarchical text annotation of segmented videos: content -> steps -> task, then scene."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

from .chat import ChatClient, ChatError
from .corpus import AnnotationRecord, Corpus, _atomic_write

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 10
SEGMENT_ROUNDS = 6
SCENE_ROUNDS = 20


def _templates() -> dict:
    return json.loads(resources.files("motionlm").joinpath("templates", "annotate_v1.json").read_text("utf-8"))


def segment_bounds(n_frames: int, fps: int, seconds: float = SEGMENT_SECONDS) -> list[tuple[int, int]]:
    """Fixed-length [start, end) frame windows; the last may be shorter."""
    step = max(1, int(round(seconds * fps)))
    return [(s, min(s + step, n_frames)) for s in range(0, n_frames, step)]


@dataclass
class SegmentHandle:
    video_id: str
    index: int
    standin: str | None = None  # pre-extracted description (mock mode)
    media: str | None = None    # opaque reference passed to a visual endpoint


@dataclass
class SegmentAnnotation:
    handle: SegmentHandle
    content: str | None
    steps: list[list[str]] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    error: str | None = None


@dataclass
class VideoAnnotation:
    video_id: str
    segments: list[SegmentAnnotation]
    scenes: list[str] = field(default_factory=list)


class Backend(Protocol):
    def describe(self, handle: SegmentHandle, max_words: int) -> str: ...
    def steps(self, content: str, round: int) -> list[str]: ...
    def task(self, steps: list[str], round: int) -> str: ...
    def scene(self, tasks: list[str], round: int) -> str: ...


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s.strip()]


class MockBackend:
    """Offline and deterministic: echo stand-ins, split sentences, truncate, concatenate."""

    def __init__(self, task_words: int = 8):
        self.task_words = task_words

    def describe(self, handle: SegmentHandle, max_words: int) -> str:
        if handle.standin is None:
            raise ChatError(f"segment {handle.video_id}/{handle.index} has no stand-in description")
        return handle.standin

    def steps(self, content: str, round: int) -> list[str]:
        return [s.rstrip(".!?") for s in split_sentences(content)][:5]

    def task(self, steps: list[str], round: int) -> str:
        return " ".join(steps[0].split()[: self.task_words])

    def scene(self, tasks: list[str], round: int) -> str:
        return "a scene where the person does: " + "; then ".join(tasks)


def _bullets(reply: str) -> list[str]:
    out = []
    for line in reply.splitlines():
        line = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line).strip()
        if line:
            out.append(line)
    return out


class ChatBackend:
    """Prompts a chat endpoint; describe goes to ``visual`` when given (a visual model speaking the same wire shape)."""

    def __init__(self, client: ChatClient, visual: ChatClient | None = None, temperature: float = 1.0):
        self.client = client
        self.visual = visual or client
        self.temperature = temperature
        self.t = _templates()

    def _ask(self, client: ChatClient, prompt: str) -> str:
        return client.complete([{"role": "user", "content": prompt}], self.temperature).strip()

    def describe(self, handle: SegmentHandle, max_words: int) -> str:
        if handle.standin is not None:
            return handle.standin
        return self._ask(self.visual, self.t["describe"].format(media=handle.media, max_words=max_words))

    def steps(self, content: str, round: int) -> list[str]:
        return _bullets(self._ask(self.client, self.t["steps"].format(content=content)))[:5]

    def task(self, steps: list[str], round: int) -> str:
        return self._ask(self.client, self.t["task"].format(steps="\n".join(f"- {s}" for s in steps)))

    def scene(self, tasks: list[str], round: int) -> str:
        lines = "\n".join(f"{i + 1}. {t}" for i, t in enumerate(tasks))
        return self._ask(self.client, self.t["scene"].format(tasks=lines))


def _cap(text: str, max_words: int) -> str:
    w = text.split()
    return text if len(w) <= max_words else " ".join(w[:max_words])


def annotate_segment(handle: SegmentHandle, backend: Backend, rounds: int = SEGMENT_ROUNDS,
                     max_words: int = 500) -> SegmentAnnotation:
    try:
        content = _cap(backend.describe(handle, max_words), max_words)
        if not content.strip():
            raise ChatError("empty description")
        ann = SegmentAnnotation(handle, content)
        for r in range(rounds):
            steps = [s for s in backend.steps(content, r) if s.strip()]
            if not steps:
                raise ChatError(f"round {r} produced no steps")
            task = backend.task(steps, r).strip()
            if not task:
                raise ChatError(f"round {r} produced an empty task")
            ann.steps.append(steps)
            ann.tasks.append(task)
        return ann
    except ChatError as e:
        log.warning("segment %s/%d failed: %s", handle.video_id, handle.index, e)
        return SegmentAnnotation(handle, None, error=str(e))


def annotate_video(video_id: str, handles: Sequence[SegmentHandle], backend: Backend,
                   segment_rounds: int = SEGMENT_ROUNDS, scene_rounds: int = SCENE_ROUNDS,
                   parallelism: int = 4) -> VideoAnnotation:
    """Segments run concurrently; scene estimation waits for all of them."""
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        segs = list(pool.map(lambda h: annotate_segment(h, backend, segment_rounds), handles))
    video = VideoAnnotation(video_id, segs)
    tasks = [s.tasks[0] for s in segs if s.tasks]
    if tasks:
        for r in range(scene_rounds):
            try:
                video.scenes.append(backend.scene(tasks, r).strip())
            except ChatError as e:
                log.warning("scene round %d of %s failed: %s", r, video_id, e)
    return video


def package_dataset(videos: Sequence[VideoAnnotation], out_dir: str | Path, provenance: dict | None = None) -> Path:
    """Write text-only annotation records (one per segment and round) plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    failures = []
    for v in videos:
        for seg in v.segments:
            if seg.error is not None:
                failures.append({"video": v.video_id, "segment": seg.handle.index, "error": seg.error})
                continue
            for r, (steps, task) in enumerate(zip(seg.steps, seg.tasks)):
                scene = v.scenes[r % len(v.scenes)] if v.scenes else ""
                records.append(AnnotationRecord(None, steps, task, scene, seg.handle.index, v.video_id,
                                                None, text_only=True))
    _atomic_write(out / "annotations.jsonl", "".join(r.to_json() + "\n" for r in records).encode("utf-8"))
    manifest = {
        "format_version": 1,
        "template_version": _templates()["version"],
        "records": len(records),
        "videos": {v.video_id: {"segments": len(v.segments), "scenes": v.scenes} for v in videos},
        "failures": failures,
        "provenance": provenance or {},
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return out


def standins_from_corpus(corpus: Corpus) -> dict[str, list[SegmentHandle]]:
    """Stand-in descriptions built from a corpus's step texts, one video per scene."""
    out: dict[str, list[SegmentHandle]] = {}
    for sid, recs in sorted(corpus.scenes().items()):
        out[sid] = [SegmentHandle(sid, r.segment_index,
                                  " ".join(f"The person will {s}." for s in r.step_texts))
                    for r in recs]
    return out


def write_standins(videos: dict[str, list[SegmentHandle]], root: str | Path) -> Path:
    root = Path(root)
    for vid, handles in videos.items():
        d = root / vid
        d.mkdir(parents=True, exist_ok=True)
        for h in handles:
            (d / f"{h.index:04d}.txt").write_text(h.standin or "", "utf-8")
    return root


def read_standins(root: str | Path) -> dict[str, list[SegmentHandle]]:
    """``root/<video>/<index>.txt`` files, ordered by index."""
    root = Path(root)
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(d.glob("*.txt"), key=lambda p: int(p.stem))
        out[d.name] = [SegmentHandle(d.name, int(p.stem), p.read_text("utf-8")) for p in files]
    return out
