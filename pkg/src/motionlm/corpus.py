"""Synthetic motion-text corpus: parametric action families, scene composition,
the AMOT motion binary format and the annotations JSONL loader."""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

AMOT_MAGIC = b"AMOT"
AMOT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

CANONICAL_CHANNELS = 16
# canonical channel layout
VEL_FWD, VEL_SIDE, HEIGHT, YAW = 0, 1, 2, 3
HIP_L, HIP_R, KNEE_L, KNEE_R = 4, 5, 6, 7
SH_L, SH_R, ELBOW_L, ELBOW_R = 8, 9, 10, 11
ROLL_L, ROLL_R, SPINE, HEAD = 12, 13, 14, 15


class MotionFormatError(ValueError):
    pass


class BadMagicError(MotionFormatError):
    pass


class TruncatedPayloadError(MotionFormatError):
    pass


class ShapeMismatchError(MotionFormatError):
    pass


class CorpusError(ValueError):
    pass


@dataclass
class MotionSequence:
    id: str
    data: np.ndarray  # (T, c) float32
    fps: int = 20

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"motion '{self.id}' must be (T>=1, c), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"motion '{self.id}' has non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def motion_to_bytes(m: MotionSequence) -> bytes:
    T, c = m.data.shape
    return _HEADER.pack(AMOT_MAGIC, AMOT_VERSION, T, c, m.fps) + m.data.astype("<f4").tobytes()


def motion_from_bytes(buf: bytes, id: str = "") -> MotionSequence:
    if len(buf) < 4 or buf[:4] != AMOT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header truncated")
    _, version, T, c, fps = _HEADER.unpack_from(buf)
    if version != AMOT_VERSION:
        raise MotionFormatError(f"unsupported AMOT version {version}")
    if T < 1 or c < 1:
        raise ShapeMismatchError(f"invalid shape T={T} c={c}")
    payload = buf[_HEADER.size:]
    want = T * c * 4
    if len(payload) < want:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header promises {want}")
    if len(payload) != want:
        raise ShapeMismatchError(f"payload has {len(payload)} bytes but T*c*4 = {want}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, c).astype(np.float32)
    return MotionSequence(id, data, fps)


def write_motion(path: str | Path, m: MotionSequence) -> None:
    _atomic_write(Path(path), motion_to_bytes(m))


def read_motion(path: str | Path) -> MotionSequence:
    path = Path(path)
    return motion_from_bytes(path.read_bytes(), id=path.stem)


@dataclass
class AnnotationRecord:
    motion_id: str | None
    step_texts: list[str]
    task_text: str
    scene_text: str
    segment_index: int
    scene_id: str
    family: str | None = None
    text_only: bool = False

    def __post_init__(self) -> None:
        if not self.step_texts:
            raise CorpusError(f"record {self.motion_id}: step_texts must be nonempty")
        if self.segment_index < 0:
            raise CorpusError(f"record {self.motion_id}: negative segment_index")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "AnnotationRecord":
        d = json.loads(line)
        return cls(
            motion_id=d.get("motion_id"),
            step_texts=list(d["step_texts"]),
            task_text=d["task_text"],
            scene_text=d["scene_text"],
            segment_index=int(d["segment_index"]),
            scene_id=d["scene_id"],
            family=d.get("family"),
            text_only=bool(d.get("text_only", False)),
        )


# --- action families -------------------------------------------------------

Recipe = Callable[[np.ndarray, dict], np.ndarray]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _walk(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    s = np.sin(w * t + ph)
    x[:, VEL_FWD] = A + 0.1 * np.sin(2 * w * t + ph)
    x[:, HEIGHT] = 0.05 * np.sin(2 * w * t + ph)
    x[:, HIP_L], x[:, HIP_R] = 0.5 * A * s, -0.5 * A * s
    x[:, KNEE_L] = 0.4 * A * (1 + np.sin(w * t + ph - 0.8))
    x[:, KNEE_R] = 0.4 * A * (1 - np.sin(w * t + ph - 0.8))
    x[:, SH_L], x[:, SH_R] = -0.3 * A * s, 0.3 * A * s
    x[:, SPINE] = 0.1
    return x


def _jump(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    lift = np.maximum(0.0, np.sin(w * t + ph)) ** 2
    crouch = np.maximum(0.0, -np.sin(w * t + ph)) ** 2
    x[:, HEIGHT] = 0.8 * A * lift - 0.2 * crouch
    x[:, KNEE_L] = x[:, KNEE_R] = 0.9 * A * crouch
    x[:, HIP_L] = x[:, HIP_R] = 0.6 * A * crouch
    x[:, SH_L] = x[:, SH_R] = 1.0 * A * lift
    x[:, SPINE] = -0.1 * crouch
    return x


def _wave(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    raise_ = _smoothstep(t / 0.6)
    x[:, SH_R] = 1.4 * raise_
    x[:, ELBOW_R] = raise_ * (0.6 + 0.5 * A * np.sin(w * t + ph))
    x[:, ROLL_R] = raise_ * 0.3 * A * np.sin(w * t + ph + 1.0)
    x[:, HEAD] = 0.15 * raise_
    return x


def _squat(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    d = 0.5 * (1 - np.cos(w * t + ph))
    x[:, HEIGHT] = -0.7 * A * d
    x[:, KNEE_L] = x[:, KNEE_R] = 1.3 * A * d
    x[:, HIP_L] = x[:, HIP_R] = 1.0 * A * d
    x[:, SH_L] = x[:, SH_R] = 0.8 * A * d
    x[:, SPINE] = 0.4 * A * d
    return x


def _turn(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    x[:, YAW] = 1.5 * A + 0.2 * np.sin(w * t + ph)
    x[:, VEL_SIDE] = 0.3 * np.sin(w * t + ph)
    x[:, HIP_L] = 0.2 * np.sin(w * t + ph)
    x[:, HIP_R] = -0.2 * np.sin(w * t + ph)
    x[:, HEAD] = 0.5 * A
    x[:, ROLL_L] = x[:, ROLL_R] = 0.2 * A
    return x


def _sit(t: np.ndarray, p: dict) -> np.ndarray:
    A, w, ph = p["amplitude"], 2 * np.pi * p["frequency"], p["phase"]
    x = np.zeros((len(t), CANONICAL_CHANNELS))
    down = _smoothstep((t - 0.2 * t[-1]) / max(0.35 * t[-1], 1e-6))
    x[:, HEIGHT] = -0.9 * A * down
    x[:, HIP_L] = x[:, HIP_R] = 1.4 * A * down
    x[:, KNEE_L] = x[:, KNEE_R] = 1.4 * A * down
    x[:, SPINE] = 0.2 * down + 0.05 * np.sin(w * t + ph)
    x[:, SH_L] = x[:, SH_R] = -0.2 * down
    return x


@dataclass
class ActionFamily:
    name: str
    keyword: str  # regex matched at a word start
    recipe: Recipe
    frequency: tuple[float, float]
    frames: tuple[int, int]
    step_pool: list[str]
    tasks: list[tuple[str, list[int]]]  # task text, indices into step_pool
    amplitude: tuple[float, float] = (0.8, 1.2)

    def sample_params(self, rng: np.random.Generator) -> dict:
        return {
            "amplitude": float(rng.uniform(*self.amplitude)),
            "frequency": float(rng.uniform(*self.frequency)),
            "phase": float(rng.uniform(0, 2 * np.pi)),
            "frames": int(rng.integers(self.frames[0], self.frames[1] + 1)),
        }

    def synthesize(self, params: dict, fps: int, noise: float, seed: int,
                   projection: np.ndarray | None = None) -> np.ndarray:
        t = np.arange(params["frames"]) / fps
        x = self.recipe(t, params)
        x = x + np.random.default_rng(seed).normal(0.0, noise, size=x.shape)
        if projection is not None:
            x = x @ projection
        return x.astype(np.float32)

    def matches(self, text: str) -> bool:
        return re.search(r"\b" + self.keyword, text.lower()) is not None


FAMILIES: dict[str, ActionFamily] = {
    f.name: f
    for f in [
        ActionFamily(
            "walk", "walk", _walk, (0.8, 1.2), (80, 200),
            ["start to walk forward", "walk with steady steps", "swing arms while walking",
             "walk a little faster", "stop walking"],
            [("walk forward", [0, 4]), ("walk to the door", [0, 1, 4]),
             ("take a short walk", [0, 1, 2, 4]), ("walk across the room", [0, 1, 2, 3, 4])],
        ),
        ActionFamily(
            "jump", "jump", _jump, (0.5, 0.9), (60, 160),
            ["bend knees to jump", "jump up high", "land after the jump", "jump again",
             "stand still after jumping"],
            [("jump once", [0, 1]), ("jump in place", [0, 1, 2]),
             ("do a few jumps", [0, 1, 2, 3]), ("jump over a line", [0, 1, 2, 3, 4])],
        ),
        ActionFamily(
            "wave", "wav", _wave, (1.5, 2.5), (40, 120),
            ["raise the right arm to wave", "wave the right hand", "wave side to side",
             "keep waving", "lower the arm after waving"],
            [("wave hello", [0, 1]), ("wave to a friend", [0, 1, 4]),
             ("wave goodbye", [0, 1, 2, 4]), ("wave at someone", [0, 1, 2, 3, 4])],
        ),
        ActionFamily(
            "squat", "squat", _squat, (0.4, 0.7), (60, 160),
            ["lower the hips to squat", "squat down deeply", "hold the squat",
             "rise from the squat", "squat once more"],
            [("do a squat", [0, 3]), ("squat down and up", [0, 1, 3]),
             ("do deep squats", [0, 1, 2, 3]), ("squat to stretch", [0, 1, 2, 3, 4])],
        ),
        ActionFamily(
            "turn", "turn", _turn, (0.8, 1.2), (40, 120),
            ["start to turn left", "turn the torso", "keep turning around", "finish the turn",
             "face forward after turning"],
            [("turn around", [0, 3]), ("turn to the left", [0, 1, 3]),
             ("turn to look back", [0, 1, 2, 3]), ("make a full turn", [0, 1, 2, 3, 4])],
        ),
        ActionFamily(
            "sit", "sit", _sit, (0.2, 0.4), (60, 160),
            ["bend knees to sit", "sit down slowly", "sit on the chair", "rest while sitting",
             "stay sitting"],
            [("sit down", [0, 1]), ("sit on a chair", [0, 1, 2]),
             ("sit to rest", [0, 1, 2, 3]), ("take a seat and sit", [0, 1, 2, 3, 4])],
        ),
    ]
}

SCENE_TEXTS = [
    "a morning in the park", "a visit to a friend", "an evening at home",
    "a session at the gym", "a break at the office", "a day at the beach",
    "a school sports class", "a wait at the station", "a party with friends",
    "a trip to the garden",
]


def family_of(text: str, families: list[str] | None = None) -> str | None:
    """First family whose keyword appears in ``text`` (earliest match wins)."""
    best, best_pos = None, None
    for name in families or list(FAMILIES):
        m = re.search(r"\b" + FAMILIES[name].keyword, text.lower())
        if m and (best_pos is None or m.start() < best_pos):
            best, best_pos = name, m.start()
    return best


# --- corpus generation -----------------------------------------------------

@dataclass
class CorpusConfig:
    families: list[str] = field(default_factory=lambda: list(FAMILIES))
    samples_per_family: int = 150
    channels: int = 16
    fps: int = 20
    min_frames: int = 40
    max_frames: int = 200
    tasks_per_scene: tuple[int, int] = (2, 6)
    max_steps: int = 5
    scene_types: int = 8
    noise: float = 0.01

    def validate(self) -> None:
        if len(self.families) < 4:
            raise CorpusError("need at least 4 action families")
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise CorpusError(f"unknown families: {unknown}")
        if len(set(self.families)) != len(self.families):
            raise CorpusError("duplicate families")
        lo, hi = self.tasks_per_scene
        if not 2 <= lo <= hi <= 6:
            raise CorpusError(f"tasks_per_scene must satisfy 2 <= lo <= hi <= 6, got {self.tasks_per_scene}")
        if not 1 <= self.max_steps <= 5:
            raise CorpusError("max_steps must be in [1, 5]")
        if self.samples_per_family < 1 or self.channels < 1 or self.fps < 1:
            raise CorpusError("samples_per_family, channels and fps must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise CorpusError("invalid frame range")
        if not 1 <= self.scene_types <= len(SCENE_TEXTS):
            raise CorpusError(f"scene_types must be in [1, {len(SCENE_TEXTS)}]")
        if self.noise < 0:
            raise CorpusError("noise must be >= 0")


@dataclass
class SceneType:
    text: str
    order: list[str]


@dataclass
class Corpus:
    root: Path | None
    meta: dict
    records: list[AnnotationRecord]
    motions: dict[str, MotionSequence]

    def scenes(self) -> dict[str, list[AnnotationRecord]]:
        out: dict[str, list[AnnotationRecord]] = {}
        for r in self.records:
            out.setdefault(r.scene_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.segment_index)
        return out

    def record(self, motion_id: str) -> AnnotationRecord:
        return self._index()[motion_id]

    def _index(self) -> dict[str, AnnotationRecord]:
        if not hasattr(self, "_idx"):
            self._idx = {r.motion_id: r for r in self.records}
        return self._idx

    def subset(self, motion_ids) -> "Corpus":
        keep = set(motion_ids)
        recs = [r for r in self.records if r.motion_id in keep]
        return Corpus(self.root, self.meta, recs, {k: v for k, v in self.motions.items() if k in keep})

    @property
    def scene_types(self) -> list[SceneType]:
        return [SceneType(s["text"], list(s["order"])) for s in self.meta.get("scene_types", [])]


def _projection(channels: int, seed: int) -> np.ndarray | None:
    if channels == CANONICAL_CHANNELS:
        return None
    rng = np.random.default_rng(seed + 99991)
    return rng.normal(0, 1.0 / np.sqrt(CANONICAL_CHANNELS), size=(CANONICAL_CHANNELS, channels))


def build_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Generate the corpus in memory; ``generate_corpus`` writes it to disk."""
    config.validate()
    rng = np.random.default_rng(seed)
    fams = list(config.families)
    n_types = config.scene_types
    texts = [SCENE_TEXTS[i] for i in rng.permutation(len(SCENE_TEXTS))[:n_types]]
    types = [SceneType(t, [fams[i] for i in rng.permutation(len(fams))]) for t in texts]
    proj = _projection(config.channels, seed)

    lo, hi = config.tasks_per_scene
    hi = min(hi, len(fams))
    lo = min(lo, hi)
    total = len(fams) * config.samples_per_family
    if total < 2:
        raise CorpusError("corpus needs at least 2 segments")

    records: list[AnnotationRecord] = []
    motions: dict[str, MotionSequence] = {}
    remaining, scene_no = total, 0
    while remaining > 0:
        n = int(rng.integers(lo, hi + 1))
        if remaining - n == 1:
            n = n + 1 if n < hi else n - 1
        n = min(n, remaining)
        st = types[int(rng.integers(n_types))]
        scene_id = f"scene{scene_no:04d}"
        for j, fam_name in enumerate(st.order[:n]):
            fam = FAMILIES[fam_name]
            params = fam.sample_params(rng)
            params["frames"] = int(np.clip(params["frames"], config.min_frames, config.max_frames))
            task_text, step_idx = fam.tasks[int(rng.integers(len(fam.tasks)))]
            steps = [fam.step_pool[i] for i in step_idx][: config.max_steps]
            mid = f"{scene_id}_{j:02d}"
            data = fam.synthesize(params, config.fps, config.noise, int(rng.integers(2**31)), proj)
            motions[mid] = MotionSequence(mid, data, config.fps)
            records.append(AnnotationRecord(mid, steps, task_text, st.text, j, scene_id, fam_name))
        remaining -= n
        scene_no += 1

    cfg = asdict(config)
    cfg["tasks_per_scene"] = list(config.tasks_per_scene)
    meta = {
        "format_version": 1,
        "seed": seed,
        "config": cfg,
        "scene_types": [asdict(s) for s in types],
        "families": {f: {"keyword": FAMILIES[f].keyword} for f in fams},
    }
    return Corpus(None, meta, records, motions)


def judge_rules(corpus: Corpus) -> dict:
    """Rule set for the offline judge: family keywords plus each scene's task order."""
    fams = corpus.meta["families"]
    return {
        "version": 1,
        "families": {f: v["keyword"] for f, v in fams.items()},
        "scenes": [{"text": s.text, "order": s.order} for s in corpus.scene_types],
    }


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    root = Path(root)
    try:
        (root / "motions").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {root}: {e}") from e
    for r in corpus.records:
        if r.motion_id is not None and r.motion_id in corpus.motions:
            write_motion(root / "motions" / f"{r.motion_id}.amot", corpus.motions[r.motion_id])
    lines = "".join(r.to_json() + "\n" for r in corpus.records)
    _atomic_write(root / "annotations.jsonl", lines.encode("utf-8"))
    _atomic_write(root / "meta.json", (json.dumps(corpus.meta, indent=2, sort_keys=True) + "\n").encode())
    if corpus.meta.get("scene_types"):
        rules = json.dumps(judge_rules(corpus), indent=2, sort_keys=True) + "\n"
        _atomic_write(root / "judge_rules.json", rules.encode())
    corpus.root = root
    return root


def generate_corpus(config: CorpusConfig, seed: int, root: str | Path) -> Path:
    return save_corpus(build_corpus(config, seed), root)


def load_corpus(root: str | Path) -> Corpus:
    """Load a corpus directory (ours or externally converted data in the same formats)."""
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise CorpusError(f"missing {ann}")
    records = [AnnotationRecord.from_json(line) for line in ann.read_text("utf-8").splitlines() if line.strip()]
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    motions: dict[str, MotionSequence] = {}
    mdir = root / "motions"
    files = {p.stem: p for p in mdir.glob("*.amot")} if mdir.exists() else {}
    seen: set[str] = set()
    for r in records:
        if r.text_only:
            continue
        if r.motion_id in seen:
            raise CorpusError(f"motion {r.motion_id} annotated twice")
        seen.add(r.motion_id)
        if r.motion_id not in files:
            raise CorpusError(f"annotation references missing motion {r.motion_id}")
        motions[r.motion_id] = read_motion(files[r.motion_id])
    orphans = set(files) - seen
    if orphans:
        raise CorpusError(f"motion files without annotation: {sorted(orphans)[:5]}")
    by_scene: dict[str, list[int]] = {}
    for r in records:
        by_scene.setdefault(r.scene_id, []).append(r.segment_index)
    for sid, idx in by_scene.items():
        if not all(r.text_only for r in records if r.scene_id == sid) and sorted(idx) != list(range(len(idx))):
            raise CorpusError(f"scene {sid} has non-contiguous segment indices {sorted(idx)}")
    return Corpus(root, meta, records, motions)


@dataclass
class Split:
    train: list[str]
    val: list[str]
    test: list[str]


def split_corpus(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Scene-level split: every segment of a scene lands in the same part."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    scenes = corpus.scenes()
    ids = sorted(scenes)
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise CorpusError(f"split of {n} scenes with ratios {ratios} leaves an empty part")
    parts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    out = []
    for part in parts:
        mids = [r.motion_id for i in sorted(part) for r in scenes[ids[i]]]
        out.append(mids)
    return Split(*out)
