"""Byte-level text vocabulary with special tokens, and the mixed text/motion stream."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

TASK_KINDS = ("MG", "MU", "MiB", "CT2T", "T2S", "S2T", "T2C", "CT2S", "CS2T", "CS2S", "S2C")

N_BYTES = 256
SPECIAL_NAMES = ("pad", "bos", "eos", "motion_open", "motion_close", "sep", "step", "none")
SPECIALS = {name: N_BYTES + i for i, name in enumerate(SPECIAL_NAMES)}
TAGS = {kind: N_BYTES + len(SPECIAL_NAMES) + i for i, kind in enumerate(TASK_KINDS)}
TEXT_VOCAB_SIZE = N_BYTES + len(SPECIAL_NAMES) + len(TASK_KINDS)

PAD = SPECIALS["pad"]
BOS = SPECIALS["bos"]
EOS = SPECIALS["eos"]
MOTION_OPEN = SPECIALS["motion_open"]
MOTION_CLOSE = SPECIALS["motion_close"]
SEP = SPECIALS["sep"]
STEP = SPECIALS["step"]
NONE = SPECIALS["none"]
DIGITS = tuple(range(ord("0"), ord("9") + 1))


def encode_text(s: str) -> list[int]:
    return list(s.encode("utf-8"))


def decode_text(ids: Iterable[int], strict: bool = False) -> str:
    raw = bytes(i for i in ids if i < N_BYTES)
    return raw.decode("utf-8", errors="strict" if strict else "replace")


def token_name(i: int) -> str:
    if i < N_BYTES:
        return repr(chr(i)) if 32 <= i < 127 else f"0x{i:02x}"
    for name, v in SPECIALS.items():
        if v == i:
            return f"<{name}>"
    for kind, v in TAGS.items():
        if v == i:
            return f"<{kind}>"
    return f"<unk:{i}>"


class StreamError(ValueError):
    def __init__(self, msg: str, stream: "MixedStream | None" = None):
        super().__init__(msg)
        self.stream = stream


@dataclass(frozen=True)
class MixedStream:
    """Ordered text/motion elements; ``motion[i]`` marks element ``i`` as a motion id."""

    ids: tuple[int, ...] = ()
    motion: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.motion):
            raise StreamError("ids and modality flags differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "MixedStream") -> "MixedStream":
        return MixedStream(self.ids + other.ids, self.motion + other.motion)

    @classmethod
    def text(cls, s: str) -> "MixedStream":
        ids = tuple(encode_text(s))
        return cls(ids, (False,) * len(ids))

    @classmethod
    def tokens(cls, ids: Iterable[int]) -> "MixedStream":
        ids = tuple(ids)
        return cls(ids, (False,) * len(ids))

    @classmethod
    def motion_span(cls, ids: Iterable[int]) -> "MixedStream":
        ids = tuple(ids)
        return cls((MOTION_OPEN,) + ids + (MOTION_CLOSE,), (False,) + (True,) * len(ids) + (False,))

    def validate(self, text_vocab: int = TEXT_VOCAB_SIZE, motion_vocab: int | None = None) -> None:
        inside = False
        for i, (tok, is_m) in enumerate(zip(self.ids, self.motion)):
            if is_m:
                if not inside:
                    raise StreamError(f"motion id outside a motion span at {i}", self)
                if tok < 0 or (motion_vocab is not None and tok >= motion_vocab):
                    raise StreamError(f"motion id {tok} out of range at {i}", self)
                continue
            if not 0 <= tok < text_vocab:
                raise StreamError(f"text id {tok} out of range at {i}", self)
            if tok == MOTION_OPEN:
                if inside:
                    raise StreamError(f"nested motion-open at {i}", self)
                inside = True
            elif tok == MOTION_CLOSE:
                if not inside:
                    raise StreamError(f"motion-close without open at {i}", self)
                inside = False
            elif inside:
                raise StreamError(f"text id inside a motion span at {i}", self)
        if inside:
            raise StreamError("unclosed motion span", self)

    def segments(self) -> Iterator[tuple[str, list[int]]]:
        """Yield ("text", ids) runs and ("motion", ids) spans, markers removed."""
        self.validate()
        buf: list[int] = []
        span: list[int] | None = None
        for tok, is_m in zip(self.ids, self.motion):
            if span is not None:
                if is_m:
                    span.append(tok)
                else:  # close marker
                    yield "motion", span
                    span = None
            elif tok == MOTION_OPEN:
                if buf:
                    yield "text", buf
                    buf = []
                span = []
            else:
                buf.append(tok)
        if buf:
            yield "text", buf

    def describe(self) -> str:
        out = []
        for tok, is_m in zip(self.ids, self.motion):
            out.append(f"m{tok}" if is_m else token_name(tok))
        return " ".join(out)
