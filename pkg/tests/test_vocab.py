from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from motionlm.vocab import (MOTION_CLOSE, MOTION_OPEN, TAGS, TASK_KINDS, TEXT_VOCAB_SIZE, MixedStream, StreamError,
                            decode_text, encode_text)

texts = st.text(st.characters(min_codepoint=32, max_codepoint=0x2FF), max_size=30)


@given(texts)
def test_text_round_trip(s):
    assert decode_text(encode_text(s), strict=True) == s


@given(st.lists(st.one_of(texts.map(lambda s: ("text", s)),
                          st.lists(st.integers(0, 511), max_size=8).map(lambda m: ("motion", m))), max_size=6))
def test_stream_segments_recover_parts(parts):
    stream = MixedStream()
    for kind, v in parts:
        stream = stream + (MixedStream.text(v) if kind == "text" else MixedStream.motion_span(v))
    stream.validate(motion_vocab=512)
    merged: list = []
    for kind, v in parts:
        if kind == "text":
            if not v:
                continue
            if merged and merged[-1][0] == "text":
                merged[-1] = ("text", merged[-1][1] + encode_text(v))
                continue
            merged.append(("text", encode_text(v)))
        else:
            merged.append(("motion", list(v)))
    assert list(stream.segments()) == merged


def test_vocab_layout():
    assert len(TAGS) == len(TASK_KINDS) == 11
    assert max(TAGS.values()) == TEXT_VOCAB_SIZE - 1


@pytest.mark.parametrize("stream", [
    MixedStream((MOTION_OPEN, 3), (False, True)),
    MixedStream((3,), (True,)),
    MixedStream((MOTION_CLOSE,), (False,)),
    MixedStream((MOTION_OPEN, MOTION_OPEN, MOTION_CLOSE), (False, False, False)),
    MixedStream((MOTION_OPEN, 65, MOTION_CLOSE), (False, False, False)),
    MixedStream((TEXT_VOCAB_SIZE,), (False,)),
    MixedStream.motion_span([600]),
])
def test_malformed_streams(stream):
    with pytest.raises(StreamError):
        stream.validate(motion_vocab=512)
