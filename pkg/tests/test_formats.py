from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from motionlm.checkpoint import CheckpointError, Section, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from motionlm.corpus import (BadMagicError, CorpusError, MotionFormatError, MotionSequence, ShapeMismatchError,
                             TruncatedPayloadError, load_corpus, motion_from_bytes, motion_to_bytes, read_motion,
                             save_corpus, write_motion)

finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 20)), elements=finite),
       st.integers(1, 240))
def test_amot_round_trip_is_bit_exact(data, fps):
    m = MotionSequence("x", data, fps)
    buf = motion_to_bytes(m)
    back = motion_from_bytes(buf)
    assert back.data.tobytes() == data.tobytes() and back.fps == fps
    assert motion_to_bytes(back) == buf


def test_amot_file_round_trip(tmp_path):
    m = MotionSequence("walk", np.random.default_rng(0).normal(size=(33, 16)), 20)
    write_motion(tmp_path / "walk.amot", m)
    back = read_motion(tmp_path / "walk.amot")
    assert back.id == "walk" and np.array_equal(back.data, m.data)


@pytest.mark.parametrize("mutate,err", [
    (lambda b: b"XMOT" + b[4:], BadMagicError),
    (lambda b: b[:10], TruncatedPayloadError),
    (lambda b: b[:-4], TruncatedPayloadError),
    (lambda b: b + b"\0\0\0\0", ShapeMismatchError),
    (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], MotionFormatError),
    (lambda b: b[:8] + (0).to_bytes(4, "little") + b[12:], ShapeMismatchError),
])
def test_amot_error_taxonomy(mutate, err):
    buf = motion_to_bytes(MotionSequence("a", np.ones((4, 3)), 20))
    with pytest.raises(err):
        motion_from_bytes(mutate(buf))


def test_motion_rejects_non_finite():
    with pytest.raises(ValueError):
        MotionSequence("a", np.array([[np.nan]]))


def _sections():
    rng = np.random.default_rng(1)
    return {
        "tokenizer": Section({"a": 1}, {"w": rng.normal(size=(3, 4)).astype(np.float32),
                                        "n": np.arange(5)}, {"note": "x"}),
        "lm": Section({"b": [1, 2]}, {"e": rng.normal(size=(2,)).astype(np.float32)}),
    }


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    secs = _sections()
    path = save_checkpoint(tmp_path / "m.ckpt", secs)
    back = load_checkpoint(path)
    assert set(back) == set(secs)
    for name, sec in secs.items():
        assert back[name].config == sec.config and back[name].extra == sec.extra
        for k, v in sec.tensors.items():
            assert back[name].tensors[k].tobytes() == np.asarray(v).astype(back[name].tensors[k].dtype).tobytes()
    assert to_bytes(back) == path.read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOPE" + b[4:],
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
    lambda b: b[:20],
    lambda b: b[:-3],
    lambda b: b[:12] + b"{" * 10 + b[22:],
])
def test_checkpoint_malformed(mutate):
    with pytest.raises(CheckpointError):
        from_bytes(mutate(to_bytes(_sections())))


def test_corpus_save_load_round_trip(tmp_path, small_corpus):
    root = save_corpus(small_corpus, tmp_path / "c")
    back = load_corpus(root)
    assert [r.to_json() for r in back.records] == [r.to_json() for r in small_corpus.records]
    for k, m in small_corpus.motions.items():
        assert back.motions[k].data.tobytes() == m.data.tobytes()


def test_corpus_loader_errors(tmp_path, small_corpus):
    root = save_corpus(small_corpus, tmp_path / "c")
    victim = sorted((root / "motions").glob("*.amot"))[0]
    victim.rename(root / "motions" / "orphan.amot")
    with pytest.raises(CorpusError, match="missing motion"):
        load_corpus(root)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "nowhere")
