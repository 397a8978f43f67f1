from __future__ import annotations

import numpy as np
import pytest

from motionlm.corpus import FAMILIES, CorpusConfig, CorpusError, build_corpus, family_of, split_corpus


def test_build_is_deterministic():
    a = build_corpus(CorpusConfig(samples_per_family=5), 11)
    b = build_corpus(CorpusConfig(samples_per_family=5), 11)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert all(np.array_equal(a.motions[k].data, b.motions[k].data) for k in a.motions)


def test_scene_structure(small_corpus):
    cfg = CorpusConfig()
    assert len(small_corpus.records) == len(FAMILIES) * 12
    for sid, recs in small_corpus.scenes().items():
        assert [r.segment_index for r in recs] == list(range(len(recs)))
        assert len({r.scene_text for r in recs}) == 1
        fams = [r.family for r in recs]
        assert len(set(fams)) == len(fams)
        for r in recs:
            assert 1 <= len(r.step_texts) <= cfg.max_steps
            assert family_of(r.task_text) == r.family
            assert all(family_of(s) == r.family for s in r.step_texts)
            m = small_corpus.motions[r.motion_id]
            assert cfg.min_frames <= m.frames <= cfg.max_frames and m.channels == 16


def test_scene_order_follows_scene_type(small_corpus):
    order = {s.text: s.order for s in small_corpus.scene_types}
    for recs in small_corpus.scenes().values():
        assert [r.family for r in recs] == order[recs[0].scene_text][: len(recs)]


def test_split_is_scene_disjoint(small_corpus):
    sp = split_corpus(small_corpus, (0.8, 0.1, 0.1), 0)
    scene = {r.motion_id: r.scene_id for r in small_corpus.records}
    parts = [{scene[m] for m in p} for p in (sp.train, sp.val, sp.test)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert len(sp.train) + len(sp.val) + len(sp.test) == len(small_corpus.records)


def test_projected_channels():
    c = build_corpus(CorpusConfig(samples_per_family=2, channels=5), 0)
    assert all(m.channels == 5 for m in c.motions.values())


@pytest.mark.parametrize("bad", [
    dict(families=["walk", "jump"]), dict(tasks_per_scene=(1, 3)), dict(max_steps=6),
    dict(families=["walk", "jump", "sit", "fly"]), dict(noise=-1.0),
])
def test_config_validation(bad):
    with pytest.raises(CorpusError):
        CorpusConfig(**bad).validate()


def test_family_of_earliest_keyword():
    assert family_of("jump then walk") == "jump"
    assert family_of("waving hands") == "wave"
    assert family_of("stand there") is None
