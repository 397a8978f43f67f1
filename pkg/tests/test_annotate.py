from __future__ import annotations

import json

import httpx
import pytest

from motionlm.annotate import (ChatBackend, MockBackend, SegmentHandle, annotate_segment, annotate_video,
                               package_dataset, read_standins, segment_bounds, standins_from_corpus, write_standins)
from motionlm.chat import ChatClient, ChatSettings
from motionlm.corpus import load_corpus


def test_segment_bounds():
    assert segment_bounds(450, 20) == [(0, 200), (200, 400), (400, 450)]
    assert segment_bounds(200, 20) == [(0, 200)]


def test_mock_annotation_is_deterministic_and_offline(tmp_path, small_corpus):
    videos = standins_from_corpus(small_corpus)
    root = write_standins(videos, tmp_path / "standins")
    assert read_standins(root) == videos

    def run(out):
        anns = [annotate_video(v, hs, MockBackend(), 6, 20, parallelism=3) for v, hs in videos.items()]
        return package_dataset(anns, out, {"mode": "mock"})

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    for name in ("annotations.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    n_segments = sum(len(hs) for hs in videos.values())
    lines = (a / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 6 * n_segments
    rec = json.loads(lines[0])
    assert rec["text_only"] and rec["motion_id"] is None
    assert rec["scene_text"].startswith("a scene where the person does: ")
    # the package loads as a text-only corpus
    assert len(load_corpus(a).records) == len(lines)


def test_mock_backend_rules():
    h = SegmentHandle("v", 0, "The person will walk forward slowly to the far door now. Then stop.")
    ann = annotate_segment(h, MockBackend(), rounds=2)
    assert ann.steps[0] == ["The person will walk forward slowly to the far door now", "Then stop"]
    assert ann.tasks[0] == "The person will walk forward slowly to the"
    assert annotate_segment(SegmentHandle("v", 1), MockBackend()).error


def test_chat_backend_via_mock_transport():
    def handler(req):
        prompt = json.loads(req.content)["messages"][0]["content"]
        if "step by step" in prompt:
            text = "1. bend knees\n2. jump up"
        else:
            text = "jump in place"
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    client = ChatClient(ChatSettings(), httpx.MockTransport(handler))
    video = annotate_video("v", [SegmentHandle("v", 0, "A person jumps.")], ChatBackend(client), 2, 3)
    seg = video.segments[0]
    assert seg.error is None and len(seg.tasks) == 2 and len(video.scenes) == 3


def test_failed_segments_are_recorded(tmp_path):
    failing = ChatClient(ChatSettings(attempts=1), httpx.MockTransport(lambda r: httpx.Response(500)))
    video = annotate_video("v", [SegmentHandle("v", 0, "x.")], ChatBackend(failing), 1, 1)
    out = package_dataset([video], tmp_path)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["records"] == 0 and manifest["failures"][0]["segment"] == 0
