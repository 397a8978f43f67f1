from __future__ import annotations

import pytest
import torch

from motionlm.corpus import CorpusConfig, build_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(CorpusConfig(samples_per_family=12), seed=3)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(_ACCEPTANCE[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
