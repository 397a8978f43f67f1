"""Logical coherence scoring with a pluggable judge (rule-based mock or chat endpoint)."""
from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

from ..chat import ChatClient, ChatError


class JudgeError(RuntimeError):
    pass


@dataclass
class JudgePair:
    kind: str
    condition: dict  # e.g. {"scene": ..., "history": ...} or {"task": ...}
    candidate: str


@dataclass
class LCSResult:
    score: float
    n: int
    failures: int
    verdicts: list[bool | None] = field(default_factory=list)


def parse_verdict(reply: str) -> bool | None:
    r = reply.strip().upper()
    if r == "COHERENT":
        return True
    if r == "INCOHERENT":
        return False
    return None


def judge_prompt(pair: JudgePair) -> str:
    template = resources.files("motionlm").joinpath("templates", "judge_v1.txt").read_text("utf-8")
    cond = "\n".join(f"{k}: {v}" for k, v in pair.condition.items())
    return template.format(kind=pair.kind, condition=cond, candidate=pair.candidate)


class JudgeClient(Protocol):
    def ask(self, pair: JudgePair) -> str: ...


class ConstantJudge:
    def __init__(self, reply: str = "COHERENT"):
        self.reply = reply

    def ask(self, pair: JudgePair) -> str:
        return self.reply


class RuleJudge:
    """Offline judge driven by the corpus rule file (family keywords and scene task orders).

    Planning pairs are coherent when the candidate's family is the scene's next
    family after the history task; every other pair when the families agree.
    """

    def __init__(self, rules: dict | str | Path):
        if not isinstance(rules, dict):
            rules = json.loads(Path(rules).read_text("utf-8"))
        self.keywords = rules["families"]
        self.orders = {s["text"]: s["order"] for s in rules.get("scenes", [])}

    def family(self, text: str) -> str | None:
        best, pos = None, None
        for name, kw in self.keywords.items():
            m = re.search(r"\b" + kw, text.lower())
            if m and (pos is None or m.start() < pos):
                best, pos = name, m.start()
        return best

    def expected(self, pair: JudgePair) -> str | None:
        c = pair.condition
        if pair.kind == "CT2T":
            order = self.orders.get(c.get("scene", ""))
            if order is None:
                return None
            hist = c.get("history", "")
            if not hist:
                return order[0]
            f = self.family(hist)
            if f not in order or order.index(f) + 1 >= len(order):
                return None
            return order[order.index(f) + 1]
        for key in ("task", "step", "text"):
            if key in c:
                return self.family(c[key])
        return None

    def ask(self, pair: JudgePair) -> str:
        exp = self.expected(pair)
        ok = exp is not None and self.family(pair.candidate) == exp
        return "COHERENT" if ok else "INCOHERENT"


class ChatJudge:
    def __init__(self, client: ChatClient):
        self.client = client

    def ask(self, pair: JudgePair) -> str:
        return self.client.complete([{"role": "user", "content": judge_prompt(pair)}], temperature=0.0)


def _verdict(judge: JudgeClient, pair: JudgePair) -> bool | None:
    for _ in range(2):  # one retry on unparseable replies or transport failure
        try:
            v = parse_verdict(judge.ask(pair))
        except ChatError:
            v = None
        if v is not None:
            return v
    return None


def lcs_score(pairs: Sequence[JudgePair], judge: JudgeClient, parallelism: int = 4) -> LCSResult:
    """Fraction judged coherent; pairs without a parseable verdict are excluded and counted."""
    if not pairs:
        raise JudgeError("no pairs to judge")
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        verdicts = list(pool.map(lambda p: _verdict(judge, p), pairs))
    good = [v for v in verdicts if v is not None]
    if not good:
        raise JudgeError(f"all {len(pairs)} judge replies were unparseable")
    return LCSResult(sum(good) / len(good), len(good), len(verdicts) - len(good), verdicts)
