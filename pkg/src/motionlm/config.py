"""Application config: one YAML tree, leaves overridable by MOTIONLM__SECTION__KEY variables."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .chat import ChatSettings
from .corpus import CorpusConfig
from .lm import LMConfig
from .pipeline import LoopConfig
from .tokenizer import VQConfig, VQTrainConfig
from .trainer import TrainConfig

ENV_PREFIX = "MOTIONLM__"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str = "runs/corpus"
    checkpoints: str = "runs/checkpoints"
    outputs: str = "runs/outputs"


@dataclass
class JudgeSettings:
    backend: str = "mock"  # mock | http
    rules: str | None = None
    parallelism: int = 4


@dataclass
class AppConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    vq_train: VQTrainConfig = field(default_factory=VQTrainConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    chat: ChatSettings = field(default_factory=ChatSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _coerce(value, current, where: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(current, tuple):
        return tuple(value)
    return value


def _merge(obj, tree: Mapping, where: str = ""):
    if not isinstance(tree, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in tree.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value or {}, path)
        else:
            setattr(obj, key, _coerce(value, current, path))


def env_overrides(env: Mapping[str, str]) -> dict:
    """MOTIONLM__TRAIN__STEPS=500 -> {"train": {"steps": 500}}; values parse as YAML scalars."""
    tree: dict = {}
    for k, v in env.items():
        if not k.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in k[len(ENV_PREFIX):].split("__")]
        if not all(parts):
            raise ConfigError(f"malformed override variable {k}")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(v)
    return tree


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> AppConfig:
    cfg = AppConfig()
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text("utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        _merge(cfg, tree)
    if env:
        _merge(cfg, env_overrides(env))
    cfg.corpus.validate()
    cfg.vq.validate()
    cfg.lm.validate()
    cfg.train.validate()
    cfg.loop.validate()
    if cfg.lm.motion_vocab != cfg.vq.codebook_size:
        raise ConfigError("lm.motion_vocab must equal vq.codebook_size")
    if cfg.lm.code_dim != cfg.vq.code_dim:
        raise ConfigError("lm.code_dim must equal vq.code_dim")
    if cfg.judge.backend not in ("mock", "http"):
        raise ConfigError("judge.backend must be mock or http")
    return cfg


def dump_config(cfg: AppConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True)
