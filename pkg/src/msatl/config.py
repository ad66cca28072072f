"""Run configuration: an INI file with one section per module.

Example::

    [data]
    corpus_dir = toy
    split = 0.6, 0.2, 0.2

    [model]
    depth = 4
    base_width = 8

    [train]
    epochs = 50
    seed = 0
    out_dir = runs/msatl

Relative paths are resolved against the config file's directory.  Unknown
sections or keys are rejected, and every value is validated before any
work starts.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

from .data import ToyConfig
from .model import ModelConfig
from .trainer import TrainConfig, model_config_for


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus_dir: Optional[Path] = None
    target_dir: Optional[Path] = None
    source_dirs: List[Path] = field(default_factory=list)
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0

    def validate(self) -> None:
        if len(self.split) != 3 or any(r < 0 for r in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError(f"[data] split must be three non-negative ratios summing to 1, "
                              f"got {self.split}")
        if self.corpus_dir is not None and (self.target_dir or self.source_dirs):
            raise ConfigError("[data] give either corpus_dir or target_dir/source_dirs, not both")

    def resolve(self) -> Tuple[Path, List[Path]]:
        """Target directory and ordered source directories."""
        if self.corpus_dir is not None:
            def index(p: Path) -> int:
                return int(p.name.split("_", 1)[1])

            sources = sorted((p for p in self.corpus_dir.glob("source_*")
                              if p.is_dir() and re.fullmatch(r"source_\d+", p.name)), key=index)
            return self.corpus_dir / "target", sources
        if self.target_dir is None or not self.source_dirs:
            raise ConfigError("[data] needs corpus_dir, or target_dir plus source_dirs")
        return self.target_dir, list(self.source_dirs)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    toy_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Optional[Path] = None

    def validate(self) -> None:
        self.data.validate()
        try:
            self.toy.validate()
            self.train.validate()
            self.model_config(self.model.N).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self, N: int) -> ModelConfig:
        return model_config_for(self.train, replace(self.model, N=N))


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


# section -> key -> (parser, attribute path)
_SCHEMA = {
    "data": {
        "corpus_dir": ("path", "data.corpus_dir"),
        "target_dir": ("path", "data.target_dir"),
        "source_dirs": ("paths", "data.source_dirs"),
        "split": (_floats, "data.split"),
        "split_seed": (int, "data.split_seed"),
    },
    "toy": {
        "image_size": (int, "toy.image_size"),
        "n_target": (int, "toy.n_target"),
        "n_source": (int, "toy.n_source"),
        "n_parts": (int, "toy.n_parts"),
        "noise_mean": (float, "toy.noise_mean"),
        "noise_variance": (float, "toy.noise_variance"),
        "seed": (int, "toy_seed"),
    },
    "model": {
        "image_size": (int, "model.image_size"),
        "depth": (int, "model.depth"),
        "base_width": (int, "model.base_width"),
        "classifier_hidden": (int, "model.classifier_hidden"),
        "classifier_input": (str, "model.classifier_input"),
    },
    "train": {
        "epochs": (int, "train.epochs"),
        "learning_rate": (float, "train.learning_rate"),
        "seed": (int, "train.seed"),
        "lambda": (float, "train.lam"),
        "sub_batch_size": (int, "train.sub_batch_size"),
        "ablation": (str, "train.ablation"),
        "supervision_mode": (str, "train.supervision_mode"),
        "out_dir": ("path", "out_dir"),
    },
}


def _set(cfg: RunConfig, path: str, value) -> None:
    *owners, attr = path.split(".")
    obj = cfg
    for name in owners:
        obj = getattr(obj, name)
    setattr(obj, attr, value)


def parse_config(text: str, base_dir=".") -> RunConfig:
    base_dir = Path(base_dir)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]; known: {sorted(_SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; known: "
                                  f"{sorted(_SCHEMA[section])}")
            kind, path = _SCHEMA[section][key]
            try:
                if kind == "path":
                    value = base_dir / raw.strip()
                elif kind == "paths":
                    value = [base_dir / p.strip() for p in raw.split(",") if p.strip()]
                else:
                    value = kind(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
            _set(cfg, path, value)
    cfg.model.lam = cfg.train.lam
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)
