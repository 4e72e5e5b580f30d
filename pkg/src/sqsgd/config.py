"""Run configuration: an INI file with one section per concern."""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _f(section, default, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass
class RunConfig:
    # [data]
    dataset: str = _f("data", "synthetic")
    train_images: str = _f("data", "")
    train_labels: str = _f("data", "")
    test_images: str = _f("data", "")
    test_labels: str = _f("data", "")
    n_train: int = _f("data", 10000)
    n_test: int = _f("data", 2000)
    features: int = _f("data", 784)
    classes: int = _f("data", 10)
    margin: float = _f("data", 3.5)
    data_seed: int = _f("data", 0)
    # [model]
    arch: str = _f("model", "logreg")
    hidden: int = _f("model", 64)
    # [training]
    mode: str = _f("training", "sqsgd")
    clients: int = _f("training", 10)
    batch_size: int = _f("training", 32)
    epochs: float = _f("training", 1.0)
    rounds: int = _f("training", 0)
    lr: float = _f("training", 0.001)
    alpha: float = _f("training", 1.0)
    beta: float = _f("training", 1.0)
    initial_bound: float = _f("training", 10.0)
    seed: int = _f("training", 0)
    eval_every: int = _f("training", 1)
    # [privacy]
    private: bool = _f("privacy", True)
    epsilon: float = _f("privacy", 400.0)
    epsilon2: float = _f("privacy", 10.0)
    shrinkage: bool = _f("privacy", True)
    # [mechanism]
    levels: int = _f("mechanism", 16)
    sampling_ratio: float = _f("mechanism", 0.005)
    rotation: bool = _f("mechanism", True)
    sparsify: bool = _f("mechanism", True)
    # [output]
    output_dir: str = _f("output", "runs/default")

    def __post_init__(self):
        self.validate()

    @property
    def epsilon1(self) -> float:
        return self.epsilon - self.epsilon2 if self.shrinkage else self.epsilon

    @property
    def uses_idx(self) -> bool:
        return self.dataset == "idx"

    def validate(self) -> None:
        problems = []
        if self.dataset not in ("synthetic", "idx"):
            problems.append(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    problems.append(f"{name} is required when dataset = idx")
        if self.arch not in ("logreg", "mlp"):
            problems.append(f"arch must be 'logreg' or 'mlp', got {self.arch!r}")
        if self.mode not in ("sqsgd", "fedsgd"):
            problems.append(f"mode must be 'sqsgd' or 'fedsgd', got {self.mode!r}")
        if self.classes < 2:
            problems.append("classes must be >= 2")
        if self.clients < 1:
            problems.append("clients must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.rounds < 0 or not self.epochs > 0 and self.rounds == 0:
            problems.append("need epochs > 0 or rounds > 0")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if not self.initial_bound > 0:
            problems.append("initial_bound must be positive")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if self.levels < 2:
            problems.append("levels (K) must be >= 2")
        if not 0 < self.sampling_ratio <= 1:
            problems.append("sampling_ratio must lie in (0, 1]")
        if self.private:
            if not self.epsilon > 0:
                problems.append("epsilon must be positive")
            if self.shrinkage and not 0 < self.epsilon2 < self.epsilon:
                problems.append("need 0 < epsilon2 < epsilon when shrinkage is on")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(f, raw: str):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if math.isnan(value):
                raise ValueError(raw)
            return value
        return raw
    except ValueError:
        raise ConfigError(f"{f.metadata['section']}.{f.name}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            f = known.get(key)
            if f is None or f.metadata["section"] != section:
                raise ConfigError(f"unknown key {section}.{key}")
            values[key] = _convert(f, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def serialize_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for f in fields(RunConfig):
        section = f.metadata["section"]
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, f.name, _format(getattr(config, f.name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
