"""
INI configuration for the synthetic channel, preprocessing and training.

Each section maps onto one dataclass; keys are field names and values are
Python literals (``0.15``, ``(0, 600)``, ``"default"``; bare words are
taken as strings)::

    [channel]
    nlos_prob = 0.15
    snr_db = 20

    [train]
    epochs = 30
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field

from .charting import TrainConfig
from .preprocess import PreprocessConfig
from .synth import ChannelConfig


class ConfigError(ValueError):
    code = "CONFIG_ERROR"


SECTIONS = {"channel": ChannelConfig, "preprocess": PreprocessConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def build(cls, values: dict, where: str = ""):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    extra = sorted(set(parser.sections()) - set(SECTIONS))
    if extra:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(extra)}")
    parts = {}
    for name, cls in SECTIONS.items():
        values = {k: _literal(v) for k, v in parser.items(name)} if parser.has_section(name) else {}
        parts[name] = build(cls, values, f"{source} [{name}]: ")
    return RunConfig(**parts)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))


def override(obj, **changes):
    """Copy of a config dataclass with the non-None changes applied."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    return build(type(obj), {**dataclasses.asdict(obj), **changes})


def dump_config(config: RunConfig) -> str:
    lines = []
    for name, values in config.to_dict().items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v!r}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
