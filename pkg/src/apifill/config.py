"""Run configuration: one JSON or TOML file, flag overrides on top.

The resolved configuration is embedded into every emitted report so a run can
be replayed from its artifacts alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .advaug import METHODS
from .model import ModelConfig


@dataclass
class ModelSettings:
    """Architecture knobs; vocab size and seed are filled in at train time."""
    encoder_layers: int = 2
    decoder_layers: int = 2
    hidden_size: int = 128
    heads: int = 4
    ffn_size: int = 256
    max_input_length: int = 48
    max_output_length: int = 16
    dtype: str = "float32"

    def to_model_config(self, vocab_size, seed):
        return ModelConfig(vocab_size=vocab_size, seed=seed, **asdict(self))


@dataclass
class AdvSettings:
    method: str = "none"
    epsilon: float = 1.0
    k_adv: int = 4
    alpha: float = 0.3
    include_clean: bool = True
    atcom_literal: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class TrainSettings:
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    max_epochs: int = 50
    patience: int = 5
    adv: AdvSettings = field(default_factory=AdvSettings)


@dataclass
class DecodeSettings:
    beam_width: int = 10
    top: int = 5
    need: int = 5           # APICheck keeps scanning until this many valid
    prefix_mode: int = 1    # leading API words revealed at eval; 0 = no prompt
    require_prefix: bool = False


@dataclass
class SplitSettings:
    train_ratio: float = 0.8
    valid_ratio: float = 0.1
    test_ratio: float = 0.1


@dataclass
class SweepSettings:
    methods: list = field(default_factory=list)
    k_values: list = field(default_factory=list)
    prefix_modes: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str | None = None
    workdir: str = "apifill-run"
    api_library: str | None = None
    vocab_size: int = 2000
    prompts_per_api: int = 3
    split: SplitSettings = field(default_factory=SplitSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "split": SplitSettings,
    "model": ModelSettings,
    "train": TrainSettings,
    "decode": DecodeSettings,
    "sweep": SweepSettings,
}


def _build(cls, data, path="config"):
    """Instantiate a settings dataclass from a dict, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown key {path}.{key}")
        if key == "adv" and isinstance(value, dict):
            value = _build(AdvSettings, value, f"{path}.adv")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None, overrides=None) -> RunConfig:
    """defaults < config file < overrides (a flat dict of dotted keys)."""
    data = {}
    if path is not None:
        if str(path).endswith(".toml"):
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)

    cfg_kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a table/object")
            cfg_kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key in {f.name for f in fields(RunConfig)}:
            cfg_kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg = RunConfig(**cfg_kwargs)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            target = getattr(target, p)
        if not hasattr(target, parts[-1]):
            raise ValueError(f"unknown override {dotted!r}")
        setattr(target, parts[-1], value)
    # re-validate after overrides
    if cfg.train.adv.method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    return cfg
