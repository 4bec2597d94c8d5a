"""Run configuration.

Every setting has a dotted key (``diffusion.T``, ``model.levels``, ...). On
disk the config is an INI file where ``[section]`` + ``key = value`` spells
the dotted key ``section.key``::

    [diffusion]
    T = 1000
    beta_start = 0.0001

Tuple values are written comma separated (``rotation_deg = -30, 30``).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .dataio import AugmentationConfig
from .denoiser import ModelConfig
from .labelcodec import channels
from .schedule import NoiseSchedule, build_schedule


class ConfigError(ValueError):
    pass


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelOptions:
    levels: int = 3
    base_channels: int = 32
    time_embed_dim: int = 128
    shape_prior: bool = True


@dataclass
class DataConfig:
    classes: int = 2
    label_coding: str = "signed_single"
    train_frac: float = 0.7
    split_seed: int = 35


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 35
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    checkpoint_interval: int = 50
    augment: bool = True
    lr_schedule: str = "constant"
    ema: bool = False
    ema_decay: float = 0.999
    max_steps: int = 0


@dataclass
class SampleConfig:
    n: int = 5
    seed: int = 0
    fusion: str = "mean"
    threshold: float = 0.0
    chunk: int = 32


@dataclass
class SynthConfig:
    count: int = 200
    seed: int = 35
    height: int = 192
    width: int = 64
    vertebrae: int = 10
    occlude: float = 0.3


@dataclass
class Config:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def schedule(self) -> NoiseSchedule:
        d = self.diffusion
        return build_schedule(d.T, d.beta_start, d.beta_end)

    def model_config(self, image_channels: int = 1) -> ModelConfig:
        m = self.model
        return ModelConfig(
            levels=m.levels,
            base_channels=m.base_channels,
            time_embed_dim=m.time_embed_dim,
            shape_prior=m.shape_prior,
            image_channels=image_channels,
            label_channels=channels(self.data.classes, self.data.label_coding),
            timesteps=self.diffusion.T,
        )

    # -- flat dotted view ----------------------------------------------------

    def to_flat(self) -> dict:
        flat = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                flat[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return flat

    @classmethod
    def from_flat(cls, values: dict, base: "Config | None" = None) -> "Config":
        base = base or cls()
        sections = {sec.name: {} for sec in fields(base)}
        for key, raw in values.items():
            sec, _, name = key.partition(".")
            if sec not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(base, sec)
            known = {f.name for f in fields(obj)}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(key, raw, getattr(obj, name))
        try:
            cfg = cls(**{sec: replace(getattr(base, sec), **kv) for sec, kv in sections.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.schedule()
            channels(self.data.classes, self.data.label_coding)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        t, s = self.train, self.sample
        checks = [
            (self.model.levels >= 1, "model.levels must be >= 1"),
            (self.model.base_channels >= 1, "model.base_channels must be >= 1"),
            (self.model.time_embed_dim >= 1, "model.time_embed_dim must be >= 1"),
            (0 < self.data.train_frac < 1, "data.train_frac must lie in (0, 1)"),
            (t.epochs >= 0, "train.epochs must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.learning_rate >= 0, "train.learning_rate must be >= 0"),
            (t.checkpoint_interval >= 0, "train.checkpoint_interval must be >= 0"),
            (t.lr_schedule in ("constant", "cosine"), "train.lr_schedule must be constant or cosine"),
            (0 < t.ema_decay < 1, "train.ema_decay must lie in (0, 1)"),
            (t.max_steps >= 0, "train.max_steps must be >= 0"),
            (s.n >= 1, "sample.n must be >= 1"),
            (s.fusion in ("mean", "vote"), "sample.fusion must be mean or vote"),
            (s.chunk >= 1, "sample.chunk must be >= 1"),
            (self.synth.count >= 1, "synth.count must be >= 1"),
            (self.synth.vertebrae >= 1, "synth.vertebrae must be >= 1"),
            (0 <= self.synth.occlude <= 1, "synth.occlude must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- INI text ------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for key, value in self.to_flat().items():
            sec, _, name = key.partition(".")
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, name, _format(value))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value) if not isinstance(value, float) else repr(value)


def _coerce(key: str, raw, default):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = raw if isinstance(raw, (tuple, list)) else str(raw).split(",")
            vals = tuple(float(p) for p in parts)
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values, got {len(vals)}")
            return vals
        return str(raw).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def read_ini(path) -> dict:
    """Parse an INI config file into a flat ``{dotted_key: str}`` dict."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {f"{sec}.{k}": v for sec in cp.sections() for k, v in cp.items(sec)}


def load_config(path=None, overrides: dict | None = None) -> Config:
    values = read_ini(path) if path else {}
    values.update(overrides or {})
    return Config.from_flat(values)
