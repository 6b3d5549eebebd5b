"""Training configuration: dataclass schema, INI file I/O and dotted overrides.

A config file has four sections whose keys are the dataclass field names::

    [train]
    epochs = 30
    lambda = 1e-4
    strategy = label_aware

    [model]
    arch = tiny_cnn

    [data]
    kind = digits

    [augment]
    pad = 2

Overrides are ``key=value`` strings. A bare key addresses ``[train]``; a dotted
key (``model.arch``) addresses another section. Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field

from .data import AugmentConfig
from .models import ModelSpec

STRATEGIES = ("baseline", "instance", "label_aware", "min_fre")
LATENT_BRANCH = ("auto", "on", "off")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "cifar10"
    path: str = ""
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 0.005
    lam: float = field(default=1e-4, metadata={"key": "lambda"})
    weight_decay: float = 1e-6
    seed: int = 0
    strategy: str = "label_aware"
    projection: bool = True
    clamp_latent: bool = False
    # min_fre regularizer weight
    mu_fre: float = 1.0
    # auto: run the latent branch only when the strategy consumes its output
    latent_branch: str = "auto"
    checkpoint_every: int = 0
    eval_batch_size: int = 500
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.latent_branch not in LATENT_BRANCH:
            raise ConfigError(f"latent_branch must be one of {LATENT_BRANCH}, got {self.latent_branch!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs, batch_size and eval_batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.lam < 0 or self.weight_decay < 0 or self.mu_fre < 0:
            raise ConfigError("lambda, weight_decay and mu_fre must be non-negative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.latent_branch == "off" and self.strategy != "baseline":
            raise ConfigError(f"strategy {self.strategy!r} needs the latent branch")

    def uses_latent(self):
        if self.latent_branch == "auto":
            return self.strategy != "baseline"
        return self.latent_branch == "on"


SECTIONS = {"model": ModelSpec, "data": DataConfig, "augment": AugmentConfig}


def _key(f):
    return f.metadata.get("key", f.name)


def _scalar_fields(cls):
    hints = typing.get_type_hints(cls)
    return [(f, hints[f.name]) for f in dataclasses.fields(cls) if f.name not in SECTIONS]


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text, hint, where):
    text = text.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def _section_values(cls, items, section):
    fields = {_key(f): (f, hint) for f, hint in _scalar_fields(cls)}
    out = {}
    for key, text in items:
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known keys: {sorted(fields)}")
        f, hint = fields[key]
        out[f.name] = _parse(text, hint, f"{section}.{key}")
    return out


def _build(sections):
    try:
        sub = {name: cls(**sections.get(name, {})) for name, cls in SECTIONS.items()}
        return TrainConfig(**sections.get("train", {}), **sub)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _split_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    section, _, name = key.rpartition(".")
    section = section or "train"
    if section not in ("train",) + tuple(SECTIONS):
        raise ConfigError(f"unknown config section {section!r} in override {text!r}")
    return section, name, value


def load_config(text=None, overrides=()):
    """Parse INI ``text`` (or defaults when None) and apply dotted overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    raw = {}
    for section in parser.sections():
        if section != "train" and section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        raw[section] = dict(parser.items(section))
    for ov in overrides:
        section, name, value = _split_override(ov)
        raw.setdefault(section, {})[name] = value
    classes = {"train": TrainConfig, **SECTIONS}
    parsed = {s: _section_values(classes[s], items.items(), s) for s, items in raw.items()}
    return _build(parsed)


def read_config(path, overrides=()):
    with open(path) as f:
        return load_config(f.read(), overrides)


def dump_config(cfg: TrainConfig):
    """Fully resolved INI text; ``load_config(dump_config(c)) == c``."""
    buf = io.StringIO()
    for section, obj in [("train", cfg)] + [(s, getattr(cfg, s)) for s in SECTIONS]:
        buf.write(f"[{section}]\n")
        for f, _ in _scalar_fields(type(obj)):
            buf.write(f"{_key(f)} = {_format(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: TrainConfig):
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def schema_help():
    """Every key with its default, for ``--help``."""
    return dump_config(TrainConfig())
