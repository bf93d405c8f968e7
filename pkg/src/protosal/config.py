"""Run configuration: an INI file whose sections map onto the module
config dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import ModelConfig, TrainConfig
from .data import AugmentConfig, SyntheticConfig
from .metrics import MetricConfig
from .protopnet import LossWeights, PhaseSchedule, PrototypeLayerConfig
from .saliency import METHODS, MethodConfig

ARCHITECTURES = {"plain": False, "skip": True}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass
class RunSettings:
    seed: int = 0
    out: str = "runs/default"
    jobs: int = 1
    architectures: tuple = ("plain",)


@dataclass
class DataSource:
    source: str = "synthetic"            # or "directory"
    image_dir: str = ""
    train_labels: str = ""
    val_labels: str = ""
    test_labels: str = ""


@dataclass
class ExplainSettings:
    n_images: int = 100
    image_class: str = "all"             # all, benign or malignant
    n_prototypes: int = 4
    methods: tuple = METHODS
    overlay_images: int = 4
    json_export: bool = False


@dataclass
class ModelSettings:
    conv_blocks: int = 4
    channels: tuple = (16, 32, 64, 128)


SECTIONS = {
    "run": RunSettings,
    "data": DataSource,
    "synthetic": SyntheticConfig,
    "augment": AugmentConfig,
    "model": ModelSettings,
    "train": TrainConfig,
    "prototypes": PrototypeLayerConfig,
    "loss": LossWeights,
    "schedule": PhaseSchedule,
    "methods": MethodConfig,
    "metrics": MetricConfig,
    "explain": ExplainSettings,
}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataSource = field(default_factory=DataSource)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    prototypes: PrototypeLayerConfig = field(default_factory=PrototypeLayerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    methods: MethodConfig = field(default_factory=MethodConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    explain: ExplainSettings = field(default_factory=ExplainSettings)

    @property
    def out(self) -> Path:
        return Path(self.run.out)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one global seed into every seeded section."""
        cfg = dataclasses.replace(self)
        cfg.run = dataclasses.replace(self.run, seed=seed)
        for name in ("synthetic", "augment", "train", "schedule", "methods", "metrics"):
            setattr(cfg, name, dataclasses.replace(getattr(self, name), seed=seed))
        return cfg

    def model_config(self, arch: str) -> ModelConfig:
        size = self.synthetic.size
        return ModelConfig(self.model.conv_blocks, tuple(self.model.channels), ARCHITECTURES[arch], (size, size, 3), 2)

    def validate(self) -> None:
        if self.run.jobs < 1:
            raise ConfigError("[run] jobs must be >= 1")
        bad = [a for a in self.run.architectures if a not in ARCHITECTURES]
        if bad or not self.run.architectures:
            raise ConfigError(f"[run] architectures must be drawn from {sorted(ARCHITECTURES)}, got {bad or '()'}")
        if self.data.source not in ("synthetic", "directory"):
            raise ConfigError(f"[data] unknown source {self.data.source!r}")
        if self.explain.image_class not in ("all", "benign", "malignant"):
            raise ConfigError(f"[explain] unknown image_class {self.explain.image_class!r}")
        unknown = [m for m in self.explain.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"[explain] unknown methods {unknown}")
        if self.explain.n_prototypes > self.prototypes.m:
            raise ConfigError("[explain] n_prototypes exceeds the prototype count")
        for name in ("synthetic", "train", "prototypes", "loss", "methods", "metrics"):
            try:
                getattr(self, name).validate()
            except ValueError as err:
                raise ConfigError(f"[{name}] {err}") from None
        try:
            self.model_config(self.run.architectures[0]).validate()
        except ValueError as err:
            raise ConfigError(f"[model] {err}") from None


# ---------------------------------------------------------------------------
# text form

def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar(text: str, like):
    t = text.strip()
    if isinstance(like, bool):
        low = t.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    return t


def _parse(text: str, default):
    t = text.strip()
    if default is None or t.lower() == "none":
        if t.lower() == "none":
            return None
        parts = [p for p in t.split(",") if p.strip()]
        return tuple(int(p) for p in parts) if len(parts) > 1 else int(t)
    if isinstance(default, (tuple, list)):
        like = default[0] if default else ""
        items = [p for p in t.split(",") if p.strip()]
        return tuple(_scalar(p, like) for p in items)
    return _scalar(t, default)


# numeric keys that also accept a word
KEYWORD_VALUES = {("methods", "occlusion_fill"): {"mean"}, ("methods", "lime_fill"): {"mean"}}


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
        elif section and s and s[0] not in "#;" and "=" in s:
            out[(section, s.split("=", 1)[0].strip().lower())] = i
    return out


def from_ini(text: str, path=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as err:
        line = getattr(err, "lineno", None)
        if line is None and getattr(err, "errors", None):
            line = err.errors[0][0]
        raise ConfigError(str(err).splitlines()[0], line, path) from None
    lines = _key_lines(text)
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)), path)
        obj = getattr(cfg, section)
        names = {f.name: f for f in dataclasses.fields(obj)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lines.get((section, key)), path)
            try:
                if (section, key) in KEYWORD_VALUES and raw.strip() in KEYWORD_VALUES[section, key]:
                    updates[key] = raw.strip()
                else:
                    updates[key] = _parse(raw, getattr(obj, key))
            except ValueError as err:
                raise ConfigError(f"bad value for {section}.{key}: {err}", lines.get((section, key)), path) from None
        setattr(cfg, section, dataclasses.replace(obj, **updates))
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", None, p) from None
    return from_ini(text, p)
