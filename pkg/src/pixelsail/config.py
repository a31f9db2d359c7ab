"""Run configuration: flat `key = value` text files with dotted section
prefixes (model.*, train.*, data.*, eval.*), `--set key=value` overrides,
and the PIXELSAIL_SEED environment override for train.seed."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 4e-5
    warmup_ratio: float = 0.03
    batch_size: int = 8
    steps: int = 100
    seed: int = 0
    weight_decay: float = 0.0
    alpha: float = 0.5
    lam: float = 2.0  # config key: train.lambda
    beta: float = 0.5
    distill: str = "off"  # on | off | from-file
    teacher_path: str = ""
    checkpoint_every: int = 100

    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, lam=self.lam, beta=self.beta)


@dataclass
class DataConfig:
    path: str = ""  # JSONL file; empty -> synthetic
    synthetic_n: int = 8
    synthetic_seed: int = 1
    tasks: str = ""  # comma list restricting generated tasks; empty -> default mix
    p_nonexist: float = 0.2


@dataclass
class EvalConfig:
    tasks: str = "refseg,panoptic-template,region-caption,mcq,vt-res"
    force_seg: bool = True
    max_new: int = 24


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        # lr = 0 is allowed (null-optimizer runs); negative is not
        if self.train.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.train.lr}")
        if not 0 <= self.train.warmup_ratio < 1:
            raise ConfigError(f"train.warmup_ratio must be in [0, 1), got {self.train.warmup_ratio}")
        if self.train.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.train.batch_size}")
        if self.train.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.train.steps}")
        if self.train.distill not in ("on", "off", "from-file"):
            raise ConfigError(f"train.distill must be on/off/from-file, got {self.train.distill!r}")
        if self.train.distill == "from-file" and not self.train.teacher_path:
            raise ConfigError("train.distill=from-file needs train.teacher_path")
        self.train.weights().validate()

    def eval_tasks(self) -> tuple[str, ...]:
        return tuple(t.strip() for t in self.eval.tasks.split(",") if t.strip())

    def data_tasks(self) -> tuple[str, ...] | None:
        items = tuple(t.strip() for t in self.data.tasks.split(",") if t.strip())
        return items or None


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
# config keys that differ from the attribute name
_KEY_ALIASES = {("train", "lambda"): "lam"}


def _coerce(raw: str, target_type) -> object:
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw.strip()


def set_key(cfg: RunConfig, dotted: str, raw: str) -> None:
    section, _, name = dotted.strip().partition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key {dotted!r}")
    attr = _KEY_ALIASES.get((section, name), name)
    target = getattr(cfg, section)
    match = [f for f in fields(target) if f.name == attr]
    if not match:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = _coerce(raw, match[0].type if isinstance(match[0].type, type) else type(getattr(target, attr)))
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad value for {dotted}: {raw!r} ({exc})") from exc
    setattr(target, attr, value)


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        set_key(cfg, key.strip(), value.strip())
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical flat text (used for the checkpoint config snapshot)."""
    lines = []
    for section in ("model", "train", "data", "eval"):
        target = getattr(cfg, section)
        for f in fields(target):
            key = f.name
            for (sec, alias), attr in _KEY_ALIASES.items():
                if sec == section and attr == f.name:
                    key = alias
            value = getattr(target, f.name)
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_config_text(text, cfg)
    env_seed = os.environ.get("PIXELSAIL_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"PIXELSAIL_SEED must be an integer, got {env_seed!r}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_key(cfg, key.strip(), value.strip())
    cfg.validate()
    return cfg


def model_config_fingerprint(cfg: ModelConfig) -> str:
    return ",".join(f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg))
