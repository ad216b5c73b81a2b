"""Run configuration: dataclass sections stored as a flat INI-style file.

No environment-variable overrides; a config file fully determines a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Optional

from .attention_masks import NON_STREAMING, STREAMING, MaskSpec
from .errors import ConfigError

FUSION_METHODS = ("none", "input_concat", "embed_concat", "pooling", "chunked")


@dataclass
class ModelConfig:
    blocks: int = 4
    d_model: int = 64
    heads: int = 4
    conv_kernel: int = 7
    ffn_mult: int = 4
    d_in: int = 16
    subsample_channels: int = 8
    predictor_embed: int = 32
    predictor_units: int = 64
    joint_dim: int = 64
    vocab: int = 20  # excluding blank

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def subsampled_freq(self) -> int:
        return (self.d_in + 3) // 4  # ceil(ceil(d_in / 2) / 2)


@dataclass
class FusionConfig:
    method: str = "none"
    context_utterances: int = 1
    context_frames: Optional[int] = None  # chunked method: most recent frames kept
    pool_len: int = 32
    allow_nonstreaming: bool = False  # lets "chunked" run with a non-streaming mask


@dataclass
class MaskConfig:
    mode: str = NON_STREAMING
    chunk: int = 3
    lookahead: Optional[int] = 3
    left_cap: Optional[int] = None

    def to_spec(self, fusion: Optional[FusionConfig] = None) -> MaskSpec:
        frame_cap = None
        if fusion is not None and fusion.method == "chunked":
            frame_cap = fusion.context_frames
        return MaskSpec(mode=self.mode, chunk_size=self.chunk, lookahead=self.lookahead,
                        left_cap=self.left_cap, prev_frame_cap=frame_cap)


@dataclass
class SchedulerConfig:
    rows: int = 3
    capacity: int = 400
    splicing: bool = True


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    bn_freeze_steps: int = 0  # final steps trained with batch norm on running statistics


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        m, f, k = self.model, self.fusion, self.mask
        for name in ("blocks", "d_model", "heads", "conv_kernel", "ffn_mult", "d_in",
                     "subsample_channels", "predictor_embed", "predictor_units",
                     "joint_dim", "vocab"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.d_model % m.heads:
            raise ConfigError(f"model.d_model={m.d_model} not divisible by heads={m.heads}")
        if k.mode not in (NON_STREAMING, STREAMING):
            raise ConfigError(f"mask.mode must be {NON_STREAMING} or {STREAMING}")
        if k.mode == NON_STREAMING and m.conv_kernel % 2 == 0:
            raise ConfigError("non-streaming models need an odd conv_kernel")
        if k.chunk < 1:
            raise ConfigError("mask.chunk must be >= 1")
        for name in ("lookahead", "left_cap"):
            v = getattr(k, name)
            if v is not None and v < 0:
                raise ConfigError(f"mask.{name} must be >= 0")
        if f.method not in FUSION_METHODS:
            raise ConfigError(f"fusion.method must be one of {', '.join(FUSION_METHODS)}")
        if f.context_utterances < 0:
            raise ConfigError("fusion.context_utterances must be >= 0")
        if f.pool_len < 1:
            raise ConfigError("fusion.pool_len must be >= 1")
        if f.context_frames is not None and f.context_frames < 0:
            raise ConfigError("fusion.context_frames must be >= 0")
        if f.method == "chunked" and k.mode != STREAMING and not f.allow_nonstreaming:
            raise ConfigError("fusion.method=chunked needs mask.mode=streaming "
                              "(or fusion.allow_nonstreaming=true)")
        s, t = self.scheduler, self.training
        if s.rows < 1 or s.capacity < 1:
            raise ConfigError("scheduler.rows and scheduler.capacity must be >= 1")
        if t.bn_freeze_steps < 0:
            raise ConfigError("training.bn_freeze_steps must be >= 0")
        if t.steps < 0 or t.lr <= 0:
            raise ConfigError("training.steps must be >= 0 and training.lr > 0")
        return self

    def mask_spec(self) -> MaskSpec:
        return self.mask.to_spec(self.fusion)


_SECTIONS = ("model", "fusion", "mask", "scheduler", "training")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(section: str, f: dataclasses.Field, raw: str):
    text = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    optional = kind.startswith("Optional[")
    base = kind[len("Optional["):-1] if optional else kind
    if optional and text.lower() in ("none", "unlimited", ""):
        return None
    try:
        if base == "bool":
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{section}.{f.name}: cannot parse {raw!r} as {base}") from None
    return text


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, fields[key], raw))
    return cfg.validate()


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        part = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(part, f.name)) for f in dataclasses.fields(part)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def full_preset() -> RunConfig:
    """Full-scale model geometry; not exercised by the desk-scale tests."""
    return RunConfig(
        model=ModelConfig(blocks=12, d_model=512, heads=8, conv_kernel=15, d_in=80,
                          subsample_channels=512, predictor_embed=300,
                          predictor_units=300, joint_dim=512, vocab=5000),
        fusion=FusionConfig(method="pooling", context_utterances=1, pool_len=32),
        mask=MaskConfig(mode=STREAMING, chunk=60, lookahead=20),
        training=TrainConfig(lr=2e-4, steps=0),
    )
