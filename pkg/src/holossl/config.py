"""Flat ``key = value`` experiment configuration with typed defaults.

Lines starting with ``#`` are comments. Lists are comma separated. Relative
paths are resolved against the directory of the config file.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .encoder import EncoderConfig
from .evaluation import HeadSettings
from .imaging import AugmentPolicy, ShiftParams, SyntheticSpec
from .ssl import SslConfig

PATH_KEYS = ("data_dir", "manifest", "cache_dir", "checkpoint_dir", "report_dir")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    # paths
    data_dir: Path = Path("data")
    manifest: Path = Path("data/manifest.csv")
    cache_dir: Path = Path("cache")
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")
    # synthetic data
    n_classes: int = 3
    per_class: int = 400
    test_fraction: float = 0.3
    unlabelled_fraction: float = 0.5
    shift_blur: float = 1.5
    shift_gain: float = 0.90
    shift_noise: float = 0.01
    primary_instrument: str = "P5"
    shift_instrument: str = "P4"
    # generic pre-training corpus
    generic_per_class: int = 60
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.01
    pretrain_batch: int = 32
    # encoder
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    stride: int = 2
    proj_dim: int = 32
    input_size: int = 64
    # augmentation
    rotation_max_deg: float = 180.0
    crop_scale: tuple[float, ...] = (0.6, 1.0)
    blur_sigma: tuple[float, ...] = (0.0, 1.5)
    gain_jitter: tuple[float, ...] = (0.8, 1.25)
    flip_prob: float = 0.5
    # contrastive refinement
    ssl_epochs: int = 30
    ssl_lr: float = 0.03
    ssl_batch_n: int = 64
    temperature: float = 0.5
    # few-shot evaluation
    ks: tuple[int, ...] = (1, 5, 10, 25)
    repeats: int = 20
    heads: tuple[str, ...] = ("linear", "prototype")
    feature_sources: tuple[str, ...] = ("generic", "ssl_refined")
    test_instruments: tuple[str, ...] = ("P5", "P4")
    scale: float = 10.0
    l2: float = 1e-3
    proto_epochs: int = 100
    proto_lr: float = 0.1

    # -- derived objects -------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        shift = ShiftParams(self.shift_blur, self.shift_gain, self.shift_noise, self.shift_instrument)
        return SyntheticSpec(self.n_classes, self.per_class, shift=shift, test_fraction=self.test_fraction,
                             unlabelled_fraction=self.unlabelled_fraction, instrument=self.primary_instrument)

    def encoder_config(self) -> EncoderConfig:
        blocks = tuple((c, self.kernel, self.stride) for c in self.conv_channels)
        return EncoderConfig(blocks, feature_dim=self.conv_channels[-1], proj_dim=self.proj_dim,
                             input_size=self.input_size)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.rotation_max_deg, _pair(self.crop_scale), _pair(self.blur_sigma),
                             _pair(self.gain_jitter), self.flip_prob)

    def ssl_config(self) -> SslConfig:
        return SslConfig(self.ssl_batch_n, self.temperature, self.ssl_epochs, self.ssl_lr,
                         policy=self.augment_policy(), seed=self.seed)

    def head_settings(self) -> HeadSettings:
        return HeadSettings(scale=self.scale, l2=self.l2, proto_epochs=self.proto_epochs, proto_lr=self.proto_lr)

    def validate(self) -> "ExperimentConfig":
        try:
            self.synthetic_spec()
            self.encoder_config()
            self.ssl_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.ks or min(self.ks) < 1 or self.repeats < 1:
            raise ConfigError("ks must be positive and repeats >= 1")
        return self


def _pair(v) -> tuple[float, float]:
    if len(v) != 2:
        raise ConfigError(f"expected a 'lo,hi' pair, got {v!r}")
    return (float(v[0]), float(v[1]))


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is Path:
            return Path(raw)
        if typ is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if typ in (int, float, str):
            return typ(raw)
        item = typ.__args__[0]
        return tuple(item(x.strip()) for x in raw.split(",") if x.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def parse_assignments(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(values: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "seed" not in values:
        raise ConfigError("config must set 'seed' (no wall-clock seeding)")
    kwargs = {k: _convert(k, v, hints[k]) for k, v in values.items()}
    cfg = ExperimentConfig(**kwargs)
    if base_dir is not None:
        for key in PATH_KEYS:
            p = getattr(cfg, key)
            if not p.is_absolute():
                setattr(cfg, key, base_dir / p)
    return cfg.validate()


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path))
        base = path.resolve().parent
    values.update(overrides or {})
    return build_config(values, base)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
