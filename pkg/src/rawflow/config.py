"""Flat ``section.key = value`` run configuration with typed validation.

Example::

    # toy run
    model.d = 32
    model.heads = 4
    train.steps = 2000
    data.frequencies = 500, 1000, 1500, 2000

Sections: ``model`` (ModelConfig), ``train`` (TrainConfig), ``data``
(ToyDatasetSpec), ``features`` (FeatureConfig). Values are coerced to the
type of the field's default; tuples are comma-separated floats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .conditioning import FeatureConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import ToyDatasetSpec, TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": ToyDatasetSpec,
    "features": FeatureConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def as_flat(self) -> dict:
        out = {}
        for section in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section in {key!r}")
        current = getattr(base, section)
        names = {f.name for f in dataclasses.fields(current)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        updates[section][name] = _coerce(raw, getattr(current, name), key)
    kwargs = {}
    for section, upd in updates.items():
        current = getattr(base, section)
        try:
            kwargs[section] = dataclasses.replace(current, **upd) if upd else current
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return RunConfig(**kwargs)


def load(path=None, overrides=()) -> RunConfig:
    pairs = {}
    if path is not None:
        pairs.update(parse_pairs(Path(path).read_text().splitlines()))
    pairs.update(parse_pairs(overrides))
    return build(pairs)


def dump(cfg: RunConfig) -> str:
    lines = []
    for key, v in cfg.as_flat().items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(f"{x:g}" for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


TOY_ACCEPTANCE = {
    "model.d": "32",
    "model.heads": "4",
    "model.L_joint": "1",
    "model.L_fused": "2",
    "model.D": "8",
    "data.num_classes": "4",
    "data.num_samples": "256",
    "data.size": "512",
    "features.num_classes": "4",
    "train.steps": "2000",
    "train.batch_size": "16",
    "train.lr": "1e-3",
    "train.warmup_steps": "100",
    "train.ema_decay": "0.99",
    "train.seed": "0",
}


def toy_config(**extra) -> RunConfig:
    """The desk-scale configuration used by the end-to-end acceptance run."""
    pairs = dict(TOY_ACCEPTANCE)
    pairs.update({k: str(v) for k, v in extra.items()})
    return build(pairs)
