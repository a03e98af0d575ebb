"""Run configuration: TOML sections merged with ``section.key=value`` overrides."""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .hourglass import HourglassConfig
from .training import TrainConfig, train_config_dict


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    quant_level: int = 128
    num_points: int = 256
    family: str = "mixed"
    count: int = 200
    seed: int = 0


@dataclass
class SamplingSection:
    temperature: float = 0.0
    seed: int = 0
    use_cache: bool = True


@dataclass
class EvalSection:
    samples: int = 10_000
    seed: int = 0


_MODEL_KEYS = {f.name for f in fields(HourglassConfig)} - {"quant_level"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def model_config(self) -> HourglassConfig:
        return HourglassConfig(quant_level=self.data.quant_level, **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training)

    def to_dict(self) -> dict:
        model = self.model_config().to_dict()
        del model["quant_level"]
        return {"data": asdict(self.data), "model": model,
                "training": train_config_dict(self.train_config()),
                "sampling": asdict(self.sampling), "eval": asdict(self.eval)}


_SECTIONS = {"data": DataSection, "sampling": SamplingSection, "eval": EvalSection}


def _check_keys(section: str, keys, allowed):
    unknown = sorted(set(keys) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()  # bare strings
    return section, key, value


def build_run_config(raw: dict, overrides=()) -> RunConfig:
    raw = {k: dict(v) for k, v in raw.items()}
    _check_keys("top level", raw, ["data", "model", "training", "sampling", "eval"])
    for text in overrides:
        section, key, value = parse_override(text)
        raw.setdefault(section, {})[key] = value
    _check_keys("top level", raw, ["data", "model", "training", "sampling", "eval"])
    kwargs = {}
    for name, cls in _SECTIONS.items():
        sec = raw.get(name, {})
        _check_keys(name, sec, [f.name for f in fields(cls)])
        kwargs[name] = cls(**sec)
    model = raw.get("model", {})
    _check_keys("model", model, _MODEL_KEYS)
    training = raw.get("training", {})
    _check_keys("training", training, _TRAIN_KEYS)
    cfg = RunConfig(model=model, training=training, **kwargs)
    try:
        cfg.model_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str | os.PathLike | None, overrides=()) -> RunConfig:
    raw = {}
    if path:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    return build_run_config(raw, overrides)


def write_resolved(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)
