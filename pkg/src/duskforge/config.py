"""Flat ``key = value`` configuration with namespaced keys.

Every key has a typed default; files and ``--set`` overrides may only touch
known keys. The fully resolved mapping is written next to each run's outputs.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Iterable, Mapping

from .darkening import CurveFamily, MappingEstimatorSpec
from .exposure import NoiseSpec
from .losses import LossWeights
from .models import FeatureExtractorSpec, HeadSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    # run
    "train.seed": 0,
    "train.optimizer": "adam",
    "train.schedule": "cosine",
    "train.eval_every": 200,
    # data
    "data.root": "data/shapescenes",
    "data.augment": False,
    "data.allow_png": False,
    # dataset generation
    "gen.num_classes": 10,
    "gen.image_size": 32,
    "gen.train_per_class": 100,
    "gen.val_per_class": 20,
    "gen.test_per_class": 30,
    # networks
    "model.stages": [16, 32, 64],
    "model.head_hidden": 128,
    "model.head_out": 64,
    "model.tau": 0.99,
    "darkener.widths": [16, 16, 16, 16],
    # curve family
    "curve.family": "iterative_quadratic",
    "curve.iterations": 8,
    "curve.per_iteration_maps": False,
    "curve.brightness_factor": 0.2,
    "curve.gamma": 3.0,
    # loss weights
    "loss.lambda_sim_d": 1.0,
    "loss.lambda_c_exp": 10.0,
    "loss.lambda_col": 5.0,
    "loss.lambda_ltv": 1.0,
    "loss.lambda_flex": 1.0,
    "loss.lambda_sim_f": 1.0,
    "loss.lambda_task": 1.0,
    "loss.alpha_ltv": 0.1,
    # exposure noise
    "exposure.sigma_pixel": 0.01,
    "exposure.sigma_patch": 0.03,
    "exposure.patch_size": 8,
    "exposure.floor": 0.01,
    # stages
    "pretrain.steps": 1500,
    "pretrain.lr": 2e-3,
    "pretrain.batch_size": 32,
    "darkener.steps": 2000,
    "darkener.lr": 1e-3,
    "darkener.batch_size": 32,
    "adapt.steps": 4000,
    "adapt.lr": 1e-4,
    "adapt.batch_size": 32,
    "adapt.mode": "stepwise",
    "adapt.alternate_block": 100,
    # evaluation
    "eval.exposure_seed": 1234,
}

CHOICES = {
    "train.optimizer": ("adam", "sgd"),
    "train.schedule": ("cosine", "constant"),
    "adapt.mode": ("stepwise", "alternating"),
    "curve.family": ("iterative_quadratic", "gamma_curve", "reciprocal_curve", "brightness", "gamma_correction"),
}


def _parse_value(key: str, raw: str, default: Any) -> Any:
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
        if isinstance(default, list):
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class Config(Mapping[str, Any]):
    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = dict(DEFAULTS)
        if values:
            self.update(values)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def update(self, values: Mapping[str, Any]) -> Config:
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in values.items():
            default = DEFAULTS[key]
            if isinstance(value, str) and not isinstance(default, str):
                value = _parse_value(key, value, default)
            elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if key in CHOICES and value not in CHOICES[key]:
                raise ConfigError(f"{key}: {value!r} not one of {CHOICES[key]}")
            self._values[key] = value
        return self

    def with_overrides(self, values: Mapping[str, Any]) -> Config:
        return Config({**self._values, **values})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> Config:
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> Config:
        cfg = cls() if path is None else cls.parse(Path(path).read_text(encoding="utf-8"), str(path))
        return cfg.update(parse_overrides(overrides))

    def dumps(self) -> str:
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    # -- typed views --------------------------------------------------------
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_sim_D=self["loss.lambda_sim_d"], lambda_c_exp=self["loss.lambda_c_exp"],
            lambda_col=self["loss.lambda_col"], lambda_ltv=self["loss.lambda_ltv"],
            lambda_flex=self["loss.lambda_flex"], lambda_sim_F=self["loss.lambda_sim_f"],
            lambda_task=self["loss.lambda_task"], alpha_ltv=self["loss.alpha_ltv"])

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self["exposure.sigma_pixel"], self["exposure.sigma_patch"],
                         self["exposure.patch_size"], self["exposure.floor"])

    def curve_family(self) -> CurveFamily:
        return CurveFamily(self["curve.family"], self["curve.iterations"], self["curve.per_iteration_maps"],
                           self["curve.brightness_factor"], self["curve.gamma"])

    def extractor_spec(self, image_size: int, channels: int = 3) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(list(self["model.stages"]), image_size, channels)

    def head_spec(self) -> HeadSpec:
        return HeadSpec(self["model.head_hidden"], self["model.head_out"])

    def estimator_spec(self, channels: int = 3) -> MappingEstimatorSpec:
        return MappingEstimatorSpec(list(self["darkener.widths"]), 3, channels)


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
