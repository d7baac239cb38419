"""JSON run configuration shared by the CLI subcommands."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .explain import MdmConfig
from .models import ActivationSelector

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    image_size: int = 24
    train_samples: int = 200
    epochs: int = 30
    model_lr: float = 0.01
    scales: int = 8
    scale_base: int = 2
    iterations: int = 300
    lr: float = 3e-3
    threshold_ratio: float = 5 / 27
    lam: object = "auto"
    lambda_factor: float = 1.0
    alpha: float = 0.5
    beta: float = 0.3
    selector: dict = field(default_factory=lambda: {"mode": "logit_vector"})
    curve_steps: int = 50
    percentile: float = 90.0
    explain_percentile: float = 50.0
    random_baseline: bool = True
    baseline_seeds: int = 5

    # "lambda" is a Python keyword; it is the JSON key
    _RENAMES = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, value in data.items():
            name = cls._RENAMES.get(key, key)
            if name not in known or key == "lam":
                raise ConfigError(f"unknown config key {key!r}")
            expected = type(getattr(defaults, name))
            if name == "lam":
                if not (value == "auto" or (isinstance(value, (int, float)) and not isinstance(value, bool))):
                    raise ConfigError("lambda must be 'auto' or a number")
            elif expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            elif not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
                raise ConfigError(f"{key} must be {expected.__name__}, got {type(value).__name__}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        if cfg.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def validate(self) -> None:
        try:
            self.mdm()
            self.activation_selector()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.image_size < 16 or self.train_samples < 1 or self.epochs < 0:
            raise ConfigError("image_size >= 16, train_samples >= 1 and epochs >= 0 required")
        if not 0 < self.percentile < 100 or not 0 <= self.explain_percentile < 100:
            raise ConfigError("percentiles out of range")
        if self.curve_steps < 2 or self.baseline_seeds < 1:
            raise ConfigError("curve_steps >= 2 and baseline_seeds >= 1 required")

    def with_overrides(self, env=None, **flags) -> "RunConfig":
        """Apply ``MDM_SEED`` from the environment, then any non-None flag values."""
        env = os.environ if env is None else env
        data = self.to_dict()
        if env.get("MDM_SEED"):
            try:
                data["seed"] = int(env["MDM_SEED"])
            except ValueError:
                raise ConfigError(f"MDM_SEED must be an integer, got {env['MDM_SEED']!r}") from None
        for key, value in flags.items():
            if value is not None:
                data[key] = value
        return RunConfig.from_dict(data)

    def mdm(self) -> MdmConfig:
        return MdmConfig(
            n_scales=self.scales, scale_base=self.scale_base, iterations=self.iterations,
            lr=self.lr, threshold_ratio=self.threshold_ratio,
            lambdas="auto" if self.lam == "auto" else float(self.lam),
            lambda_factor=self.lambda_factor, alpha=self.alpha, beta=self.beta, seed=self.seed,
        )

    def activation_selector(self) -> ActivationSelector:
        unknown = set(self.selector) - {"mode", "index", "row", "col"}
        if unknown:
            raise ConfigError(f"unknown selector keys {sorted(unknown)}")
        sel = ActivationSelector.from_dict(self.selector)
        if sel.mode not in ("logit", "logit_vector", "spatial"):
            raise ConfigError(f"unknown selector mode {sel.mode!r}")
        return sel
