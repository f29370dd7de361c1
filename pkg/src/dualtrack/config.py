"""Run configuration: one JSON file with dotted keys, overridable from the command line.

Keys may be written flat (``{"policy.tau": 0.15}``) or nested
(``{"policy": {"tau": 0.15}}``).  Precedence is flags > file > defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .components import DEFAULT_TIMING, TimingConfig
from .coremath import LossWeights, ValidationError
from .policy import PolicyConfig

DEFAULT_SEED = 20240917

DEFAULTS: dict[str, Any] = {
    **DEFAULT_TIMING,
    "llm.timeout_ms": 10_000,
    "policy.tau": 0.45,
    "policy.h_max": 2.0,
    "policy.m": 5,
    "loss.lambda_con": 1.0,
    "loss.lambda_coh": 0.5,
    "loss.lambda_prior": 0.1,
    "curriculum.stages": 4,
    "curriculum.epochs": [5, 3, 3, 2],
    "curriculum.order": "hard_to_easy",
    "report.dataset": "synthetic",
    "report.model": "scripted",
    "paths.dialogues": None,
    "seed": DEFAULT_SEED,
}


def flatten(data: Mapping, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = Path(".")

    def __post_init__(self) -> None:
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**DEFAULTS, **self.values}
        object.__setattr__(self, "values", merged)
        # build eagerly so bad values fail at load time
        self.timing
        self.policy
        self.weights
        path = self.dialogues_path
        if path is not None and not path.exists():
            raise ValidationError(f"paths.dialogues does not exist: {path}")

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
        values: dict[str, Any] = {}
        base = Path(".")
        if path is not None:
            p = Path(path)
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ValidationError(f"config file not found: {p}") from None
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{p}: {exc}") from None
            if not isinstance(data, dict):
                raise ValidationError(f"{p}: expected a JSON object")
            values = flatten(data)
            base = p.parent
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values, base)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def timing(self) -> TimingConfig:
        return TimingConfig({k: self.values[k] for k in DEFAULT_TIMING})

    @property
    def policy(self) -> PolicyConfig:
        try:
            return PolicyConfig(float(self["policy.tau"]), float(self["policy.h_max"]), int(self["policy.m"]))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad policy setting: {exc}") from None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            float(self["loss.lambda_con"]), float(self["loss.lambda_coh"]), float(self["loss.lambda_prior"])
        )

    @property
    def seed(self) -> int:
        return int(self["seed"])

    @property
    def dialogues_path(self) -> Path | None:
        p = self["paths.dialogues"]
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p
