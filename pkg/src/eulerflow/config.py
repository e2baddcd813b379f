"""Flat ``key=value`` run configuration merging prior, loss, train and eval settings."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

from .loss import LossConfig
from .prior import PriorConfig
from .scenegen import DYNAMIC_THRESHOLD
from .train import TrainConfig

# key -> (type, default); the single source of documented defaults
FIELDS: dict[str, tuple[type, Any]] = {
    "seed": (int, 0),
    "depth": (int, 8),
    "width": (int, 128),
    "output_gain": (float, 0.01),
    "window": (int, 3),
    "alpha": (float, 0.01),
    "truncation": (float, 2.0),
    "no_multi_k": (bool, False),
    "no_cycle": (bool, False),
    "max_points": (int, None),
    "lr": (float, 1e-3),
    "epochs": (int, 2000),
    "patience": (int, 100),
    "min_delta": (float, 1e-6),
    "dynamic_threshold": (float, DYNAMIC_THRESHOLD),
}


def _parse(key: str, raw: str):
    kind, _ = FIELDS[key]
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


class RunConfig(dict):
    """Resolved settings; unknown keys are rejected."""

    def __init__(self, values: Optional[dict] = None):
        super().__init__({k: d for k, (_, d) in FIELDS.items()})
        if values:
            self.update_checked(values)

    def update_checked(self, values: dict) -> None:
        unknown = sorted(set(values) - set(FIELDS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self[k] = _parse(k, v) if isinstance(v, str) else v

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        from .io import read_kv

        return cls(read_kv(path))

    def to_text(self) -> str:
        return "".join(f"{k}={self[k]}\n" for k in FIELDS)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def prior(self) -> PriorConfig:
        return PriorConfig(depth=self["depth"], width=self["width"], seed=self["seed"], output_gain=self["output_gain"])

    def loss(self) -> LossConfig:
        return LossConfig(
            window=self["window"],
            cycle_weight=self["alpha"],
            truncation_radius=self["truncation"],
            no_multi_k=self["no_multi_k"],
            no_cycle=self["no_cycle"],
            max_points_per_frame=self["max_points"],
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["lr"],
            max_epochs=self["epochs"],
            patience=self["patience"],
            min_delta=self["min_delta"],
            seed=self["seed"],
        )
