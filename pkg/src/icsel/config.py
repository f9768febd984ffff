"""Run configuration: a single JSON file plus flag overrides; flags win.

Every command funnels its randomness through the one seed recorded here, so
a saved config file reproduces a run bit for bit (timing fields excepted).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCORER_KINDS = ("mock", "cache", "remote")

_COUNT_FIELDS = ("n", "K", "M", "epochs", "batch_size", "inference_K", "inference_n")


@dataclass
class RunConfig:
    """Paths, pipeline sizes, and training hyperparameters for one run.

    num_anchors = 0 means every corpus record anchors a training instance.
    inference_lambda overrides the trained model's lambda at selection time;
    infinity selects by pure diversity over the base kernel.
    """

    corpus_path: str = ""
    embeddings_path: str = ""
    queries_path: str = ""
    query_embeddings_path: str = ""
    instances_path: str = ""
    model_path: str = ""
    scorer: dict = field(default_factory=lambda: {"kind": "mock"})
    n: int = 100
    K: int = 16
    M: int = 50
    lambda_grid: tuple = (0.01, 0.05, 0.1)
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-5
    seed: int = 0
    inference_K: int = 50
    inference_n: int = 100
    inference_lambda: float | None = None
    num_anchors: int = 0
    exclude_self: bool = True

    def validate(self) -> None:
        for name in _COUNT_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.K > self.n:
            raise ConfigError(f"K={self.K} exceeds pool size n={self.n}")
        if self.inference_K > self.inference_n:
            raise ConfigError(
                f"inference_K={self.inference_K} exceeds inference_n={self.inference_n}"
            )
        if not isinstance(self.lr, (int, float)) or not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if not math.isfinite(self.lr):
            raise ConfigError("lr must be finite")
        if not self.lambda_grid:
            raise ConfigError("lambda_grid must be non-empty")
        for lam in self.lambda_grid:
            if not isinstance(lam, (int, float)) or not lam > 0 or not math.isfinite(lam):
                raise ConfigError(f"lambda values must be positive and finite, got {lam!r}")
        if self.inference_lambda is not None and not self.inference_lambda > 0:
            raise ConfigError(
                f"inference_lambda must be positive, got {self.inference_lambda!r}"
            )
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.num_anchors, int) or self.num_anchors < 0:
            raise ConfigError(f"num_anchors must be >= 0, got {self.num_anchors!r}")
        if not isinstance(self.scorer, dict):
            raise ConfigError("scorer must be an object")
        kind = self.scorer.get("kind")
        if kind not in SCORER_KINDS:
            raise ConfigError(
                f"scorer kind must be one of {SCORER_KINDS}, got {kind!r}"
            )


def _coerce(name: str, value, target_type):
    # JSON has no tuples and writes 1.0 for 1; normalize the easy cases
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if name == "lambda_grid":
        if not isinstance(value, (list, tuple)):
            raise ConfigError("lambda_grid must be a list")
        return tuple(float(v) for v in value)
    if name == "inference_lambda" and value is not None:
        return float(value)
    return value


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a JSON config file; unknown keys are errors."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        target = float if name in ("lr",) else None
        kwargs[name] = _coerce(name, value, target)
    config = RunConfig(**kwargs)
    config.validate()
    return config


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Return a copy with non-None overrides applied, then revalidated."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        config.validate()
        return config
    updated = dataclasses.replace(config, **changes)
    updated.validate()
    return updated
