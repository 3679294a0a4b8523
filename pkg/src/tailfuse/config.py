"""Run configuration: one JSON file covering every pipeline phase."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError
from .eval_suite import EvalConfig
from .fusion_engine import DenoiseConfig
from .il_trainer import ILConfig
from .latent_store import SynthConfig
from .seeding import MAX_SEED, derive_seed

SEED_ENV = "TAILFUSE_SEED"


class PartitionConfig(BaseModel):
    threshold: float | None = 100
    head: list[int] | None = None
    tail: list[int] | None = None

    model_config = {"extra": "forbid"}

    @model_validator(mode="after")
    def _one_rule(self):
        explicit = self.head is not None or self.tail is not None
        if explicit and (self.head is None or self.tail is None):
            raise ValueError("explicit partition needs both head and tail")
        if explicit:
            self.threshold = None
        elif self.threshold is None:
            raise ValueError("give a threshold or explicit head/tail lists")
        return self


class CamConfig(BaseModel):
    tau_high: float = Field(0.4, gt=0.0, lt=1.0)
    tau_low: float = Field(0.4, gt=0.0, lt=1.0)
    class_agnostic: bool = False
    export: Literal["all", "tail"] = "all"

    model_config = {"extra": "forbid"}


class FusionConfig(BaseModel):
    k: int = Field(5, ge=1)
    target: int = Field(200, ge=1)

    model_config = {"extra": "forbid"}


class EvalSettings(EvalConfig):
    smote_k: int = Field(5, ge=1)


class RunConfig(BaseModel):
    seed: int = Field(0, ge=0, le=MAX_SEED)
    output_dir: str = "runs/default"
    synth: SynthConfig = SynthConfig()
    partition: PartitionConfig = PartitionConfig()
    il: ILConfig = ILConfig()
    cam: CamConfig = CamConfig()
    fusion: FusionConfig = FusionConfig()
    denoise: DenoiseConfig = DenoiseConfig()
    eval: EvalSettings = EvalSettings()

    model_config = {"extra": "forbid"}

    def phase_seed(self, tag: str) -> int:
        return derive_seed(self.seed, tag)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def load_config(path, env=None) -> RunConfig:
    """Read and validate a run config; ``TAILFUSE_SEED`` overrides the master seed."""
    env = os.environ if env is None else env
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"seed: {SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc
