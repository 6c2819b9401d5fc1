"""Experiment configuration files (TOML), validated before any computation."""

from __future__ import annotations

import hashlib
import json
import sys
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diffusion import Corruption, log_linear_schedule
from .evaluation import random_target
from .guidance import ConditionalModel


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RandomTargetSpec(_Section):
    spread: float = Field(1.0, gt=0)
    likelihood_range: tuple[float, float] = (1e-3, 1.0)
    seed: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.likelihood_range
        if not 0 < lo <= hi:
            raise ValueError("likelihood_range must satisfy 0 < lo <= hi")
        return self


class TargetSpec(_Section):
    vocab_size: int = Field(ge=2)
    num_dims: int = Field(1, ge=1)
    p0: Optional[list[float]] = None
    likelihood: Optional[list[float]] = None
    random: Optional[RandomTargetSpec] = None
    corruption: Literal["mask", "uniform"] = "mask"
    residual: float = Field(1e-3, gt=0, lt=1)

    @model_validator(mode="after")
    def _source(self):
        explicit = self.p0 is not None or self.likelihood is not None
        if explicit and self.random is not None:
            raise ValueError("give either p0/likelihood or [target.random], not both")
        if explicit:
            size = self.vocab_size**self.num_dims
            if self.p0 is None or self.likelihood is None:
                raise ValueError("explicit targets need both p0 and likelihood")
            if len(self.p0) != size or len(self.likelihood) != size:
                raise ValueError(f"p0 and likelihood need {size} entries")
        return self

    def build(self, seed: int) -> tuple[ConditionalModel, Corruption]:
        if self.p0 is not None:
            p0 = np.asarray(self.p0, dtype=float)
            model = ConditionalModel(p0 / p0.sum(), np.asarray(self.likelihood, dtype=float),
                                     self.vocab_size, self.num_dims)
        else:
            spec = self.random or RandomTargetSpec()
            key = spec.seed if spec.seed is not None else seed
            model = random_target(self.num_dims, self.vocab_size,
                                  np.random.SeedSequence([key, 0xC0FFEE]), spec.spread,
                                  spec.likelihood_range)
        corruption = Corruption(self.vocab_size, self.num_dims,
                                log_linear_schedule(self.residual), self.corruption)
        return model, corruption


class SmcSection(_Section):
    num_particles: int = Field(1000, ge=1)
    steps: int = Field(100, ge=1)
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    proposal: Literal["unconditional", "guided", "true-tempered"] = "guided"
    ess_threshold: Optional[float] = Field(None, ge=1)
    resampler: Literal["multinomial", "partial", "none"] = "multinomial"
    partial_size: Optional[int] = Field(None, ge=0)


class Table1Section(_Section):
    rows: list[tuple[int, int]] = [(1, 50), (2, 3), (2, 10)]
    alphas: list[float] = [2.0, 4.0]
    num_targets: int = Field(30, ge=1)
    num_samples: int = Field(50_000, ge=1)
    steps: int = Field(100, ge=1)
    epsilon: Optional[float] = Field(None, ge=0)
    spread: float = Field(1.0, gt=0)
    likelihood_range: tuple[float, float] = (1e-3, 1.0)
    beta: float = Field(1.0, ge=0)
    resampler: Literal["multinomial", "partial", "none"] = "multinomial"


class FigureSection(_Section):
    alpha: float = Field(4.0, ge=0)
    beta: float = Field(1.0, ge=0)
    num_samples: int = Field(50_000, ge=1)
    steps: int = Field(100, ge=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=0)
    target: Optional[TargetSpec] = None
    smc: SmcSection = SmcSection()
    table1: Table1Section = Table1Section()
    figure: FigureSection = FigureSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML file; raises OSError, TOMLDecodeError or ValidationError."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return ExperimentConfig.model_validate(data)


TOMLDecodeError = tomllib.TOMLDecodeError
