"""Experiment configuration: one JSON file with a section per stage.

Unknown keys are rejected at every level. Stage seeds come from the root seed
unless a section sets its own ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import PretrainConfig
from .distortions import DEFAULT_TEST_POOL
from .errors import ConfigurationError
from .finetune import FinetuneConfig
from .siren import INRConfig

STAGES = ("fit", "pretrain", "finetune", "evaluate")


def stage_seed(root: int, stage: str) -> int:
    return int(np.random.SeedSequence([root, STAGES.index(stage)]).generate_state(1)[0])


@dataclass
class FitSection:
    image: str | None = None
    resolution: tuple[int, int] | None = None
    inr: dict = field(default_factory=dict)
    lr: float = 1e-4
    steps: int = 5000
    seed: int | None = None

    def inr_config(self, seed: int) -> INRConfig:
        return _build(INRConfig, {**self.inr, "seed": seed}, "fit.inr")


@dataclass
class PretrainSection:
    settings: dict = field(default_factory=dict)
    resume: str | None = None

    def pretrain_config(self, seed: int) -> PretrainConfig:
        return _build(PretrainConfig, {"seed": seed, **self.settings}, "pretrain")


@dataclass
class FinetuneSection:
    inr_checkpoint: str | None = None
    decoder_checkpoint: str | None = None
    message_length: int = 30
    settings: dict = field(default_factory=dict)

    def finetune_config(self, seed: int) -> FinetuneConfig:
        return _build(FinetuneConfig, {"seed": seed, **self.settings}, "finetune")


@dataclass
class EvaluateSection:
    checkpoint: str | None = None
    resolutions: list[tuple[int, int]] | None = None
    pool: list[str] = field(default_factory=lambda: [str(d) for d in DEFAULT_TEST_POOL])
    quantize: bool = True
    seed: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    fit: FitSection = field(default_factory=FitSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def seed_for(self, stage: str) -> int:
        explicit = {
            "fit": self.fit.seed,
            "pretrain": self.pretrain.settings.get("seed"),
            "finetune": self.finetune.settings.get("seed"),
            "evaluate": self.evaluate.seed,
        }[stage]
        return stage_seed(self.seed, stage) if explicit is None else int(explicit)

    def section_dict(self, stage: str) -> dict:
        return dataclasses.asdict(getattr(self, stage))

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        sections = {"fit": FitSection, "pretrain": PretrainSection, "finetune": FinetuneSection, "evaluate": EvaluateSection}
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "config")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigurationError(f"section {key!r} must be an object")
                kwargs[key] = _build(sections[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        # validate nested settings eagerly so bad keys fail before any work starts
        cfg.fit.inr_config(0)
        cfg.pretrain.pretrain_config(0)
        cfg.finetune.finetune_config(0)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, data: dict, where: str):
    init_fields = {f.name for f in dataclasses.fields(cls) if f.init}
    _reject_unknown(data, init_fields, where)
    data = {k: v for k, v in data.items() if not (k == "seed" and v is None)}
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigurationError(f"{where}: {err}") from None


def resolved(obj) -> dict:
    """Dataclass fields as plain JSON values (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(obj)))
