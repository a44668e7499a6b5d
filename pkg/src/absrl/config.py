"""Run configuration: a layered key tree (defaults < config file < CLI flags).

Files may be JSON or YAML; the resolved tree is hashed into every manifest so
reruns are attributable to an exact configuration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .core import DataError, canonical_json, stable_hash


@dataclass
class BackendSettings:
    kind: str = "sim"  # "sim" | "http"
    base_url: str = "http://localhost:8000/v1"
    model: str = "local-model"
    api_key_env: str = "OPENAI_API_KEY"
    request_cap: int = 32
    max_retries: int = 4
    timeout: float = 120.0
    sim_world: str | None = None  # world JSON path; None uses the bundled fixture
    default_boost: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("sim", "http"):
            raise DataError(f"backend kind must be sim or http, got {self.kind!r}")


@dataclass
class SamplingSettings:
    temperature: float = 0.6
    max_tokens: int = 16384
    train_samples: int = 16
    val_samples: int = 8


@dataclass
class DatagenSettings:
    n_traces: int = 4
    n_candidates: int = 4
    leak_samples: int = 16
    # None picks a per-backend default: cheap simulator rollouts afford 1000,
    # LLM backends default to 16.
    uplift_samples: int | None = None

    def resolved_uplift_samples(self, backend_kind: str) -> int:
        if self.uplift_samples is not None:
            return self.uplift_samples
        return 1000 if backend_kind == "sim" else 16


@dataclass
class RewardSettings:
    mix_ratio: float = 0.25
    abstraction_reward_uses_masked: bool = False


@dataclass
class CurriculumSettings:
    easy_min: float = 0.6
    hard_max: float = 0.1
    partition_samples: int = 32
    stages: list[list[Any]] = field(
        default_factory=lambda: [["easy", 8192], ["medium", 16384]]
    )


@dataclass
class TrainSettings:
    epochs: int = 2
    tau: float = 0.5
    max_kept_per_problem: int = 2
    n_abstractions_per_problem: int = 4
    reward_rollouts: int = 16
    abs_batch_size: int = 8
    sol_batch_size: int = 8
    group_size: int = 16
    lr_abs: float = 1.0
    lr_sol: float = 0.5


@dataclass
class EvalSettings:
    n_samples: int = 8
    n_abstractions: int = 4


@dataclass
class AnalysisSettings:
    budgets: list[int] = field(default_factory=lambda: [64])
    k0_list: list[int] = field(default_factory=lambda: [0, 2, 4, 6, 8])
    adherence_max_pairs: int = 200


@dataclass
class RunConfig:
    backend: BackendSettings = field(default_factory=BackendSettings)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)
    datagen: DatagenSettings = field(default_factory=DatagenSettings)
    rewards: RewardSettings = field(default_factory=RewardSettings)
    curriculum: CurriculumSettings = field(default_factory=CurriculumSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return stable_hash(canonical_json(self.to_dict()))


_SECTION_TYPES = {
    "backend": BackendSettings,
    "sampling": SamplingSettings,
    "datagen": DatagenSettings,
    "rewards": RewardSettings,
    "curriculum": CurriculumSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
    "analysis": AnalysisSettings,
}


def config_from_dict(tree: Mapping[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    for key, value in tree.items():
        if key not in _SECTION_TYPES:
            raise DataError(
                f"unknown config section {key!r}; known: {sorted(_SECTION_TYPES)}"
            )
        section_type = _SECTION_TYPES[key]
        known = {f.name for f in fields(section_type)}
        unknown = set(value) - known
        if unknown:
            raise DataError(
                f"unknown keys in config section {key!r}: {sorted(unknown)}"
            )
        kwargs[key] = section_type(**value)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        tree = yaml.safe_load(text) or {}
    elif path.suffix == ".json":
        tree = json.loads(text)
    else:
        raise DataError(f"config must be .json or .yaml, got {path.suffix!r}")
    if not isinstance(tree, dict):
        raise DataError("config root must be a mapping")
    return config_from_dict(tree)


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply dotted-key overrides ('backend.kind' -> value); flags win over files."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section_name, _, field_name = dotted.partition(".")
        if not field_name or section_name not in _SECTION_TYPES:
            raise DataError(f"bad override key {dotted!r}")
        section = getattr(config, section_name)
        if not hasattr(section, field_name):
            raise DataError(f"bad override key {dotted!r}")
        setattr(section, field_name, value)
    return config
