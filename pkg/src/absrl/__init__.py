"""Two-player abstraction/solution training harness with pluggable backends."""

from .core import (
    NO_ABSTRACTION,
    Abstraction,
    DataError,
    Problem,
    RewardSummary,
    RolloutRecord,
    RunManifest,
    derive_seed,
)
from .rewards import MixRatio, group_advantages, solution_reward
from .verifier import check_answer, extract_answer, leak_check

__version__ = "0.1.0"

__all__ = [
    "NO_ABSTRACTION",
    "Abstraction",
    "DataError",
    "MixRatio",
    "Problem",
    "RewardSummary",
    "RolloutRecord",
    "RunManifest",
    "check_answer",
    "derive_seed",
    "extract_answer",
    "group_advantages",
    "leak_check",
    "solution_reward",
    "__version__",
]
