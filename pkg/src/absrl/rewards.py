"""Reward shaping and group advantages for the two-player training loop.

The solution generator is scored by binary correctness, masked to zero when no
abstraction conditioned the rollout; the abstraction generator is scored by
the mean accuracy its abstraction induces in the solver. Advantages are
group-relative (reward minus group mean, no variance normalization), and
no-abstraction groups are forced to advantage exactly 0 so they contribute no
policy gradient while still anchoring the solver's unconditioned behavior
through the external trainer's KL term.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping, Sequence

from .core import NO_ABSTRACTION, DataError, RewardSummary, RolloutRecord, derive_seed

GROUP_KINDS = ("with_abs", "no_abs")

# Manifest-level flag: masked groups keep their KL regularization in the
# external trainer even though their advantage is zeroed here.
KEEP_KL_ON_MASKED = True


@dataclass(frozen=True)
class MixRatio:
    """Fraction of no-abstraction groups mixed into each training batch."""

    value: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.value < 1.0:
            raise DataError(f"mix ratio must be in [0, 1), got {self.value}")


@dataclass(frozen=True)
class PromptGroup:
    """All rollouts that share one (problem, abstraction-or-none) prompt."""

    problem_id: str
    abstraction_id: str
    rollout_seeds: tuple[int, ...]
    group_kind: str

    def __post_init__(self) -> None:
        if self.group_kind not in GROUP_KINDS:
            raise DataError(f"unknown group_kind {self.group_kind!r}")
        if (self.group_kind == "no_abs") != (self.abstraction_id == NO_ABSTRACTION):
            raise DataError(
                "group_kind no_abs exactly when abstraction_id is the no-abstraction sentinel"
            )
        if not self.rollout_seeds:
            raise DataError("a prompt group needs at least one rollout")


def solution_reward(record: RolloutRecord) -> float:
    """Masked binary reward: 0 without an abstraction, else correctness."""
    if record.abstraction_id == NO_ABSTRACTION:
        return 0.0
    return 1.0 if record.correct else 0.0


def abstraction_reward(summary: RewardSummary, use_masked: bool = False) -> float:
    """Mean solver accuracy under this abstraction.

    With ``use_masked`` the no-abstraction condition scores 0 exactly like the
    solution reward; by default plain accuracy is used, which only differs for
    the no-abstraction sentinel.
    """
    if use_masked and summary.abstraction_id == NO_ABSTRACTION:
        return 0.0
    return float(summary.mean_acc)


def group_advantages(group: PromptGroup, rewards: Sequence[float]) -> list[float]:
    """Group-relative advantages: reward minus group mean; masked groups are all-zero.

    Exact rational arithmetic keeps the with-abstraction advantages summing to
    zero to within float conversion error.
    """
    if len(rewards) != len(group.rollout_seeds):
        raise DataError(
            f"group {group.problem_id}/{group.abstraction_id}: "
            f"{len(rewards)} rewards for {len(group.rollout_seeds)} rollouts"
        )
    if group.group_kind == "no_abs":
        return [0.0] * len(rewards)
    exact = [Fraction(r) for r in rewards]  # exact binary expansion of each float
    mean = sum(exact, Fraction(0)) / len(exact)
    return [float(r - mean) for r in exact]


def compose_batch(
    with_groups: Sequence[PromptGroup],
    no_groups: Sequence[PromptGroup],
    ratio: MixRatio,
    seed: int,
    batch_size: int,
) -> list[PromptGroup]:
    """Mix the two group kinds at the requested ratio and shuffle deterministically.

    The no-abstraction count is the ratio rounded half-up to an integer.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n_no = int(math.floor(ratio.value * batch_size + 0.5))
    n_with = batch_size - n_no
    if n_with > len(with_groups):
        raise DataError(
            f"need {n_with} with-abstraction groups, have {len(with_groups)}"
        )
    if n_no > len(no_groups):
        raise DataError(f"need {n_no} no-abstraction groups, have {len(no_groups)}")
    batch = list(with_groups[:n_with]) + list(no_groups[:n_no])
    rng = random.Random(derive_seed(seed, "compose_batch", batch_size))
    rng.shuffle(batch)
    return batch


def group_shard_record(
    group: PromptGroup,
    problem_prompt: str,
    abstraction_text: str | None,
    records: Sequence[RolloutRecord],
) -> dict[str, Any]:
    """One training-shard line for the external trainer."""
    if len(records) != len(group.rollout_seeds):
        raise DataError("records do not match the group's rollouts")
    advantages = [r.advantage for r in records]
    if any(a is None for a in advantages):
        raise DataError("records must carry advantages before shard emission")
    return {
        "problem_id": group.problem_id,
        "abstraction_id": group.abstraction_id,
        "group_kind": group.group_kind,
        "prompt_parts": {
            "problem": problem_prompt,
            "abstraction": abstraction_text,
        },
        "completions": [r.solution_text for r in records],
        "rewards": [r.reward for r in records],
        "advantages": advantages,
        "keep_kl_on_masked": KEEP_KL_ON_MASKED,
    }


def summarize_group(
    problem_id: str, abstraction_id: str, records: Sequence[RolloutRecord]
) -> RewardSummary:
    if not records:
        raise DataError("cannot summarize an empty rollout group")
    return RewardSummary(
        problem_id=problem_id,
        abstraction_id=abstraction_id,
        n_rollouts=len(records),
        n_correct=sum(1 for r in records if r.correct),
    )
