"""Two-player training orchestration.

Each joint epoch alternates two phases. The abstraction phase samples
candidate abstractions per problem, scores each by the mean accuracy it
induces in the solution policy, keeps the best scorers above a threshold, and
emits them as an SFT shard (applying a toy in-process update when the policy
is simulated). The solution phase emits grouped rollout shards with masked
group-relative advantages for an external trainer, again stepping simulated
policies in-process. A curriculum schedule moves training from easier splits
and smaller token budgets to harder ones; the hard split is held out entirely.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .backends.base import PolicyBackend, PromptParts, SamplingParams, replace_params
from .core import (
    NO_ABSTRACTION,
    Abstraction,
    DataError,
    Problem,
    RolloutRecord,
    RunManifest,
    canonical_json,
    derive_seed,
    manifest_timestamp,
    stable_hash,
    stamp_file,
    write_jsonl,
    write_manifest,
)
from .rewards import (
    KEEP_KL_ON_MASKED,
    MixRatio,
    PromptGroup,
    abstraction_reward,
    compose_batch,
    group_advantages,
    group_shard_record,
    solution_reward,
    summarize_group,
)
from .verifier import check_answer, extract_answer

logger = logging.getLogger(__name__)

TRAINABLE_SPLITS = ("easy", "medium")


@dataclass(frozen=True)
class CurriculumStage:
    split: str
    token_budget: int

    def __post_init__(self) -> None:
        if self.split not in TRAINABLE_SPLITS:
            raise DataError(
                f"stage split must be one of {TRAINABLE_SPLITS}, got {self.split!r}; "
                "the hard split is held out from training"
            )
        if self.token_budget < 1:
            raise DataError("token_budget must be >= 1")


@dataclass(frozen=True)
class CurriculumConfig:
    easy_min: float = 0.6
    hard_max: float = 0.1
    stages: tuple[CurriculumStage, ...] = (
        CurriculumStage("easy", 8192),
        CurriculumStage("medium", 16384),
    )

    def __post_init__(self) -> None:
        if not 0.0 <= self.hard_max < self.easy_min <= 1.0:
            raise DataError(
                f"need 0 <= hard_max < easy_min <= 1, got "
                f"hard_max={self.hard_max}, easy_min={self.easy_min}"
            )
        if not self.stages:
            raise DataError("curriculum needs at least one stage")

    def tag_for_rate(self, rate: Fraction | float) -> str:
        if rate >= self.easy_min:
            return "easy"
        if rate <= self.hard_max:
            return "hard"
        return "medium"

    def stage_for_epoch(self, epoch: int, total_epochs: int) -> CurriculumStage:
        """Map a 1-based epoch to a stage; earlier stages absorb remainders."""
        idx = (len(self.stages) * (epoch - 1)) // total_epochs
        return self.stages[idx]


@dataclass(frozen=True)
class RftConfig:
    tau: float = 0.5
    max_kept_per_problem: int = 2
    n_abstractions_per_problem: int = 4
    reward_rollouts: int = 16
    abs_batch_size: int = 8
    sol_batch_size: int = 8
    group_size: int = 16
    lr_abs: float = 1.0
    lr_sol: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise DataError("tau must lie in [0, 1]")
        for name in (
            "max_kept_per_problem",
            "n_abstractions_per_problem",
            "reward_rollouts",
            "abs_batch_size",
            "sol_batch_size",
            "group_size",
        ):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")


# Hyperparameters recorded for the external trainer that consumes the shards;
# the in-process toy updates do not use them.
EXTERNAL_TRAINER_DEFAULTS: dict[str, Any] = {
    "train_batch_size": 128,
    "clip_ratio_low": 0.2,
    "clip_ratio_high": 0.5,
    "entropy_coeff": 0.001,
    "kl_coeff": 0.001,
    "learning_rate": 1e-6,
    "max_prompt_tokens": 3072,
    "max_response_tokens": 16384,
    "keep_kl_on_masked": KEEP_KL_ON_MASKED,
}


@dataclass
class TrainState:
    """Mutable loop state threaded through the epochs."""

    out_dir: Path
    master_seed: int
    abs_policy: PolicyBackend
    sol_policy: PolicyBackend
    config_hash: str
    env: Any = None  # SimEnv when simulated; None for HTTP policies
    deterministic_time: bool = True
    epoch: int = 0
    parent_manifest_hash: str | None = None
    epoch_stats: list[dict[str, Any]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Rollout plumbing
# ---------------------------------------------------------------------------


def rollout_group(
    problem: Problem,
    abstraction: Abstraction | None,
    solver: PolicyBackend,
    params: SamplingParams,
    n: int,
    seed: int,
) -> tuple[PromptGroup, list[RolloutRecord]]:
    """Sample one prompt group and grade it."""
    abstraction_id = abstraction.id if abstraction is not None else NO_ABSTRACTION
    parts = PromptParts(
        problem=problem.prompt,
        abstraction=abstraction.text if abstraction is not None else None,
        problem_id=problem.id,
    )
    completions = solver.sample(parts, replace_params(params, n_samples=n, seed=seed))
    records: list[RolloutRecord] = []
    for comp in completions:
        extracted = extract_answer(comp.text)
        correct = check_answer(extracted, problem.gold_answer)
        record = RolloutRecord(
            problem_id=problem.id,
            abstraction_id=abstraction_id,
            solution_text=comp.text,
            correct=correct,
            reward=0.0,  # placeholder until masked reward below
            seed=seed,
            token_count=comp.token_count,
            extracted_answer=extracted,
        )
        records.append(dataclasses.replace(record, reward=solution_reward(record)))
    group = PromptGroup(
        problem_id=problem.id,
        abstraction_id=abstraction_id,
        rollout_seeds=tuple(seed for _ in records),
        group_kind="no_abs" if abstraction is None else "with_abs",
    )
    return group, records


def measure_success_rate(
    problem: Problem,
    solver: PolicyBackend,
    params: SamplingParams,
    n: int,
    master_seed: int,
) -> Fraction:
    seed = derive_seed(master_seed, f"partition/{problem.id}", 0)
    _, records = rollout_group(problem, None, solver, params, n, seed)
    return Fraction(sum(1 for r in records if r.correct), len(records))


def partition_by_success(
    problems: Sequence[Problem],
    solver: PolicyBackend,
    params: SamplingParams,
    n: int,
    cfg: CurriculumConfig,
    master_seed: int = 0,
) -> list[Problem]:
    """Tag each problem easy/medium/hard by its unconditioned success rate.

    Problems that already carry a split tag are passed through untouched, so a
    partially completed partition can be resumed by feeding its output back in.
    """
    if n < 1:
        raise DataError("partition needs n >= 1 rollouts per problem")
    out: list[Problem] = []
    for problem in problems:
        if problem.split_tag != "unassigned":
            out.append(problem)
            continue
        rate = measure_success_rate(problem, solver, params, n, master_seed)
        out.append(
            dataclasses.replace(
                problem,
                split_tag=cfg.tag_for_rate(rate),
                base_success_rate=float(rate),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Phase 1: abstraction policy (rejection fine-tuning)
# ---------------------------------------------------------------------------


@dataclass
class RftEpochResult:
    mean_reward: float
    n_sampled: int
    n_kept: int
    kept: list[tuple[Problem, Abstraction, float]]
    sft_records: list[dict[str, Any]]


def rft_epoch_abs(
    problems: Sequence[Problem],
    state: TrainState,
    cfg: RftConfig,
    params: SamplingParams,
) -> RftEpochResult:
    """One rejection fine-tuning round for the abstraction policy.

    Every sampled abstraction (with multiplicity) counts toward the epoch's
    mean reward, so the statistic tracks the policy's actual output quality;
    scoring itself is cached per unique text.
    """
    epoch_label = f"epoch{state.epoch}"
    kept: list[tuple[Problem, Abstraction, float]] = []
    sft_records: list[dict[str, Any]] = []
    reward_total = Fraction(0)
    n_sampled = 0
    for problem in problems:
        abs_seed = derive_seed(state.master_seed, f"{epoch_label}/abs-sample/{problem.id}", 0)
        completions = state.abs_policy.sample(
            PromptParts(problem=problem.prompt, problem_id=problem.id),
            replace_params(params, n_samples=cfg.n_abstractions_per_problem, seed=abs_seed),
        )
        scored: dict[str, float] = {}
        multiplicity: dict[str, int] = {}
        for completion in completions:
            text = completion.text
            multiplicity[text] = multiplicity.get(text, 0) + 1
            if text in scored:
                continue
            abstraction = Abstraction.create(
                problem_id=problem.id, text=text, source="generator_model"
            )
            if state.env is not None:
                state.env.note_abstraction(abstraction.id, text)
            roll_seed = derive_seed(
                state.master_seed, f"{epoch_label}/abs-score/{problem.id}/{abstraction.id}", 0
            )
            _, records = rollout_group(
                problem, abstraction, state.sol_policy, params, cfg.reward_rollouts, roll_seed
            )
            summary = summarize_group(problem.id, abstraction.id, records)
            scored[text] = abstraction_reward(summary)
        for text, count in multiplicity.items():
            reward_total += Fraction(scored[text]) * count
            n_sampled += count
        ranked = sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))
        kept_here = [
            (text, reward) for text, reward in ranked if reward >= cfg.tau
        ][: cfg.max_kept_per_problem]
        for text, reward in kept_here:
            abstraction = Abstraction.create(
                problem_id=problem.id, text=text, source="generator_model"
            )
            kept.append((problem, abstraction, reward))
            sft_records.append(
                {
                    "problem_id": problem.id,
                    "prompt": problem.prompt,
                    "target": text,
                    "reward": reward,
                }
            )
        if kept_here and hasattr(state.abs_policy, "rft_update"):
            state.abs_policy.rft_update(
                problem.id, [text for text, _ in kept_here], cfg.lr_abs
            )
    mean_reward = float(reward_total / n_sampled) if n_sampled else 0.0
    if not kept:
        logger.warning("rft epoch %d kept zero abstractions", state.epoch)
    return RftEpochResult(
        mean_reward=mean_reward,
        n_sampled=n_sampled,
        n_kept=len(kept),
        kept=kept,
        sft_records=sft_records,
    )


# ---------------------------------------------------------------------------
# Phase 2: solution policy batches
# ---------------------------------------------------------------------------


@dataclass
class SolBatchResult:
    groups: list[PromptGroup]
    shard_records: list[dict[str, Any]]
    records: list[RolloutRecord]
    mean_with_abs_reward: float


def emit_sol_batches(
    problems: Sequence[Problem],
    state: TrainState,
    cfg: RftConfig,
    params: SamplingParams,
    mix: MixRatio,
) -> SolBatchResult:
    """Build one mixed batch of scored prompt groups for the solution policy."""
    epoch_label = f"epoch{state.epoch}"
    with_entries: list[tuple[PromptGroup, Problem, str | None, list[RolloutRecord]]] = []
    for problem in problems:
        abs_seed = derive_seed(
            state.master_seed, f"{epoch_label}/sol-abs/{problem.id}", 0
        )
        completions = state.abs_policy.sample(
            PromptParts(problem=problem.prompt, problem_id=problem.id),
            replace_params(params, n_samples=cfg.n_abstractions_per_problem, seed=abs_seed),
        )
        unique_texts = list(dict.fromkeys(c.text for c in completions))
        for text in unique_texts:
            abstraction = Abstraction.create(
                problem_id=problem.id, text=text, source="generator_model"
            )
            if state.env is not None:
                state.env.note_abstraction(abstraction.id, text)
            seed = derive_seed(
                state.master_seed,
                f"{epoch_label}/sol-group/{problem.id}/{abstraction.id}",
                0,
            )
            group, records = rollout_group(
                problem, abstraction, state.sol_policy, params, cfg.group_size, seed
            )
            with_entries.append((group, problem, text, records))
    if not with_entries:
        raise DataError("solution phase produced no with-abstraction groups")
    # Enough no-abstraction groups to hit the mix ratio exactly. The decrement
    # handles the rounding edge where the derived batch would demand one more
    # with-abstraction group than was sampled.
    batch_size = round(len(with_entries) / (1.0 - mix.value))
    n_no = int(math.floor(mix.value * batch_size + 0.5))
    if batch_size - n_no > len(with_entries):
        batch_size -= 1
        n_no = int(math.floor(mix.value * batch_size + 0.5))
    no_entries: list[tuple[PromptGroup, Problem, str | None, list[RolloutRecord]]] = []
    order = sorted(problems, key=lambda p: p.id)
    for i in range(n_no):
        problem = order[i % len(order)]
        seed = derive_seed(
            state.master_seed, f"{epoch_label}/sol-noabs/{problem.id}", i
        )
        group, records = rollout_group(
            problem, None, state.sol_policy, params, cfg.group_size, seed
        )
        no_entries.append((group, problem, None, records))
    batch = compose_batch(
        [e[0] for e in with_entries],
        [e[0] for e in no_entries],
        mix,
        seed=derive_seed(state.master_seed, f"{epoch_label}/compose", 0),
        batch_size=batch_size,
    )
    # Attach advantages and build shard lines in composed order.
    entry_by_group = {id(e[0]): e for e in with_entries + no_entries}
    shard_records: list[dict[str, Any]] = []
    all_records: list[RolloutRecord] = []
    with_reward_total = Fraction(0)
    with_reward_count = 0
    for group in batch:
        _, problem, abs_text, records = entry_by_group[id(group)]
        advantages = group_advantages(group, [r.reward for r in records])
        scored = [
            dataclasses.replace(r, advantage=a) for r, a in zip(records, advantages)
        ]
        if group.group_kind == "with_abs":
            with_reward_total += sum(Fraction(r.reward) for r in scored)
            with_reward_count += len(scored)
        shard_records.append(
            group_shard_record(group, problem.prompt, abs_text, scored)
        )
        all_records.extend(scored)
    if hasattr(state.sol_policy, "apply_gradient"):
        state.sol_policy.apply_gradient(all_records, cfg.lr_sol)
    mean_with = (
        float(with_reward_total / with_reward_count) if with_reward_count else 0.0
    )
    return SolBatchResult(
        groups=batch,
        shard_records=shard_records,
        records=all_records,
        mean_with_abs_reward=mean_with,
    )


# ---------------------------------------------------------------------------
# Joint loop
# ---------------------------------------------------------------------------


def _select_batch(
    problems: Sequence[Problem], size: int, master_seed: int, label: str
) -> list[Problem]:
    ordered = sorted(problems, key=lambda p: p.id)
    if len(ordered) <= size:
        return ordered
    rng = random.Random(derive_seed(master_seed, label, 0))
    return rng.sample(ordered, size)


def _write_checkpoint(state: TrainState, path: Path) -> None:
    snapshot = state.env.snapshot() if state.env is not None else None
    payload = {
        "epoch": state.epoch,
        "master_seed": state.master_seed,
        "config_hash": state.config_hash,
        "parent_manifest_hash": state.parent_manifest_hash,
        "epoch_stats": state.epoch_stats,
        "env_snapshot": snapshot,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        canonical_json(payload) + "\n",
        encoding="utf-8",
    )


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def run_joint(
    problems: Sequence[Problem],
    state: TrainState,
    rft_cfg: RftConfig,
    curriculum: CurriculumConfig,
    params: SamplingParams,
    epochs: int,
    mix: MixRatio = MixRatio(),
    resume_from: str | Path | None = None,
) -> list[dict[str, Any]]:
    """Alternate abstraction and solution phases for ``epochs`` epochs.

    Writes per-epoch shards, a hash-chained manifest per epoch, and a
    checkpoint after each epoch; ``resume_from`` continues an interrupted run
    with identical remaining outputs because all randomness flows from
    (master_seed, epoch) derived streams.
    """
    if epochs < 0:
        raise DataError("epochs must be >= 0")
    untagged = [p.id for p in problems if p.split_tag == "unassigned"]
    if untagged:
        raise DataError(
            f"run_joint needs partitioned problems; unassigned: {untagged[:3]}"
        )
    hard_ids = {p.id for p in problems if p.split_tag == "hard"}
    start_epoch = 1
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        if checkpoint["config_hash"] != state.config_hash:
            raise DataError("checkpoint config_hash does not match this run's config")
        if checkpoint["master_seed"] != state.master_seed:
            raise DataError("checkpoint master_seed does not match this run")
        if state.env is not None and checkpoint["env_snapshot"] is not None:
            state.env.restore(checkpoint["env_snapshot"])
        state.epoch_stats = list(checkpoint["epoch_stats"])
        state.parent_manifest_hash = checkpoint["parent_manifest_hash"]
        start_epoch = checkpoint["epoch"] + 1
    for epoch in range(start_epoch, epochs + 1):
        state.epoch = epoch
        stage = curriculum.stage_for_epoch(epoch, epochs)
        stage_params = replace_params(params, max_tokens=stage.token_budget)
        stage_problems = [p for p in problems if p.split_tag == stage.split]
        assert not (set(p.id for p in stage_problems) & hard_ids)
        epoch_dir = state.out_dir / f"epoch_{epoch:03d}"
        stats: dict[str, Any] = {
            "epoch": epoch,
            "stage_split": stage.split,
            "token_budget": stage.token_budget,
        }
        outputs: list[Path] = []
        if not stage_problems:
            logger.warning(
                "epoch %d: stage split %r has no problems; skipping phases",
                epoch,
                stage.split,
            )
            stats.update({"mean_abstraction_reward": None, "n_kept": 0, "n_groups": 0})
        else:
            abs_batch = _select_batch(
                stage_problems,
                rft_cfg.abs_batch_size,
                state.master_seed,
                f"epoch{epoch}/abs-batch",
            )
            rft_result = rft_epoch_abs(abs_batch, state, rft_cfg, stage_params)
            if rft_result.sft_records:
                sft_path = epoch_dir / "abs_sft.jsonl"
                write_jsonl(rft_result.sft_records, sft_path)
                outputs.append(sft_path)
            sol_batch = _select_batch(
                stage_problems,
                rft_cfg.sol_batch_size,
                state.master_seed,
                f"epoch{epoch}/sol-batch",
            )
            sol_result = emit_sol_batches(sol_batch, state, rft_cfg, stage_params, mix)
            groups_path = epoch_dir / "sol_groups.jsonl"
            write_jsonl(sol_result.shard_records, groups_path)
            outputs.append(groups_path)
            stats.update(
                {
                    "mean_abstraction_reward": rft_result.mean_reward,
                    "n_abstractions_sampled": rft_result.n_sampled,
                    "n_kept": rft_result.n_kept,
                    "n_groups": len(sol_result.groups),
                    "mean_with_abs_reward": sol_result.mean_with_abs_reward,
                }
            )
        state.epoch_stats.append(stats)
        stamp = manifest_timestamp(state.deterministic_time)
        manifest = RunManifest(
            stage=f"train-joint/epoch-{epoch}",
            config_hash=state.config_hash,
            master_seed=state.master_seed,
            inputs=[],
            outputs=[stamp_file(p, base_dir=state.out_dir) for p in outputs],
            started=stamp,
            finished=stamp,
            parent_manifest_hash=state.parent_manifest_hash,
            details={
                **stats,
                "mix_ratio": mix.value,
                "external_trainer": EXTERNAL_TRAINER_DEFAULTS,
            },
        )
        state.parent_manifest_hash = write_manifest(
            manifest, epoch_dir / "manifest.json"
        )
        _write_checkpoint(state, state.out_dir / "checkpoint.json")
    return state.epoch_stats
