"""Warmstart data generation: summarize traces into candidate abstractions,
filter them by measured uplift and leak checks, and build the SFT corpus.

The uplift filter runs paired with/without rollouts from a common derivedseed
stream and keeps a candidate only when its accuracy gain is strictly positive;
ties drop.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .backends.base import PolicyBackend, PromptParts, SamplingParams, SummarizerBackend, replace_params
from .core import (
    Abstraction,
    DataError,
    Problem,
    derive_seed,
    write_jsonl,
)
from .verifier import check_answer, extract_answer

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")


def _tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def contains_answer(text: str, gold_answer: str) -> bool:
    """True when the gold answer appears as a contiguous token subsequence."""
    needle = _tokens(gold_answer)
    if not needle:
        return False
    haystack = _tokens(text)
    span = len(needle)
    return any(haystack[i : i + span] == needle for i in range(len(haystack) - span + 1))


@dataclass(frozen=True)
class SummarizationJob:
    problem: Problem
    traces: tuple[str, ...]
    n_candidates: int = 4

    def __post_init__(self) -> None:
        if not self.traces:
            raise DataError(
                f"summarization for {self.problem.id!r} needs at least one trace"
            )
        if self.n_candidates < 1:
            raise DataError("n_candidates must be >= 1")


def generate_candidates(
    job: SummarizationJob,
    summarizer: SummarizerBackend,
    seed: int = 0,
) -> list[Abstraction]:
    """Candidate abstractions for one problem, deduplicated and answer-screened.

    Candidates that textually contain the gold answer are dropped here; the
    leak check later catches subtler give-aways.
    """
    texts = summarizer.summarize(
        job.problem.prompt,
        job.traces,
        n_candidates=job.n_candidates,
        seed=derive_seed(seed, f"summarize/{job.problem.id}", 0),
    )
    seen: set[str] = set()
    out: list[Abstraction] = []
    for text in texts:
        normalized = " ".join(text.split()).casefold()
        if not normalized or normalized in seen:
            continue
        seen.add(normalized)
        if contains_answer(text, job.problem.gold_answer):
            logger.debug(
                "dropping candidate for %s: contains the gold answer", job.problem.id
            )
            continue
        out.append(
            Abstraction.create(
                problem_id=job.problem.id,
                text=text,
                source="summarizer",
            )
        )
    return out


@dataclass(frozen=True)
class UpliftReport:
    """Paired with/without accuracy measurement for one abstraction."""

    problem_id: str
    abstraction_id: str
    acc_with: float
    acc_without: float
    n_with: int
    n_without: int
    uplift: float
    decision: str  # "keep" | "drop"

    @classmethod
    def from_counts(
        cls,
        problem_id: str,
        abstraction_id: str,
        c_with: int,
        n_with: int,
        c_without: int,
        n_without: int,
    ) -> "UpliftReport":
        if n_with < 1 or n_without < 1:
            raise DataError("uplift needs at least one rollout per arm")
        acc_with = Fraction(c_with, n_with)
        acc_without = Fraction(c_without, n_without)
        # Strict inequality on exact fractions: ties drop.
        decision = "keep" if acc_with > acc_without else "drop"
        return cls(
            problem_id=problem_id,
            abstraction_id=abstraction_id,
            acc_with=float(acc_with),
            acc_without=float(acc_without),
            n_with=n_with,
            n_without=n_without,
            uplift=float(acc_with - acc_without),
            decision=decision,
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "abstraction_id": self.abstraction_id,
            "acc_with": self.acc_with,
            "acc_without": self.acc_without,
            "n_with": self.n_with,
            "n_without": self.n_without,
            "uplift": self.uplift,
            "decision": self.decision,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "UpliftReport":
        return cls(**rec)


def _count_correct(
    problem: Problem,
    abstraction_text: str | None,
    solver: PolicyBackend,
    params: SamplingParams,
    n: int,
    seed: int,
) -> int:
    parts = PromptParts(
        problem=problem.prompt,
        abstraction=abstraction_text,
        problem_id=problem.id,
    )
    completions = solver.sample(parts, replace_params(params, n_samples=n, seed=seed))
    return sum(
        1
        for comp in completions
        if check_answer(extract_answer(comp.text), problem.gold_answer)
    )


def measure_uplift(
    problem: Problem,
    abstraction: Abstraction,
    solver: PolicyBackend,
    params: SamplingParams,
    n: int,
    master_seed: int = 0,
) -> UpliftReport:
    """Measure the accuracy delta an abstraction buys.

    Both arms draw from seed streams derived from the same master seed, so the
    comparison is paired and reruns are exact.
    """
    if abstraction.problem_id != problem.id:
        raise DataError(
            f"abstraction {abstraction.id!r} belongs to {abstraction.problem_id!r}, "
            f"not {problem.id!r}"
        )
    seed_with = derive_seed(master_seed, f"uplift/{abstraction.id}/with", 0)
    seed_without = derive_seed(master_seed, f"uplift/{abstraction.id}/without", 0)
    c_with = _count_correct(problem, abstraction.text, solver, params, n, seed_with)
    c_without = _count_correct(problem, None, solver, params, n, seed_without)
    return UpliftReport.from_counts(
        problem_id=problem.id,
        abstraction_id=abstraction.id,
        c_with=c_with,
        n_with=n,
        c_without=c_without,
        n_without=n,
    )


def build_sft_corpus(
    problems: Sequence[Problem],
    kept: Sequence[tuple[Abstraction, UpliftReport]],
    path: str | Path,
) -> int:
    """Write the warmstart SFT corpus; returns the number of records written.

    Every abstraction must have passed its leak check and carry a keep
    decision; anything else is a caller bug and raises naming the offender.
    """
    prompts = {p.id: p.prompt for p in problems}
    records: list[dict[str, Any]] = []
    for abstraction, report in kept:
        if abstraction.leak_status != "passed":
            raise DataError(
                f"abstraction {abstraction.id!r} has leak_status "
                f"{abstraction.leak_status!r}; only passed ones enter the corpus"
            )
        if report.decision != "keep":
            raise DataError(
                f"abstraction {abstraction.id!r} carries decision {report.decision!r}"
            )
        if abstraction.id != report.abstraction_id:
            raise DataError(
                f"report {report.abstraction_id!r} does not match abstraction "
                f"{abstraction.id!r}"
            )
        if abstraction.problem_id not in prompts:
            raise DataError(
                f"abstraction {abstraction.id!r} references unknown problem "
                f"{abstraction.problem_id!r}"
            )
        records.append(
            {
                "problem_id": abstraction.problem_id,
                "prompt": prompts[abstraction.problem_id],
                "target": abstraction.text,
                "uplift": report.uplift,
                "n_with": report.n_with,
                "n_without": report.n_without,
            }
        )
    write_jsonl(records, path)
    return len(records)
