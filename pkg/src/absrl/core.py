"""Shared data model: typed records, id and seed discipline, JSONL persistence, run manifests.

Every pipeline stage communicates through the record types defined here. Records
serialize to JSON objects with lower_snake_case field names, one per line in
.jsonl files; manifests are single JSON documents. Serialization is lossless:
``parse(serialize(r)) == r`` for every type below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

TOOL_VERSION = "0.1.0"

# Distinguished sentinel for the "no abstraction" condition. Deliberately not
# an empty string so an accidentally blank field cannot masquerade as it.
NO_ABSTRACTION = "__no_abstraction__"

SPLIT_TAGS = ("easy", "medium", "hard", "unassigned")
ABSTRACTION_SOURCES = ("summarizer", "generator_model", "human")
LEAK_STATUSES = ("unchecked", "passed", "failed")

# Timestamp used for deterministic (simulator-backed) runs so reruns with the
# same master seed produce byte-identical manifests.
FIXED_TIMESTAMP = "1970-01-01T00:00:00+00:00"


class DataError(ValueError):
    """Malformed record, duplicate id, or violated data contract."""


def stable_hash(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def problem_id_for(prompt: str) -> str:
    """Stable content hash of the prompt bytes; the problem's identity."""
    return "p" + stable_hash(prompt)[:16]


def abstraction_id_for(problem_id: str, text: str) -> str:
    return "a" + stable_hash(problem_id + "\x00" + text)[:16]


def derive_seed(master_seed: int, stream_label: str, index: int) -> int:
    """Derive a 64-bit child seed for a named stream.

    Hash-based so that distinct (master_seed, stream_label, index) triples
    collide with probability ~2**-64; no modular arithmetic shortcuts.
    """
    payload = f"{master_seed}\x1f{stream_label}\x1f{index}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big")


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


# ---------------------------------------------------------------------------
# Record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Problem:
    """A single task instance with a verifiable gold answer."""

    id: str
    prompt: str
    gold_answer: str
    split_tag: str = "unassigned"
    base_success_rate: float | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise DataError("problem prompt must be non-empty")
        if not self.gold_answer:
            raise DataError(f"problem {self.id!r} has empty gold answer")
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"problem {self.id!r}: unknown split_tag {self.split_tag!r}")
        expected = problem_id_for(self.prompt)
        if self.id != expected:
            raise DataError(
                f"problem id {self.id!r} does not match content hash {expected!r}"
            )
        has_rate = self.base_success_rate is not None
        if has_rate != (self.split_tag != "unassigned"):
            raise DataError(
                f"problem {self.id!r}: base_success_rate must be present exactly "
                f"when split_tag is assigned (tag={self.split_tag!r})"
            )
        if has_rate and not 0.0 <= float(self.base_success_rate) <= 1.0:
            raise DataError(f"problem {self.id!r}: base_success_rate out of [0,1]")

    @classmethod
    def create(cls, prompt: str, gold_answer: str, **kw: Any) -> "Problem":
        return cls(id=problem_id_for(prompt), prompt=prompt, gold_answer=gold_answer, **kw)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "id": self.id,
            "prompt": self.prompt,
            "gold_answer": self.gold_answer,
            "split_tag": self.split_tag,
        }
        if self.base_success_rate is not None:
            rec["base_success_rate"] = self.base_success_rate
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Problem":
        return cls(
            id=rec["id"],
            prompt=rec["prompt"],
            gold_answer=rec["gold_answer"],
            split_tag=rec.get("split_tag", "unassigned"),
            base_success_rate=rec.get("base_success_rate"),
        )


@dataclass(frozen=True)
class Abstraction:
    """Concise procedural/factual guidance attached to a problem.

    The body is one opaque text blob; structure inside it (tags, bullet facts)
    is the producer's business.
    """

    id: str
    problem_id: str
    text: str
    source: str
    leak_status: str = "unchecked"
    uplift: float | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DataError("abstraction text must be non-empty")
        if self.source not in ABSTRACTION_SOURCES:
            raise DataError(f"abstraction {self.id!r}: unknown source {self.source!r}")
        if self.leak_status not in LEAK_STATUSES:
            raise DataError(
                f"abstraction {self.id!r}: unknown leak_status {self.leak_status!r}"
            )

    @classmethod
    def create(cls, problem_id: str, text: str, source: str, **kw: Any) -> "Abstraction":
        return cls(
            id=abstraction_id_for(problem_id, text),
            problem_id=problem_id,
            text=text,
            source=source,
            **kw,
        )

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "id": self.id,
            "problem_id": self.problem_id,
            "text": self.text,
            "source": self.source,
            "leak_status": self.leak_status,
        }
        if self.uplift is not None:
            rec["uplift"] = self.uplift
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Abstraction":
        return cls(
            id=rec["id"],
            problem_id=rec["problem_id"],
            text=rec["text"],
            source=rec["source"],
            leak_status=rec.get("leak_status", "unchecked"),
            uplift=rec.get("uplift"),
        )


@dataclass(frozen=True)
class RolloutRecord:
    """One sampled solution attempt, scored.

    ``reward`` is the masked solution reward: binary correctness when an
    abstraction conditioned the rollout, fixed 0 for the no-abstraction
    condition.
    """

    problem_id: str
    abstraction_id: str
    solution_text: str
    correct: bool
    reward: float
    seed: int
    token_count: int
    extracted_answer: str | None = None
    advantage: float | None = None

    def __post_init__(self) -> None:
        if self.correct and self.extracted_answer is None:
            raise DataError(
                f"rollout for {self.problem_id!r}: correct=True requires an extracted answer"
            )
        if self.reward not in (0, 0.0, 1, 1.0):
            raise DataError(f"rollout reward must be 0 or 1, got {self.reward!r}")
        if self.abstraction_id == NO_ABSTRACTION and self.reward != 0.0:
            raise DataError("no-abstraction rollout must carry reward 0")
        if self.token_count < 0:
            raise DataError("token_count must be >= 0")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "problem_id": self.problem_id,
            "abstraction_id": self.abstraction_id,
            "solution_text": self.solution_text,
            "correct": self.correct,
            "reward": self.reward,
            "seed": self.seed,
            "token_count": self.token_count,
        }
        if self.extracted_answer is not None:
            rec["extracted_answer"] = self.extracted_answer
        if self.advantage is not None:
            rec["advantage"] = self.advantage
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "RolloutRecord":
        return cls(
            problem_id=rec["problem_id"],
            abstraction_id=rec["abstraction_id"],
            solution_text=rec["solution_text"],
            correct=rec["correct"],
            reward=rec["reward"],
            seed=rec["seed"],
            token_count=rec["token_count"],
            extracted_answer=rec.get("extracted_answer"),
            advantage=rec.get("advantage"),
        )


@dataclass(frozen=True)
class RewardSummary:
    """Aggregate of rollouts for one (problem, abstraction-or-none) pair."""

    problem_id: str
    abstraction_id: str
    n_rollouts: int
    n_correct: int

    def __post_init__(self) -> None:
        if self.n_rollouts < 1:
            raise DataError("n_rollouts must be >= 1")
        if not 0 <= self.n_correct <= self.n_rollouts:
            raise DataError(
                f"n_correct {self.n_correct} out of range for n_rollouts {self.n_rollouts}"
            )

    @property
    def mean_acc(self) -> Fraction:
        # Exact by construction; float conversion happens only at serialization.
        return Fraction(self.n_correct, self.n_rollouts)

    def to_record(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "abstraction_id": self.abstraction_id,
            "n_rollouts": self.n_rollouts,
            "n_correct": self.n_correct,
            "mean_acc": float(self.mean_acc),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "RewardSummary":
        return cls(
            problem_id=rec["problem_id"],
            abstraction_id=rec["abstraction_id"],
            n_rollouts=rec["n_rollouts"],
            n_correct=rec["n_correct"],
        )


@dataclass(frozen=True)
class FileStamp:
    path: str
    sha256: str

    def to_record(self) -> dict[str, Any]:
        return {"path": self.path, "sha256": self.sha256}


@dataclass
class RunManifest:
    """Provenance record written by every pipeline stage."""

    stage: str
    config_hash: str
    master_seed: int
    inputs: list[FileStamp] = field(default_factory=list)
    outputs: list[FileStamp] = field(default_factory=list)
    started: str = FIXED_TIMESTAMP
    finished: str = FIXED_TIMESTAMP
    tool_version: str = TOOL_VERSION
    parent_manifest_hash: str | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "inputs": [s.to_record() for s in self.inputs],
            "outputs": [s.to_record() for s in self.outputs],
            "started": self.started,
            "finished": self.finished,
            "tool_version": self.tool_version,
            "parent_manifest_hash": self.parent_manifest_hash,
            "details": self.details,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "RunManifest":
        return cls(
            stage=rec["stage"],
            config_hash=rec["config_hash"],
            master_seed=rec["master_seed"],
            inputs=[FileStamp(**s) for s in rec["inputs"]],
            outputs=[FileStamp(**s) for s in rec["outputs"]],
            started=rec["started"],
            finished=rec["finished"],
            tool_version=rec["tool_version"],
            parent_manifest_hash=rec.get("parent_manifest_hash"),
            details=rec.get("details", {}),
        )


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def write_jsonl(records: Iterable[dict[str, Any]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line_number, record) pairs; malformed lines raise with context."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def load_problems(path: str | Path) -> list[Problem]:
    """Load problems, recomputing ids and rejecting duplicates."""
    problems: list[Problem] = []
    seen: dict[str, int] = {}
    for lineno, rec in read_jsonl(path):
        try:
            problem = Problem.from_record(rec)
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if problem.id in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate problem id {problem.id!r} "
                f"(first seen at line {seen[problem.id]})"
            )
        seen[problem.id] = lineno
        problems.append(problem)
    return problems


def write_problems(problems: Sequence[Problem], path: str | Path) -> None:
    write_jsonl((p.to_record() for p in problems), path)


def load_abstractions(path: str | Path) -> list[Abstraction]:
    out: list[Abstraction] = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(Abstraction.from_record(rec))
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_abstractions(abstractions: Sequence[Abstraction], path: str | Path) -> None:
    write_jsonl((a.to_record() for a in abstractions), path)


def load_rollouts(path: str | Path) -> list[RolloutRecord]:
    out: list[RolloutRecord] = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(RolloutRecord.from_record(rec))
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_rollouts(records: Sequence[RolloutRecord], path: str | Path) -> None:
    write_jsonl((r.to_record() for r in records), path)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def stamp_file(path: str | Path, base_dir: str | Path | None = None) -> FileStamp:
    """Stamp a file with its content hash.

    Paths under ``base_dir`` are stored relative to it so that runs into
    different output directories stay byte-comparable; other paths are kept
    as given.
    """
    p = Path(path)
    stored = str(p)
    if base_dir is not None:
        try:
            stored = str(p.resolve().relative_to(Path(base_dir).resolve()))
        except ValueError:
            stored = str(p)
    return FileStamp(path=stored, sha256=file_sha256(p))


def write_manifest(manifest: RunManifest, path: str | Path) -> str:
    """Write the manifest as a stable JSON document; return its content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest.to_record(), sort_keys=True, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return stable_hash(text + "\n")


def load_manifest(path: str | Path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return RunManifest.from_record(json.load(fh))


def manifest_timestamp(deterministic: bool) -> str:
    return FIXED_TIMESTAMP if deterministic else utc_now_iso()
