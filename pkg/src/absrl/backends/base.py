"""Backend protocol surface shared by the simulator and HTTP implementations."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Protocol, Sequence, runtime_checkable

from ..core import DataError


class BackendError(RuntimeError):
    """Transient backend failure (retries exhausted, malformed response)."""

    def __init__(self, message: str, attempts: list[str] | None = None) -> None:
        super().__init__(message)
        self.attempts = attempts or []


class PermanentBackendError(BackendError):
    """Non-retryable failure (client error other than rate limiting)."""


@dataclass(frozen=True)
class PromptParts:
    """The pieces a backend assembles into its native prompt format.

    ``problem`` may be None for abstraction-only probes (leak checks);
    ``abstraction`` is None for the unconditioned baseline. ``problem_id``
    rides along so the simulator can find its world entry without re-hashing.
    """

    problem: str | None = None
    abstraction: str | None = None
    problem_id: str | None = None

    def __post_init__(self) -> None:
        if self.problem is None and self.abstraction is None:
            raise DataError("prompt needs at least a problem or an abstraction")

    def render_user_message(self) -> str:
        sections: list[str] = []
        if self.abstraction is not None:
            sections.append(
                "Guidance to consider while solving:\n" + self.abstraction
            )
        if self.problem is not None:
            sections.append("Problem:\n" + self.problem)
        else:
            sections.append(
                "No problem statement is provided. Using only the guidance above, "
                "state the final answer if it can be determined, as \\boxed{...}."
            )
        return "\n\n".join(sections)


@dataclass(frozen=True)
class SamplingParams:
    """Decoding knobs passed verbatim to the backend."""

    temperature: float = 0.6
    max_tokens: int = 16384
    n_samples: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise DataError("max_tokens must be >= 1")
        if self.n_samples < 1:
            raise DataError("n_samples must be >= 1")

    @classmethod
    def train_default(cls, seed: int = 0) -> "SamplingParams":
        return cls(temperature=0.6, max_tokens=16384, n_samples=16, seed=seed)

    @classmethod
    def val_default(cls, seed: int = 0) -> "SamplingParams":
        return cls(temperature=0.6, max_tokens=16384, n_samples=8, seed=seed)


def replace_params(params: SamplingParams, **changes: Any) -> SamplingParams:
    return dataclasses.replace(params, **changes)


@dataclass(frozen=True)
class Completion:
    text: str
    token_count: int
    truncated: bool = False


@dataclass(frozen=True)
class JudgeDecision:
    verdict: bool
    rationale: str


@runtime_checkable
class PolicyBackend(Protocol):
    """Text sampler; the only thing most pipeline stages need."""

    supports_seeding: bool
    is_deterministic: bool

    def sample(self, parts: PromptParts, params: SamplingParams) -> list[Completion]:
        ...


@runtime_checkable
class JudgeBackend(Protocol):
    def binary_judgment(self, instruction: str, pair: tuple[str, str]) -> JudgeDecision:
        ...

    def free_judgment(self, prompt: str) -> str:
        ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    dim: int

    def embed(self, text: str) -> Any:  # returns a unit-norm 1-D numpy array
        ...


@runtime_checkable
class SummarizerBackend(Protocol):
    def summarize(
        self,
        problem_text: str,
        traces: Sequence[str],
        n_candidates: int,
        seed: int,
    ) -> list[str]:
        ...
