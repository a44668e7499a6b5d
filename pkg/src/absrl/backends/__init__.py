"""Pluggable inference backends: a deterministic simulator and an HTTP client.

Every pipeline stage talks to backends through the small protocol surface in
``base``; simulator and HTTP implementations are interchangeable.
"""

from .base import (
    BackendError,
    Completion,
    EmbeddingBackend,
    JudgeBackend,
    JudgeDecision,
    PermanentBackendError,
    PolicyBackend,
    PromptParts,
    SamplingParams,
    SummarizerBackend,
    replace_params,
)

__all__ = [
    "BackendError",
    "Completion",
    "EmbeddingBackend",
    "JudgeBackend",
    "JudgeDecision",
    "PermanentBackendError",
    "PolicyBackend",
    "PromptParts",
    "SamplingParams",
    "SummarizerBackend",
    "replace_params",
]
