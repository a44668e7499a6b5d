"""OpenAI-compatible HTTP inference client.

One wire protocol (chat completions JSON) serves the policy, judge, and
summarizer roles; embeddings use the matching embeddings endpoint. Retries are
exponential with a cap; client errors other than rate limiting are permanent.
A process-wide semaphore bounds in-flight requests.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import Any, Sequence

import httpx
import numpy as np

from ..core import DataError
from .base import (
    BackendError,
    Completion,
    JudgeDecision,
    PermanentBackendError,
    PromptParts,
    SamplingParams,
)

logger = logging.getLogger(__name__)

DEFAULT_REQUEST_CAP = 32
_RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class _RequestGate:
    """Process-wide cap on concurrent HTTP requests, resizable from config."""

    def __init__(self, cap: int) -> None:
        self._semaphore = threading.BoundedSemaphore(cap)
        self.cap = cap

    def __enter__(self) -> None:
        self._semaphore.acquire()

    def __exit__(self, *exc: Any) -> None:
        self._semaphore.release()


_GATES: dict[int, _RequestGate] = {}
_GATES_LOCK = threading.Lock()


def request_gate(cap: int) -> _RequestGate:
    with _GATES_LOCK:
        if cap not in _GATES:
            _GATES[cap] = _RequestGate(cap)
        return _GATES[cap]


class HttpClient:
    """Shared request plumbing for the HTTP-backed roles."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        request_cap: int = DEFAULT_REQUEST_CAP,
        max_retries: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if request_cap < 1:
            raise DataError("request_cap must be >= 1")
        api_key = os.environ.get(api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._gate = request_gate(request_cap)
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers=headers,
            timeout=timeout,
            transport=transport,
        )

    def post_json(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        attempts: list[str] = []
        for attempt in range(self.max_retries + 1):
            try:
                with self._gate:
                    response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                attempts.append(f"attempt {attempt + 1}: transport error {exc!r}")
                self._sleep(attempt, attempts)
                continue
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise BackendError(
                        f"non-JSON response from {path}: {exc}", attempts
                    ) from exc
            attempts.append(f"attempt {attempt + 1}: HTTP {response.status_code}")
            if (
                400 <= response.status_code < 500
                and response.status_code not in _RETRYABLE_STATUSES
            ):
                raise PermanentBackendError(
                    f"permanent client error {response.status_code} from {path}: "
                    f"{response.text[:500]}",
                    attempts,
                )
            self._sleep(attempt, attempts)
        raise BackendError(
            f"retries exhausted for {path} after {len(attempts)} attempts: "
            + "; ".join(attempts),
            attempts,
        )

    def _sleep(self, attempt: int, attempts: list[str]) -> None:
        if attempt >= self.max_retries:
            raise BackendError(
                "retries exhausted: " + "; ".join(attempts), attempts
            )
        delay = min(self.backoff_cap, self.backoff_base * (2.0 ** attempt))
        logger.debug("backing off %.2fs after %s", delay, attempts[-1])
        time.sleep(delay)

    def close(self) -> None:
        self._client.close()


class HttpPolicyBackend:
    """Chat-completions sampler."""

    supports_seeding = True  # passed through; servers may ignore it
    is_deterministic = False

    def __init__(self, client: HttpClient, system_prompt: str | None = None) -> None:
        self.client = client
        self.system_prompt = system_prompt

    def sample(self, parts: PromptParts, params: SamplingParams) -> list[Completion]:
        messages: list[dict[str, str]] = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": parts.render_user_message()})
        payload = {
            "model": self.client.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": params.n_samples,
            "seed": params.seed,
        }
        data = self.client.post_json("/chat/completions", payload)
        choices = data.get("choices", [])
        if len(choices) != params.n_samples:
            raise BackendError(
                f"server returned {len(choices)} choices, expected {params.n_samples}"
            )
        usage_tokens = (data.get("usage") or {}).get("completion_tokens")
        completions: list[Completion] = []
        for choice in choices:
            text = (choice.get("message") or {}).get("content") or ""
            truncated = choice.get("finish_reason") == "length"
            if params.n_samples == 1 and isinstance(usage_tokens, int):
                token_count = usage_tokens
            else:
                # The usage block is aggregate; fall back to a word-count proxy.
                token_count = len(text.split())
            completions.append(
                Completion(text=text, token_count=token_count, truncated=truncated)
            )
        return completions


class HttpJudge:
    """Binary and free-form judgments over the same chat endpoint."""

    is_deterministic = False

    def __init__(self, client: HttpClient, temperature: float = 0.0) -> None:
        self.client = client
        self.temperature = temperature

    def _complete(self, prompt: str) -> str:
        payload = {
            "model": self.client.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": 1024,
            "n": 1,
        }
        data = self.client.post_json("/chat/completions", payload)
        choices = data.get("choices", [])
        if not choices:
            raise BackendError("judge response had no choices")
        return (choices[0].get("message") or {}).get("content") or ""

    def binary_judgment(self, instruction: str, pair: tuple[str, str]) -> JudgeDecision:
        first, second = pair
        prompt = (
            f"{instruction}\n\n--- Item A ---\n{first}\n\n--- Item B ---\n{second}\n\n"
            "Reply with YES or NO on the first line, then a one-sentence reason."
        )
        text = self._complete(prompt).strip()
        head = text.splitlines()[0].strip().upper() if text else ""
        if head.startswith("YES"):
            return JudgeDecision(verdict=True, rationale=text)
        if head.startswith("NO"):
            return JudgeDecision(verdict=False, rationale=text)
        raise BackendError(f"judge reply was not YES/NO: {text[:200]!r}")

    def free_judgment(self, prompt: str) -> str:
        return self._complete(prompt)


class HttpEmbedder:
    is_deterministic = False

    def __init__(self, client: HttpClient, dim: int = 0) -> None:
        self.client = client
        self.dim = dim  # learned after the first call when 0

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise DataError("cannot embed empty text")
        data = self.client.post_json(
            "/embeddings", {"model": self.client.model, "input": text}
        )
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc
        if self.dim == 0:
            self.dim = int(vec.shape[0])
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise BackendError("server returned a zero embedding")
        return vec / norm


class HttpSummarizer:
    is_deterministic = False

    def __init__(self, client: HttpClient, prompt_template: str) -> None:
        self.client = client
        self.prompt_template = prompt_template

    def summarize(
        self,
        problem_text: str,
        traces: Sequence[str],
        n_candidates: int,
        seed: int,
    ) -> list[str]:
        joined = "\n\n--- trace ---\n".join(traces)
        prompt = (
            self.prompt_template.replace("{n_candidates}", str(n_candidates))
            .replace("{problem}", problem_text)
            .replace("{traces}", joined)
        )
        payload = {
            "model": self.client.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.7,
            "max_tokens": 2048,
            "n": 1,
            "seed": seed,
        }
        data = self.client.post_json("/chat/completions", payload)
        choices = data.get("choices", [])
        if not choices:
            raise BackendError("summarizer response had no choices")
        text = (choices[0].get("message") or {}).get("content") or ""
        # One candidate per "###"-separated block; blank blocks dropped.
        blocks = [b.strip() for b in text.split("###")]
        return [b for b in blocks if b][:n_candidates]
