"""Answer extraction and binary grading for verifiable math-style problems.

Grading is deliberately conservative: trim whitespace, strip outer answer
markers, unify the unary minus, and compare exact rationals when both sides
parse as numbers. No symbolic algebra.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import TYPE_CHECKING

from .core import DataError, derive_seed

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for type hints only
    from .backends.base import PolicyBackend, SamplingParams
    from .core import Abstraction, Problem

logger = logging.getLogger(__name__)

BOXED_MARKER = "\\boxed{"

# Lines like "The final answer is 42" / "Answer: 42". Anchored per line.
_ANSWER_LINE_RE = re.compile(
    r"(?i)\b(?:final\s+answer|answer)\s*(?:is|:|=)\s*(.+?)\s*\.?\s*$"
)

_NUMBER_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$")
_FRACTION_RE = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")

# Unicode variants of the unary minus that models emit.
_MINUS_VARIANTS = {"−": "-", "–": "-", "—": "-"}


def extract_boxed(text: str) -> str | None:
    """Return the content of the last boxed marker, matching braces exactly."""
    start = text.rfind(BOXED_MARKER)
    if start < 0:
        return None
    i = start + len(BOXED_MARKER)
    depth = 1
    out: list[str] = []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(out)
        out.append(ch)
        i += 1
    return None  # unbalanced marker: treat as absent


def extract_answer(solution_text: str) -> str | None:
    """Final answer string from a solution trace, or None when absent.

    Preference order: the last boxed marker, then the last line matching an
    answer pattern.
    """
    boxed = extract_boxed(solution_text)
    if boxed is not None:
        stripped = boxed.strip()
        return stripped if stripped else None
    for line in reversed(solution_text.splitlines()):
        m = _ANSWER_LINE_RE.search(line)
        if m:
            candidate = m.group(1).strip()
            if candidate:
                return candidate
    return None


@dataclass(frozen=True)
class AnswerForm:
    """An answer in raw, normalized, and (when parseable) exact numeric form."""

    raw: str
    normalized: str
    numeric_value: Fraction | None


def _strip_outer_markers(s: str) -> str:
    changed = True
    while changed:
        changed = False
        s = s.strip()
        if s.startswith(BOXED_MARKER) and s.endswith("}"):
            inner = extract_boxed(s)
            if inner is not None and BOXED_MARKER + inner + "}" == s:
                s = inner
                changed = True
                continue
        if len(s) >= 2 and s[0] == "$" and s[-1] == "$":
            s = s[1:-1]
            changed = True
            continue
        if s.endswith("."):
            # A single trailing period is sentence punctuation, not content.
            s = s[:-1]
            changed = True
    return s


def parse_rational(text: str) -> Fraction | None:
    """Exact rational value of a numeric string, or None when it is not one."""
    t = text.replace(" ", "")
    m = _FRACTION_RE.match(t)
    if m:
        denominator = int(m.group(2))
        if denominator == 0:
            return None
        return Fraction(int(m.group(1)), denominator)
    if _NUMBER_RE.match(t):
        try:
            return Fraction(Decimal(t))
        except (InvalidOperation, ValueError):
            return None
    return None


def normalize_answer(raw: str) -> AnswerForm:
    """Normalization is idempotent: normalize(normalize(x).normalized) is a fixpoint."""
    s = _strip_outer_markers(raw)
    for variant, replacement in _MINUS_VARIANTS.items():
        s = s.replace(variant, replacement)
    s = _THOUSANDS_RE.sub("", s)
    s = " ".join(s.split())
    numeric = parse_rational(s)
    if numeric is not None:
        # Canonical textual form for numbers so "0.5" and "1/2" share it.
        s = str(numeric)
    return AnswerForm(raw=raw, normalized=s, numeric_value=numeric)


def check_answer(candidate: str | None, gold: str) -> bool:
    """Binary equivalence of a candidate against the gold answer.

    Deterministic and symmetric in (candidate, gold) for non-empty inputs.
    """
    if not gold.strip():
        raise DataError("gold answer must be non-empty")
    if candidate is None or candidate == "":
        return False
    cand_form = normalize_answer(candidate)
    gold_form = normalize_answer(gold)
    if cand_form.numeric_value is not None and gold_form.numeric_value is not None:
        return cand_form.numeric_value == gold_form.numeric_value
    return cand_form.normalized == gold_form.normalized


@dataclass(frozen=True)
class LeakCheckResult:
    abstraction_id: str
    status: str  # "passed" | "failed"
    n_samples: int
    n_correct: int

    def to_record(self) -> dict:
        return {
            "abstraction_id": self.abstraction_id,
            "status": self.status,
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
        }


class LeakCheckError(RuntimeError):
    """Backend failure during a leak check; carries partial counts."""

    def __init__(self, message: str, n_completed: int, n_correct: int) -> None:
        super().__init__(message)
        self.n_completed = n_completed
        self.n_correct = n_correct


def leak_check(
    abstraction: "Abstraction",
    problem: "Problem",
    sampler: "PolicyBackend",
    params: "SamplingParams",
    n: int = 16,
    master_seed: int = 0,
) -> LeakCheckResult:
    """Probe whether the abstraction alone gives away the answer.

    Samples ``n`` completions conditioned on the abstraction text only (no
    problem statement) and grades them against the gold answer. Passing means
    zero correct completions; the check is monotone, so failing at n implies
    failing at any superset of seeds.
    """
    from .backends.base import PromptParts, replace_params

    if n < 1:
        raise DataError("leak check needs n >= 1 samples")
    parts = PromptParts(problem=None, abstraction=abstraction.text)
    call_params = replace_params(
        params,
        n_samples=n,
        seed=derive_seed(master_seed, f"leak/{abstraction.id}", 0),
    )
    try:
        completions = sampler.sample(parts, call_params)
    except Exception as exc:
        raise LeakCheckError(
            f"backend failure during leak check of {abstraction.id}: {exc}",
            n_completed=0,
            n_correct=0,
        ) from exc
    n_correct = sum(
        1
        for completion in completions
        if check_answer(extract_answer(completion.text), problem.gold_answer)
    )
    status = "passed" if n_correct == 0 else "failed"
    if status == "failed":
        logger.debug(
            "leak check failed for %s: %d/%d correct from abstraction alone",
            abstraction.id,
            n_correct,
            n,
        )
    return LeakCheckResult(
        abstraction_id=abstraction.id,
        status=status,
        n_samples=len(completions),
        n_correct=n_correct,
    )
