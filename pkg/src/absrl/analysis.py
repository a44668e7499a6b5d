"""Post-hoc analyses: iso-compute frontiers, adherence judging, solution
diversity, and abstraction classification.

Plots are emitted as self-contained SVG (hand-rolled polylines, no plotting
dependency) so reruns are byte-stable; the underlying numbers always ship as
CSV next to the plot.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backends.base import EmbeddingBackend, JudgeBackend
from .core import Abstraction, DataError
from .metrics import EvalCell, any_correct_probability

logger = logging.getLogger(__name__)

ADHERENCE_CONDITIONS = (
    "abstraction",
    "no_abstraction",
    "retrieval",
    "unrelated_abstraction",
)

PAIRING_TYPES = ("same_abstraction", "different_abstractions", "no_abstraction")

ADHERENCE_INSTRUCTION = (
    "Item A is guidance for solving a problem; item B is a solution attempt. "
    "Decide whether the solution actually follows the guidance's approach, "
    "not merely whether it is correct."
)


# ---------------------------------------------------------------------------
# Iso-compute frontier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IsoComputePoint:
    """One allocation of a fixed sampling budget C = m * (k - k0)."""

    budget: int
    k0: int
    m: int
    k: int

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise DataError("budget must be >= 1")
        if self.k0 < 0:
            raise DataError("k0 must be >= 0")
        if self.m * (self.k - self.k0) != self.budget:
            raise DataError(
                f"inconsistent point: m={self.m} * (k={self.k} - k0={self.k0}) "
                f"!= C={self.budget}"
            )

    @property
    def ratio(self) -> float:
        return self.m / (self.k - self.k0)


def iso_compute_grid(budget: int, k0: int) -> list[IsoComputePoint]:
    """All (m, k) with m a divisor of the budget and k = k0 + budget/m.

    Sorted by the abstraction-to-extra-samples ratio m/(k-k0), which is
    monotone in m at fixed budget.
    """
    if budget < 1:
        raise DataError("budget must be >= 1")
    if k0 < 0:
        raise DataError("k0 must be >= 0")
    divisors = [m for m in range(1, budget + 1) if budget % m == 0]
    points = [
        IsoComputePoint(budget=budget, k0=k0, m=m, k=k0 + budget // m)
        for m in divisors
    ]
    return sorted(points, key=lambda p: p.ratio)


@dataclass(frozen=True)
class FrontierValue:
    point: IsoComputePoint
    pass_estimate: float


def frontier_eval(
    points: Sequence[IsoComputePoint],
    cells: Sequence[EvalCell],
    seed: int = 0,
) -> list[FrontierValue]:
    """Any-correct probability at each budget allocation.

    ``cells`` are per-abstraction counts; multi-problem cell sets are averaged
    per point over problems. Each problem must supply at least m abstraction
    cells with at least k samples each for every point.
    """
    by_problem: dict[str, list[EvalCell]] = {}
    for cell in cells:
        if cell.condition == "per_abs":
            by_problem.setdefault(cell.problem_id, []).append(cell)
    if not by_problem:
        raise DataError("frontier_eval needs per-abstraction cells")
    out: list[FrontierValue] = []
    for point in points:
        values: list[float] = []
        for pid, abs_cells in sorted(by_problem.items()):
            if len(abs_cells) < point.m:
                raise DataError(
                    f"problem {pid!r} has {len(abs_cells)} abstraction cells; "
                    f"point m={point.m} needs at least that many"
                )
            values.append(
                any_correct_probability(abs_cells, m=point.m, k=point.k, seed=seed)
            )
        out.append(
            FrontierValue(point=point, pass_estimate=sum(values) / len(values))
        )
    return out


def write_frontier_csv(values: Sequence[FrontierValue], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["C", "k0", "m", "k", "ratio", "pass_estimate"])
        for value in values:
            p = value.point
            writer.writerow(
                [p.budget, p.k0, p.m, p.k, f"{p.ratio:.10g}", f"{value.pass_estimate:.10g}"]
            )


def write_frontier_svg(
    curves: Mapping[str, Sequence[FrontierValue]],
    path: str | Path,
    title: str = "iso-compute frontier",
) -> None:
    """Self-contained SVG: one polyline per curve on a shared log-ratio axis."""
    width, height = 640, 420
    margin = 60
    xs: list[float] = []
    ys: list[float] = []
    for values in curves.values():
        xs.extend(np.log10(v.point.ratio) for v in values)
        ys.extend(v.pass_estimate for v in values)
    if not xs:
        raise DataError("no curves to plot")
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = 0.0, 1.0

    def sx(x: float) -> float:
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts: list[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">log10(m / (k - k0))</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {height / 2:.1f})">any-correct probability</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(tick)
        parts.append(
            f'<line x1="{margin - 4}" y1="{y:.2f}" x2="{margin}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{margin - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{tick:g}</text>'
        )
    for i, (label, values) in enumerate(sorted(curves.items())):
        color = palette[i % len(palette)]
        pts = " ".join(
            f"{sx(float(np.log10(v.point.ratio))):.2f},{sy(v.pass_estimate):.2f}"
            for v in values
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for v in values:
            parts.append(
                f'<circle cx="{sx(float(np.log10(v.point.ratio))):.2f}" '
                f'cy="{sy(v.pass_estimate):.2f}" r="2.5" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{width - margin + 6}" y="{margin + 14 * i}" '
            f'font-family="sans-serif" font-size="10" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Adherence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdherencePair:
    abstraction_text: str
    solution_text: str
    condition: str

    def __post_init__(self) -> None:
        if self.condition not in ADHERENCE_CONDITIONS:
            raise DataError(f"unknown adherence condition {self.condition!r}")
        if not self.abstraction_text or not self.solution_text:
            raise DataError("adherence pairs need non-empty texts")

    def cache_key(self) -> str:
        h = hashlib.sha256()
        h.update(self.abstraction_text.encode("utf-8"))
        h.update(b"\x1f")
        h.update(self.solution_text.encode("utf-8"))
        return h.hexdigest()


def adherence_rates(
    pairs: Sequence[AdherencePair],
    judge: JudgeBackend,
) -> dict[str, float]:
    """Per-condition adherence rates with judgments cached by pair hash.

    Duplicate (abstraction, solution) pairs cost one judge call regardless of
    condition; every condition present must have at least one pair.
    """
    if not pairs:
        raise DataError("no adherence pairs given")
    cache: dict[str, bool] = {}
    per_condition: dict[str, list[bool]] = {c: [] for c in ADHERENCE_CONDITIONS}
    for pair in pairs:
        key = pair.cache_key()
        if key not in cache:
            decision = judge.binary_judgment(
                ADHERENCE_INSTRUCTION, (pair.abstraction_text, pair.solution_text)
            )
            cache[key] = decision.verdict
        per_condition[pair.condition].append(cache[key])
    rates: dict[str, float] = {}
    for condition, verdicts in per_condition.items():
        if not verdicts:
            continue
        rates[condition] = float(
            Fraction(sum(1 for v in verdicts if v), len(verdicts))
        )
    return rates


def build_retrieval_pairs(
    abstractions: Sequence[Abstraction],
    prior_solutions: Sequence[str],
    embedder: EmbeddingBackend,
) -> list[AdherencePair]:
    """Pair each abstraction with its most embedding-similar prior solution."""
    if not prior_solutions:
        raise DataError("retrieval pairing needs prior solutions")
    solution_vecs = [embedder.embed(s) for s in prior_solutions]
    pairs: list[AdherencePair] = []
    for abstraction in abstractions:
        vec = embedder.embed(abstraction.text)
        sims = [float(np.dot(vec, sv)) for sv in solution_vecs]
        best = max(range(len(sims)), key=lambda i: (sims[i], -i))
        pairs.append(
            AdherencePair(
                abstraction_text=abstraction.text,
                solution_text=prior_solutions[best],
                condition="retrieval",
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Semantic diversity
# ---------------------------------------------------------------------------


def semantic_diversity(
    solution_pairs: Sequence[tuple[str, str, str]],
    embedder: EmbeddingBackend,
) -> dict[str, float]:
    """Mean pairwise cosine similarity per pairing type.

    Pairs are (text_a, text_b, pairing_type); zero-length texts raise rather
    than silently skew the averages.
    """
    if not solution_pairs:
        raise DataError("no solution pairs given")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for text_a, text_b, pairing in solution_pairs:
        if pairing not in PAIRING_TYPES:
            raise DataError(f"unknown pairing type {pairing!r}")
        if not text_a.strip() or not text_b.strip():
            raise DataError("cannot embed zero-length solution text")
        sim = float(np.dot(embedder.embed(text_a), embedder.embed(text_b)))
        sums[pairing] = sums.get(pairing, 0.0) + sim
        counts[pairing] = counts.get(pairing, 0) + 1
    return {pairing: sums[pairing] / counts[pairing] for pairing in sums}


# ---------------------------------------------------------------------------
# Abstraction classification
# ---------------------------------------------------------------------------


class AbstractionCategory(Enum):
    CAUTION_ALERT = "A"
    PRODUCTIVE_LAUNCHPOINT = "B"
    BLIND_FOLLOW = "C"
    STRUCTURAL_SHORTCUT = "D"
    OTHER = "E"


class ClassificationParseError(DataError):
    """Judge output carried no trailing category letter even after a retry."""


def classifier_prompt_template() -> str:
    return (
        resources.files("absrl.prompts")
        .joinpath("abstraction_classifier.txt")
        .read_text(encoding="utf-8")
    )


def _parse_category(text: str) -> AbstractionCategory | None:
    import re

    letters = re.findall(r"\(([A-E])\)", text)
    if not letters:
        return None
    return AbstractionCategory(letters[-1])


def classify_abstraction(
    abstraction: Abstraction,
    judge: JudgeBackend,
    prompt_template: str | None = None,
) -> AbstractionCategory:
    """Five-way behavioral category of an abstraction, judged by prompt.

    The judge's reply must end with a parenthesized letter; one retry is
    granted before a parse error is raised.
    """
    template = prompt_template if prompt_template is not None else classifier_prompt_template()
    prompt = template.replace("{abstraction}", abstraction.text)
    for attempt in range(2):
        reply = judge.free_judgment(prompt)
        category = _parse_category(reply)
        if category is not None:
            return category
        logger.debug(
            "classification parse failure for %s (attempt %d): %r",
            abstraction.id,
            attempt + 1,
            reply[:120],
        )
    raise ClassificationParseError(
        f"judge never produced a trailing (A)..(E) letter for {abstraction.id}"
    )


def classify_many(
    abstractions: Iterable[Abstraction],
    judge: JudgeBackend,
    prompt_template: str | None = None,
) -> dict[str, Any]:
    template = prompt_template if prompt_template is not None else classifier_prompt_template()
    per_abstraction: dict[str, str] = {}
    histogram: dict[str, int] = {c.name.lower(): 0 for c in AbstractionCategory}
    for abstraction in abstractions:
        category = classify_abstraction(abstraction, judge, template)
        per_abstraction[abstraction.id] = category.name.lower()
        histogram[category.name.lower()] += 1
    return {"categories": per_abstraction, "histogram": histogram}
