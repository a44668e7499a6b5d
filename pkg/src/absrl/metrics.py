"""Evaluation estimators: unbiased pass@k, expected max@k, and the three-way
no-abstraction / with-abstraction evaluation protocol.

All combinatorial arithmetic runs in exact rationals and converts to float
only at the boundary, so estimates match brute-force subset enumeration to
floating-point conversion error and never overflow.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Any, Iterable, Mapping, Sequence

from .core import NO_ABSTRACTION, DataError, derive_seed

CONDITIONS = ("no_abs", "per_abs")


@dataclass(frozen=True)
class EvalCell:
    """Counts for one (problem, condition) evaluation cell."""

    problem_id: str
    condition: str
    abstraction_id: str
    n: int
    c: int
    coverage_scores: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise DataError(f"unknown eval condition {self.condition!r}")
        if (self.condition == "no_abs") != (self.abstraction_id == NO_ABSTRACTION):
            raise DataError(
                "condition no_abs exactly when abstraction_id is the sentinel"
            )
        if self.n < 1:
            raise DataError("cell needs n >= 1 samples")
        if not 0 <= self.c <= self.n:
            raise DataError(f"cell has c={self.c} outside [0, n={self.n}]")
        if self.coverage_scores is not None:
            if len(self.coverage_scores) != self.n:
                raise DataError("coverage_scores length must equal n")
            if any(not 0.0 <= s <= 1.0 for s in self.coverage_scores):
                raise DataError("coverage scores must lie in [0, 1]")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "problem_id": self.problem_id,
            "condition": self.condition,
            "abstraction_id": self.abstraction_id,
            "n": self.n,
            "c": self.c,
        }
        if self.coverage_scores is not None:
            rec["coverage_scores"] = list(self.coverage_scores)
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "EvalCell":
        scores = rec.get("coverage_scores")
        return cls(
            problem_id=rec["problem_id"],
            condition=rec["condition"],
            abstraction_id=rec["abstraction_id"],
            n=rec["n"],
            c=rec["c"],
            coverage_scores=tuple(scores) if scores is not None else None,
        )


def _no_solve_fraction(n: int, c: int, k: int) -> Fraction:
    """Exact P(no correct sample in a uniform size-k subset): C(n-c,k)/C(n,k)."""
    if c == 0:
        return Fraction(1)
    if n - c < k:
        return Fraction(0)
    frac = Fraction(1)
    for i in range(k):
        frac *= Fraction(n - c - i, n - i)
    return frac


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k from n samples with c correct.

    Computed as 1 minus the falling-factorial product form of
    C(n-c, k) / C(n, k) in exact rationals.
    """
    if not 1 <= k <= n:
        raise DataError(f"pass@k needs 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise DataError(f"pass@k needs 0 <= c <= n, got c={c}, n={n}")
    return float(1 - _no_solve_fraction(n, c, k))


def max_at_k(coverage_scores: Sequence[float], k: int, n: int) -> float:
    """Expected maximum score over a uniformly random size-k subset.

    Order-statistics form: with scores sorted ascending and 1-indexed, the
    i-th score is the subset maximum with probability
    (C(i,k) - C(i-1,k)) / C(n,k).
    """
    if len(coverage_scores) != n:
        raise DataError(
            f"max@k got {len(coverage_scores)} scores but n={n}; they must match"
        )
    if not 1 <= k <= n:
        raise DataError(f"max@k needs 1 <= k <= n, got k={k}, n={n}")
    ordered = sorted(coverage_scores)
    total = Fraction(0)
    denom = math.comb(n, k)
    for i, score in enumerate(ordered, start=1):
        weight = math.comb(i, k) - math.comb(i - 1, k)
        if weight:
            total += Fraction(score) * Fraction(weight, denom)
    return float(total)


def summarize_conditions(cells: Iterable[EvalCell]) -> dict[str, float]:
    """Three-way protocol over per-problem cells.

    Per problem: the no-abstraction accuracy, the mean accuracy across its
    abstractions, and the best single abstraction's accuracy. Each is then
    averaged over problems. Requires exactly one no_abs cell and at least one
    per_abs cell per problem.
    """
    by_problem: dict[str, dict[str, list[EvalCell]]] = {}
    for cell in cells:
        slot = by_problem.setdefault(cell.problem_id, {"no_abs": [], "per_abs": []})
        slot[cell.condition].append(cell)
    if not by_problem:
        raise DataError("no eval cells given")
    wo_vals: list[Fraction] = []
    avg_vals: list[Fraction] = []
    best_vals: list[Fraction] = []
    for pid, slot in sorted(by_problem.items()):
        if len(slot["no_abs"]) != 1:
            raise DataError(
                f"problem {pid!r} has {len(slot['no_abs'])} no_abs cells; need exactly 1"
            )
        if not slot["per_abs"]:
            raise DataError(f"problem {pid!r} has no per-abstraction cells")
        no_cell = slot["no_abs"][0]
        wo_vals.append(Fraction(no_cell.c, no_cell.n))
        accs = [Fraction(cell.c, cell.n) for cell in slot["per_abs"]]
        avg_vals.append(sum(accs, Fraction(0)) / len(accs))
        best_vals.append(max(accs))
    n_problems = len(by_problem)
    return {
        "wo_abs_avg": float(sum(wo_vals, Fraction(0)) / n_problems),
        "w_abs_avg": float(sum(avg_vals, Fraction(0)) / n_problems),
        "w_abs_best": float(sum(best_vals, Fraction(0)) / n_problems),
        "n_problems": float(n_problems),
    }


def any_correct_probability(
    abs_cells: Sequence[EvalCell],
    m: int,
    k: int,
    seed: int = 0,
    max_subsets: int = 2000,
    exhaustive_limit: int = 20,
) -> float:
    """P(at least one correct) when drawing m abstractions and k samples each.

    Per abstraction the no-correct probability over its k samples uses the
    unbiased subset estimator; abstraction subsets of size m are enumerated
    exhaustively when at most ``exhaustive_limit`` abstractions are available,
    else sampled with a derived seed.
    """
    if m < 1 or k < 1:
        raise DataError("need m >= 1 abstractions and k >= 1 samples")
    if len(abs_cells) < m:
        raise DataError(
            f"need at least m={m} abstraction cells, have {len(abs_cells)}"
        )
    fail_fracs: list[Fraction] = []
    for cell in abs_cells:
        if cell.n < k:
            raise DataError(
                f"cell {cell.problem_id}/{cell.abstraction_id} has n={cell.n} < k={k}"
            )
        fail_fracs.append(_no_solve_fraction(cell.n, cell.c, k))
    indices = range(len(fail_fracs))
    if len(fail_fracs) <= exhaustive_limit:
        subsets: Iterable[tuple[int, ...]] = combinations(indices, m)
        n_subsets = math.comb(len(fail_fracs), m)
    else:
        rng = random.Random(derive_seed(seed, "abs_subset_sampling", m * 10_000 + k))
        subsets = (tuple(rng.sample(list(indices), m)) for _ in range(max_subsets))
        n_subsets = max_subsets
    total = Fraction(0)
    for subset in subsets:
        fail = Fraction(1)
        for idx in subset:
            fail *= fail_fracs[idx]
        total += 1 - fail
    return float(total / n_subsets)


def equal_compute_pass(
    n: int, cells: Sequence[EvalCell], seed: int = 0
) -> dict[str, float]:
    """Compare pass@(n*n) plain sampling against n abstractions with n samples each.

    Operates on one problem's cells: its no_abs cell must hold at least n*n
    samples, and at least n per-abstraction cells with n samples each must be
    present.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    pids = {cell.problem_id for cell in cells}
    if len(pids) != 1:
        raise DataError(
            f"equal_compute_pass works on one problem's cells, got {sorted(pids)}"
        )
    no_cells = [c for c in cells if c.condition == "no_abs"]
    abs_cells = [c for c in cells if c.condition == "per_abs"]
    if len(no_cells) != 1:
        raise DataError(f"need exactly one no_abs cell, have {len(no_cells)}")
    budget = n * n
    no_cell = no_cells[0]
    if no_cell.n < budget:
        raise DataError(
            f"no_abs cell has {no_cell.n} samples; need >= n*n = {budget}"
        )
    solutions_only = pass_at_k(no_cell.n, no_cell.c, budget)
    abs_conditioned = any_correct_probability(abs_cells, m=n, k=n, seed=seed)
    return {"solutions_only": solutions_only, "abs_conditioned": abs_conditioned}


def load_cells(path: str | Any) -> list[EvalCell]:
    from .core import read_jsonl

    out: list[EvalCell] = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(EvalCell.from_record(rec))
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_cells(cells: Sequence[EvalCell], path: str | Any) -> None:
    from .core import write_jsonl

    write_jsonl((c.to_record() for c in cells), path)


def render_conditions_table(summary: Mapping[str, float]) -> str:
    """Aligned plain-text table for the three-way protocol report."""
    rows = [
        ("wo_abs (avg)", summary["wo_abs_avg"]),
        ("w_abs (avg)", summary["w_abs_avg"]),
        ("w_abs (best)", summary["w_abs_best"]),
    ]
    width = max(len(label) for label, _ in rows)
    lines = [f"{'condition'.ljust(width)}  accuracy"]
    lines.append(f"{'-' * width}  --------")
    for label, value in rows:
        lines.append(f"{label.ljust(width)}  {value:8.4f}")
    lines.append(f"(over {int(summary.get('n_problems', 0))} problems)")
    return "\n".join(lines)
