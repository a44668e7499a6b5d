"""Deterministic simulator backend.

The simulator models each problem as a small set of named solution strategies,
each with a success probability. A policy is a vector of logits over those
strategies; an abstraction influences the policy by naming strategies through
explicit ``[strategy:NAME]`` tags in its text, which receive an additive logit
boost. Solve probabilities are available in closed form, sampling is exactly
reproducible from derived seeds, and the policy-gradient of the log-likelihood
objective is analytic, so every statistical component of the pipeline can be
tested against ground truth.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..core import (
    NO_ABSTRACTION,
    DataError,
    Problem,
    RolloutRecord,
    derive_seed,
    problem_id_for,
    stable_hash,
)
from .base import Completion, JudgeDecision, PromptParts, SamplingParams

logger = logging.getLogger(__name__)

STRATEGY_TAG_RE = re.compile(r"\[strategy:([A-Za-z0-9_\-]+)\]")
BOOST_TAG_RE = re.compile(r"\[boost:([0-9]+(?:\.[0-9]+)?)\]")

# Standalone numbers, used by the leak-mode echo solver. Digits glued to word
# characters (strategy names like "s2") do not count.
_LOOSE_NUMBER_RE = re.compile(r"(?<![\w.])[+-]?\d+(?:\.\d+)?(?![\w.])")

_ANSWER_HINT_RE = re.compile(r"(?i)\b(?:answer|result|count|total|value)\s*(?:is|:|=)\s*(\S+)")


def named_strategies(text: str) -> frozenset[str]:
    return frozenset(STRATEGY_TAG_RE.findall(text))


def named_boost(text: str, default: float) -> float:
    m = BOOST_TAG_RE.search(text)
    return float(m.group(1)) if m else default


def softmax(logits: Sequence[float]) -> list[float]:
    peak = max(logits)
    exps = [math.exp(v - peak) for v in logits]
    total = sum(exps)
    return [v / total for v in exps]


@dataclass(frozen=True)
class SimStrategy:
    name: str
    p: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise DataError(f"strategy {self.name!r}: success probability out of [0,1]")


@dataclass
class SimProblemSpec:
    """World entry for one problem: strategies plus both policies' state."""

    prompt: str
    gold_answer: str
    strategies: tuple[SimStrategy, ...]
    sol_logits: list[float]
    abs_templates: list[str] = field(default_factory=list)
    abs_logits: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.strategies:
            raise DataError("a simulated problem needs at least one strategy")
        names = [s.name for s in self.strategies]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate strategy names: {names}")
        if len(self.sol_logits) != len(self.strategies):
            raise DataError("sol_logits length must match the strategy count")
        if self.abs_templates and len(self.abs_logits) != len(self.abs_templates):
            raise DataError("abs_logits length must match abs_templates")


class SimEnv:
    """Registry of simulated problems plus seen abstractions.

    The abstraction registry (id -> text) exists because rollout records carry
    abstraction ids only, while gradients need the abstraction's boost set.
    """

    def __init__(self, default_boost: float = 2.0) -> None:
        self.default_boost = default_boost
        self.problems: dict[str, SimProblemSpec] = {}
        self.abstractions: dict[str, str] = {}

    # -- construction -----------------------------------------------------

    def register(
        self,
        problem: Problem,
        strategies: Sequence[tuple[str, float]],
        sol_logits: Sequence[float] | None = None,
        abs_templates: Sequence[str] | None = None,
        abs_logits: Sequence[float] | None = None,
    ) -> None:
        strats = tuple(SimStrategy(name, p) for name, p in strategies)
        logits = list(sol_logits) if sol_logits is not None else [0.0] * len(strats)
        templates = list(abs_templates or [])
        t_logits = (
            list(abs_logits) if abs_logits is not None else [0.0] * len(templates)
        )
        self.problems[problem.id] = SimProblemSpec(
            prompt=problem.prompt,
            gold_answer=problem.gold_answer,
            strategies=strats,
            sol_logits=logits,
            abs_templates=templates,
            abs_logits=t_logits,
        )

    def note_abstraction(self, abstraction_id: str, text: str) -> None:
        self.abstractions[abstraction_id] = text

    def spec(self, problem_id: str) -> SimProblemSpec:
        try:
            return self.problems[problem_id]
        except KeyError:
            raise DataError(f"unknown problem id {problem_id!r} in simulated world") from None

    # -- closed forms -------------------------------------------------------

    def strategy_distribution(
        self, problem_id: str, abstraction_text: str | None
    ) -> list[float]:
        spec = self.spec(problem_id)
        logits = list(spec.sol_logits)
        if abstraction_text:
            boosted = named_strategies(abstraction_text)
            if boosted:
                boost = named_boost(abstraction_text, self.default_boost)
                for i, strat in enumerate(spec.strategies):
                    if strat.name in boosted:
                        logits[i] += boost
        return softmax(logits)

    def solve_probability(
        self, problem_id: str, abstraction_text: str | None = None
    ) -> float:
        spec = self.spec(problem_id)
        dist = self.strategy_distribution(problem_id, abstraction_text)
        return sum(w * s.p for w, s in zip(dist, spec.strategies))

    # -- state snapshots ------------------------------------------------------

    def snapshot(self) -> dict[str, Any]:
        return {
            pid: {
                "sol_logits": list(spec.sol_logits),
                "abs_logits": list(spec.abs_logits),
            }
            for pid, spec in self.problems.items()
        }

    def restore(self, snapshot: Mapping[str, Any]) -> None:
        for pid, state in snapshot.items():
            spec = self.spec(pid)
            spec.sol_logits = list(state["sol_logits"])
            spec.abs_logits = list(state["abs_logits"])

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "default_boost": self.default_boost,
            "problems": {
                pid: {
                    "prompt": spec.prompt,
                    "gold_answer": spec.gold_answer,
                    "strategies": [
                        {"name": s.name, "p": s.p} for s in spec.strategies
                    ],
                    "sol_logits": list(spec.sol_logits),
                    "abs_templates": list(spec.abs_templates),
                    "abs_logits": list(spec.abs_logits),
                }
                for pid, spec in self.problems.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimEnv":
        env = cls(default_boost=data.get("default_boost", 2.0))
        for pid, entry in data["problems"].items():
            prompt = entry["prompt"]
            if pid != problem_id_for(prompt):
                raise DataError(f"world entry {pid!r} does not match its prompt hash")
            env.problems[pid] = SimProblemSpec(
                prompt=prompt,
                gold_answer=entry["gold_answer"],
                strategies=tuple(
                    SimStrategy(s["name"], s["p"]) for s in entry["strategies"]
                ),
                sol_logits=list(entry["sol_logits"]),
                abs_templates=list(entry.get("abs_templates", [])),
                abs_logits=list(entry.get("abs_logits", [])),
            )
        return env

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimEnv":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def problems_list(self) -> list[Problem]:
        return [
            Problem.create(prompt=spec.prompt, gold_answer=spec.gold_answer)
            for spec in self.problems.values()
        ]


def _wrong_answer(gold: str) -> str:
    try:
        return str(int(gold) + 1)
    except ValueError:
        return gold + "_alt"


def _resolve_problem_id(parts: PromptParts) -> str:
    if parts.problem_id is not None:
        return parts.problem_id
    assert parts.problem is not None
    return problem_id_for(parts.problem)


class SimSolutionPolicy:
    """Simulated solution generator over a SimEnv world."""

    supports_seeding = True
    is_deterministic = True

    def __init__(self, env: SimEnv) -> None:
        self.env = env

    def sample(self, parts: PromptParts, params: SamplingParams) -> list[Completion]:
        import random

        if parts.problem is None:
            return self._echo_sample(parts, params)
        pid = _resolve_problem_id(parts)
        spec = self.env.spec(pid)
        dist = self.env.strategy_distribution(pid, parts.abstraction)
        cumulative: list[float] = []
        total = 0.0
        for w in dist:
            total += w
            cumulative.append(total)
        rng = random.Random(params.seed)
        completions: list[Completion] = []
        for i in range(params.n_samples):
            idx = bisect.bisect_left(cumulative, rng.random())
            idx = min(idx, len(spec.strategies) - 1)
            strat = spec.strategies[idx]
            solved = rng.random() < strat.p
            if solved:
                text = (
                    f"Trying the route [strategy:{strat.name}]. The steps line up "
                    f"cleanly. Final answer: \\boxed{{{spec.gold_answer}}}"
                )
            elif i % 2 == 0:
                text = (
                    f"Trying the route [strategy:{strat.name}]. Partway through, the "
                    f"bookkeeping slips. \\boxed{{{_wrong_answer(spec.gold_answer)}}}"
                )
            else:
                text = (
                    f"Trying the route [strategy:{strat.name}]. The approach stalls "
                    f"before a definite result."
                )
            completions.append(Completion(text=text, token_count=len(text.split())))
        return completions

    def _echo_sample(self, parts: PromptParts, params: SamplingParams) -> list[Completion]:
        """Abstraction-only prompts: echo any answer the guidance gives away.

        This is the adversarial reader a leak check needs; a neutral,
        procedure-only abstraction yields nothing to echo.
        """
        assert parts.abstraction is not None
        candidate = _leaked_candidate(parts.abstraction)
        completions = []
        for _ in range(params.n_samples):
            if candidate is not None:
                text = (
                    "The guidance already states the result. "
                    f"Final answer: \\boxed{{{candidate}}}"
                )
            else:
                text = (
                    "The guidance describes a procedure but no definite result; "
                    "nothing to conclude without the problem."
                )
            completions.append(Completion(text=text, token_count=len(text.split())))
        return completions

    def apply_gradient(
        self, records: Sequence[RolloutRecord], lr: float
    ) -> dict[str, list[float]]:
        """One ascent step on the advantage-weighted log-likelihood. Returns the gradient."""
        grads = sim_gradient(self.env, records)
        for pid, grad in grads.items():
            spec = self.env.spec(pid)
            spec.sol_logits = [v + lr * g for v, g in zip(spec.sol_logits, grad)]
        return grads


def _leaked_candidate(abstraction_text: str) -> str | None:
    from ..verifier import extract_answer

    direct = extract_answer(abstraction_text)
    if direct is not None:
        return direct
    hinted = _ANSWER_HINT_RE.search(abstraction_text)
    if hinted:
        return hinted.group(1).strip().rstrip(".,;:!?")
    scrubbed = STRATEGY_TAG_RE.sub(" ", abstraction_text)
    scrubbed = BOOST_TAG_RE.sub(" ", scrubbed)
    numbers = _LOOSE_NUMBER_RE.findall(scrubbed)
    return numbers[-1] if numbers else None


def sim_gradient(
    env: SimEnv,
    records: Sequence[RolloutRecord],
    abstractions: Mapping[str, str] | None = None,
) -> dict[str, list[float]]:
    """Analytic gradient of sum(advantage * log pi(strategy)) w.r.t. solution logits.

    The strategy each record used is read back from its ``[strategy:...]`` tag;
    the abstraction text (for the boost set) comes from ``abstractions`` or the
    env's registry.
    """
    lookup = abstractions if abstractions is not None else env.abstractions
    grads: dict[str, list[float]] = {}
    for rec in records:
        if rec.advantage is None:
            raise DataError(
                f"rollout for {rec.problem_id!r} has no advantage; "
                "compute group advantages before taking gradients"
            )
        spec = env.spec(rec.problem_id)
        if rec.problem_id not in grads:
            grads[rec.problem_id] = [0.0] * len(spec.strategies)
        if rec.advantage == 0.0:
            continue
        tags = named_strategies(rec.solution_text)
        strategy_names = [s.name for s in spec.strategies]
        used = [name for name in strategy_names if name in tags]
        if len(used) != 1:
            raise DataError(
                f"rollout for {rec.problem_id!r} names {len(used)} known strategies; "
                "expected exactly one [strategy:...] tag"
            )
        if rec.abstraction_id == NO_ABSTRACTION:
            abs_text: str | None = None
        else:
            abs_text = lookup.get(rec.abstraction_id)
            if abs_text is None:
                raise DataError(
                    f"abstraction {rec.abstraction_id!r} not registered with the world"
                )
        dist = env.strategy_distribution(rec.problem_id, abs_text)
        used_idx = strategy_names.index(used[0])
        grad = grads[rec.problem_id]
        for t in range(len(grad)):
            indicator = 1.0 if t == used_idx else 0.0
            grad[t] += rec.advantage * (indicator - dist[t])
    return grads


class SimAbstractionPolicy:
    """Simulated abstraction generator: a categorical over per-problem templates."""

    supports_seeding = True
    is_deterministic = True

    def __init__(self, env: SimEnv) -> None:
        self.env = env

    def sample(self, parts: PromptParts, params: SamplingParams) -> list[Completion]:
        import random

        pid = _resolve_problem_id(parts)
        spec = self.env.spec(pid)
        if not spec.abs_templates:
            raise DataError(f"problem {pid!r} has no abstraction templates")
        dist = softmax(spec.abs_logits)
        cumulative: list[float] = []
        total = 0.0
        for w in dist:
            total += w
            cumulative.append(total)
        rng = random.Random(params.seed)
        completions = []
        for _ in range(params.n_samples):
            idx = min(
                bisect.bisect_left(cumulative, rng.random()),
                len(spec.abs_templates) - 1,
            )
            text = spec.abs_templates[idx]
            completions.append(Completion(text=text, token_count=len(text.split())))
        return completions

    def template_distribution(self, problem_id: str) -> dict[str, float]:
        spec = self.env.spec(problem_id)
        dist = softmax(spec.abs_logits)
        return dict(zip(spec.abs_templates, dist))

    def rft_update(self, problem_id: str, kept_texts: Sequence[str], lr: float) -> None:
        """Log-likelihood ascent on the kept abstraction texts."""
        spec = self.env.spec(problem_id)
        for text in kept_texts:
            try:
                kept_idx = spec.abs_templates.index(text)
            except ValueError:
                raise DataError(
                    f"kept abstraction text is not a template of {problem_id!r}"
                ) from None
            dist = softmax(spec.abs_logits)
            spec.abs_logits = [
                v + lr * ((1.0 if i == kept_idx else 0.0) - dist[i])
                for i, v in enumerate(spec.abs_logits)
            ]


class SimJudge:
    """Deterministic judge grounded in strategy tags.

    Adherence: a solution follows an abstraction iff every strategy tag in the
    solution is named by the abstraction. Free-form judgments classify an
    abstraction by keyword cues and end with a parenthesized letter.
    """

    is_deterministic = True

    _CATEGORY_RULES: tuple[tuple[str, tuple[str, ...]], ...] = (
        ("A", ("avoid", "beware", "double-check", "dead-end", "do not", "pitfall")),
        ("B", ("reframe", "reformulate", "symmetry", "represent", "recast")),
        ("C", ("follow", "formula", "plug", "procedure", "steps in order")),
        ("D", ("invariant", "collapse", "shortcut", "parity", "telescop")),
    )

    def binary_judgment(self, instruction: str, pair: tuple[str, str]) -> JudgeDecision:
        abstraction_text, solution_text = pair
        abs_tags = named_strategies(abstraction_text)
        sol_tags = named_strategies(solution_text)
        verdict = bool(sol_tags) and sol_tags <= abs_tags
        rationale = (
            f"solution routes: {sorted(sol_tags) or 'none tagged'}; "
            f"guidance names: {sorted(abs_tags) or 'none'}; "
            f"{'adheres' if verdict else 'diverges'}"
        )
        return JudgeDecision(verdict=verdict, rationale=rationale)

    def free_judgment(self, prompt: str) -> str:
        # The classifier template embeds the abstraction after a trailing
        # "abstraction:" marker; judge only that part, not the instructions.
        lowered = prompt.lower()
        marker = lowered.rfind("abstraction:")
        body = lowered[marker + len("abstraction:"):] if marker >= 0 else lowered
        for letter, cues in self._CATEGORY_RULES:
            if any(cue in body for cue in cues):
                return f"The guidance matches the {letter!r} profile. ({letter})"
        return "No profile cue found in the guidance. (E)"


class HashingEmbedder:
    """Deterministic bag-of-tokens embedding: tokens hash into a fixed-size histogram."""

    def __init__(self, dim: int = 64) -> None:
        if dim < 2:
            raise DataError("embedding dim must be >= 2")
        self.dim = dim

    def _bucket(self, token: str) -> int:
        return int(stable_hash(token)[:8], 16) % self.dim

    def embed(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[a-z0-9:_\-]+", text.lower())
        if not tokens:
            raise DataError("cannot embed empty or token-free text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            vec[self._bucket(token)] += 1.0
        return vec / np.linalg.norm(vec)


class SimSummarizer:
    """Turns solution traces into candidate abstractions, simulator style.

    Strategies that appear in conclusive traces get "favor" candidates, ranked
    by how often they concluded; strategies that only ever stalled get caution
    candidates. Output texts carry strategy tags and no numerals, so they can
    never leak a gold answer.
    """

    is_deterministic = True

    def summarize(
        self,
        problem_text: str,
        traces: Sequence[str],
        n_candidates: int,
        seed: int,
    ) -> list[str]:
        succeeded: dict[str, int] = {}
        seen: dict[str, int] = {}
        for trace in traces:
            for tag in STRATEGY_TAG_RE.findall(trace):
                seen[tag] = seen.get(tag, 0) + 1
                if "final answer:" in trace.lower():
                    succeeded[tag] = succeeded.get(tag, 0) + 1
        candidates: list[str] = []
        for name, _count in sorted(succeeded.items(), key=lambda kv: (-kv[1], kv[0])):
            candidates.append(
                f"Favor the route [strategy:{name}]; commit to it early and follow "
                f"the procedure to the end."
            )
        for name in sorted(set(seen) - set(succeeded)):
            candidates.append(
                f"Avoid the route [strategy:{name}]; it tends to dead-end, so "
                f"double-check any step that relies on it."
            )
        return candidates[:n_candidates]
