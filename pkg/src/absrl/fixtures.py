"""Bundled fixtures: a 20-problem simulated world and five small math problems.

The simulated world is constructed deterministically in code (no data files to
drift) and spans the base-success spectrum so the curriculum partition sees
easy, medium, and hard problems with default thresholds.
"""

from __future__ import annotations

from pathlib import Path

from .backends.sim import SimEnv
from .core import Problem, write_problems

# (main strategy success, alternative success, weak success) per difficulty band.
_BANDS = [
    (0.9, 0.75, 0.3),   # easy: most routes work
    (0.35, 0.7, 0.1),   # medium: the good route is not the default
    (0.25, 0.55, 0.05),  # medium-low
    (0.02, 0.08, 0.0),  # hard: nothing reliable
]


def fixture_world(default_boost: float = 2.0) -> SimEnv:
    env = SimEnv(default_boost=default_boost)
    for i in range(20):
        band = _BANDS[i % len(_BANDS)]
        prompt = (
            f"Sim task {i:02d}: pick a computation route and report the fixture "
            f"constant for slot {i:02d}."
        )
        gold = str(17 + 3 * i)
        problem = Problem.create(prompt=prompt, gold_answer=gold)
        strategies = [
            (f"route_a{i:02d}", band[0]),
            (f"route_b{i:02d}", band[1]),
            (f"route_c{i:02d}", band[2]),
        ]
        best = max(strategies, key=lambda s: s[1])[0]
        worst = min(strategies, key=lambda s: s[1])[0]
        templates = [
            f"Favor the route [strategy:{best}]; commit to it early and follow "
            f"the procedure to the end.",
            f"Favor the route [strategy:{worst}]; commit to it early and follow "
            f"the procedure to the end.",
            f"Avoid the route [strategy:{worst}]; it tends to dead-end, so "
            f"double-check any step that relies on it.",
        ]
        env.register(
            problem,
            strategies,
            sol_logits=[0.0, 0.0, 0.0],
            abs_templates=templates,
        )
    return env


def fixture_problems() -> list[Problem]:
    return fixture_world().problems_list()


def math_problems() -> list[Problem]:
    pairs = [
        ("Compute 12 * 13.", "156"),
        ("What is the sum of the integers from 1 to 100 inclusive?", "5050"),
        ("Simplify 3/4 + 1/4 to a single number.", "1"),
        ("A rectangle has side lengths 7 and 9. What is its area?", "63"),
        ("Evaluate 2 to the power 10.", "1024"),
    ]
    return [Problem.create(prompt=q, gold_answer=a) for q, a in pairs]


def write_fixture_problems(path: str | Path) -> list[Problem]:
    problems = fixture_problems()
    write_problems(problems, path)
    return problems


def write_math_problems(path: str | Path) -> list[Problem]:
    problems = math_problems()
    write_problems(problems, path)
    return problems
