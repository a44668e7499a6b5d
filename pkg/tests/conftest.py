import pytest

from absrl.backends.sim import SimEnv, SimSolutionPolicy
from absrl.core import Problem, problem_id_for


def make_problem(prompt: str, gold: str, split: str = "unassigned", rate=None) -> Problem:
    return Problem(
        id=problem_id_for(prompt),
        prompt=prompt,
        gold_answer=gold,
        split_tag=split,
        base_success_rate=rate,
    )


def two_strategy_world(
    p_good: float = 0.9,
    p_bad: float = 0.1,
    default_boost: float = 2.0,
    prompt: str = "Route-picking task: choose a computation route and report 7.",
    gold: str = "7",
):
    """One problem, two strategies; returns (env, problem)."""
    env = SimEnv(default_boost=default_boost)
    problem = make_problem(prompt, gold)
    env.register(
        problem,
        [("good_route", p_good), ("bad_route", p_bad)],
        abs_templates=[
            "Favor the route [strategy:good_route]; commit to it early.",
            "Favor the route [strategy:bad_route]; commit to it early.",
        ],
    )
    return env, problem


@pytest.fixture
def tiny_world():
    return two_strategy_world()


@pytest.fixture
def tiny_solver(tiny_world):
    env, _ = tiny_world
    return SimSolutionPolicy(env)
