import json
import math

import httpx
import numpy as np
import pytest

from absrl.backends.base import (
    BackendError,
    PermanentBackendError,
    PromptParts,
    SamplingParams,
    replace_params,
)
from absrl.backends.http import (
    HttpClient,
    HttpEmbedder,
    HttpJudge,
    HttpPolicyBackend,
    HttpSummarizer,
    request_gate,
)
from absrl.backends.sim import (
    HashingEmbedder,
    SimAbstractionPolicy,
    SimEnv,
    SimJudge,
    SimSolutionPolicy,
    SimSummarizer,
    named_strategies,
    sim_gradient,
    softmax,
)
from absrl.core import DataError, NO_ABSTRACTION, RolloutRecord
from conftest import make_problem, two_strategy_world


# ---------------------------------------------------------------------------
# Prompt plumbing
# ---------------------------------------------------------------------------


def test_prompt_parts_requires_some_content():
    with pytest.raises(DataError):
        PromptParts()
    only_abs = PromptParts(abstraction="guidance")
    msg = only_abs.render_user_message()
    assert "guidance" in msg


def test_prompt_parts_renders_both_sections():
    parts = PromptParts(problem="What is 2+2?", abstraction="add carefully")
    msg = parts.render_user_message()
    assert "add carefully" in msg
    assert "What is 2+2?" in msg
    assert msg.index("add carefully") < msg.index("What is 2+2?")


def test_replace_params():
    base = SamplingParams()
    p = replace_params(base, n_samples=3, seed=9)
    assert (p.n_samples, p.seed) == (3, 9)
    assert base.n_samples != 3 or base.seed != 9


def test_sampling_params_validation():
    with pytest.raises(DataError):
        SamplingParams(n_samples=0)
    with pytest.raises(DataError):
        SamplingParams(temperature=-0.1)


# ---------------------------------------------------------------------------
# Simulated solution policy
# ---------------------------------------------------------------------------


def test_sim_sample_deterministic(tiny_world):
    env, problem = tiny_world
    pol = SimSolutionPolicy(env)
    parts = PromptParts(problem=problem.prompt, problem_id=problem.id)
    a = pol.sample(parts, SamplingParams(n_samples=16, seed=11))
    b = pol.sample(parts, SamplingParams(n_samples=16, seed=11))
    assert [c.text for c in a] == [c.text for c in b]
    c = pol.sample(parts, SamplingParams(n_samples=16, seed=12))
    assert [x.text for x in a] != [x.text for x in c]


def test_sim_empirical_matches_strategy_distribution(tiny_world):
    env, problem = tiny_world
    pol = SimSolutionPolicy(env)
    parts = PromptParts(problem=problem.prompt, problem_id=problem.id)
    n = 4000
    completions = pol.sample(parts, SamplingParams(n_samples=n, seed=3))
    frac_good = sum(
        1 for c in completions if "good_route" in named_strategies(c.text)
    ) / n
    expected = env.strategy_distribution(problem.id, None)[0]
    # 4 sigma band for a binomial proportion
    tol = 4 * math.sqrt(expected * (1 - expected) / n)
    assert abs(frac_good - expected) < tol


def test_sim_solve_probability_oracle(tiny_world):
    env, problem = tiny_world
    pol = SimSolutionPolicy(env)
    parts = PromptParts(problem=problem.prompt, problem_id=problem.id)
    n = 4000
    completions = pol.sample(parts, SamplingParams(n_samples=n, seed=4))
    from absrl.verifier import check_answer, extract_answer

    acc = sum(
        1
        for c in completions
        if check_answer(extract_answer(c.text), problem.gold_answer)
    ) / n
    expected = env.solve_probability(problem.id)
    tol = 4 * math.sqrt(expected * (1 - expected) / n)
    assert abs(acc - expected) < tol


def test_abstraction_boost_raises_solve_probability(tiny_world):
    env, problem = tiny_world
    favor_good = "Favor the route [strategy:good_route]; commit to it early."
    assert env.solve_probability(problem.id, favor_good) > env.solve_probability(
        problem.id
    )
    explicit = "Favor [strategy:good_route][boost:5.0]."
    assert env.solve_probability(problem.id, explicit) > env.solve_probability(
        problem.id, favor_good
    )


def test_sim_unknown_problem(tiny_world):
    env, _ = tiny_world
    pol = SimSolutionPolicy(env)
    with pytest.raises(DataError):
        pol.sample(
            PromptParts(problem="never registered"), SamplingParams(n_samples=1, seed=0)
        )


def test_wrong_answers_never_grade_correct(tiny_world):
    env, problem = tiny_world
    pol = SimSolutionPolicy(env)
    parts = PromptParts(problem=problem.prompt, problem_id=problem.id)
    from absrl.verifier import check_answer, extract_answer

    for c in pol.sample(parts, SamplingParams(n_samples=200, seed=5)):
        extracted = extract_answer(c.text)
        graded = check_answer(extracted, problem.gold_answer)
        assert graded == ("The steps line up cleanly" in c.text)


def test_env_snapshot_restore(tiny_world):
    env, problem = tiny_world
    original = env.strategy_distribution(problem.id, None)[0]
    snap = env.snapshot()
    env.spec(problem.id).sol_logits[0] += 3.0
    moved = env.strategy_distribution(problem.id, None)[0]
    assert moved != original
    env.restore(snap)
    assert env.strategy_distribution(problem.id, None)[0] == original


def test_env_save_load_round_trip(tmp_path, tiny_world):
    env, _ = tiny_world
    path = tmp_path / "world.json"
    env.save(path)
    back = SimEnv.load(path)
    assert back.to_dict() == env.to_dict()


def test_softmax_sums_to_one():
    dist = softmax([0.0, 1.0, -2.0])
    assert sum(dist) == pytest.approx(1.0)
    assert dist[1] > dist[0] > dist[2]


# ---------------------------------------------------------------------------
# Toy gradient
# ---------------------------------------------------------------------------


def _one_record(problem, text, advantage, abstraction_id=NO_ABSTRACTION):
    return RolloutRecord(
        problem_id=problem.id,
        abstraction_id=abstraction_id,
        solution_text=text,
        correct=False,
        reward=0.0,
        seed=0,
        token_count=4,
        advantage=advantage,
    )


def test_sim_gradient_signs(tiny_world):
    env, problem = tiny_world
    rec = _one_record(problem, "Trying the route [strategy:good_route].", 1.0)
    grads = sim_gradient(env, [rec])
    g = grads[problem.id]
    assert g[0] > 0 > g[1]


def test_sim_gradient_requires_advantage(tiny_world):
    env, problem = tiny_world
    rec = _one_record(problem, "Trying the route [strategy:good_route].", None)
    with pytest.raises(DataError):
        sim_gradient(env, [rec])


def test_sim_gradient_requires_single_tag(tiny_world):
    env, problem = tiny_world
    rec = _one_record(problem, "no tags at all", 1.0)
    with pytest.raises(DataError):
        sim_gradient(env, [rec])


def test_apply_gradient_moves_distribution(tiny_world):
    env, problem = tiny_world
    pol = SimSolutionPolicy(env)
    before = env.strategy_distribution(problem.id, None)[0]
    recs = [
        _one_record(problem, "Trying the route [strategy:good_route].", 0.5)
        for _ in range(4)
    ]
    pol.apply_gradient(recs, lr=1.0)
    after = env.strategy_distribution(problem.id, None)[0]
    assert after > before


# ---------------------------------------------------------------------------
# Simulated abstraction policy, judge, embedder, summarizer
# ---------------------------------------------------------------------------


def test_abs_policy_samples_templates(tiny_world):
    env, problem = tiny_world
    abs_pol = SimAbstractionPolicy(env)
    parts = PromptParts(problem=problem.prompt, problem_id=problem.id)
    comps = abs_pol.sample(parts, SamplingParams(n_samples=8, seed=2))
    templates = set(env.spec(problem.id).abs_templates)
    assert all(c.text in templates for c in comps)


def test_abs_policy_rft_update_shifts_mass(tiny_world):
    env, problem = tiny_world
    abs_pol = SimAbstractionPolicy(env)
    good = env.spec(problem.id).abs_templates[0]
    before = abs_pol.template_distribution(problem.id)[good]
    abs_pol.rft_update(problem.id, [good], lr=1.0)
    after = abs_pol.template_distribution(problem.id)[good]
    assert after > before
    assert sum(abs_pol.template_distribution(problem.id).values()) == pytest.approx(1.0)


def test_abs_policy_rejects_unknown_kept_text(tiny_world):
    env, problem = tiny_world
    abs_pol = SimAbstractionPolicy(env)
    with pytest.raises(DataError):
        abs_pol.rft_update(problem.id, ["not a registered template"], lr=1.0)


def test_sim_judge_adherence():
    judge = SimJudge()
    abstraction = "Favor the route [strategy:fast_path]; commit to it."
    follows = "Trying the route [strategy:fast_path]. Final answer: \\boxed{1}"
    ignores = "Trying the route [strategy:slow_path]. Final answer: \\boxed{1}"
    yes = judge.binary_judgment("does the solution follow?", (abstraction, follows))
    no = judge.binary_judgment("does the solution follow?", (abstraction, ignores))
    assert yes.verdict is True
    assert no.verdict is False
    # Untagged solutions cannot adhere.
    blank = judge.binary_judgment("q", (abstraction, "plain words, no tags"))
    assert blank.verdict is False


@pytest.mark.parametrize(
    "body,letter",
    [
        ("Avoid the dead-end route; double-check it.", "A"),
        ("Reformulate with the symmetry of the figure.", "B"),
        ("Follow the procedure steps in order and plug in.", "C"),
        ("Use the invariant to collapse the case split.", "D"),
        ("Some vague words.", "E"),
    ],
)
def test_sim_judge_classifies(body, letter):
    judge = SimJudge()
    reply = judge.free_judgment(f"...instructions...\n\nabstraction:\n\n{body}")
    assert reply.rstrip().endswith(f"({letter})")


def test_hashing_embedder_properties():
    emb = HashingEmbedder()
    v = emb.embed("favor the direct route")
    assert v.shape == (64,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.allclose(v, emb.embed("favor the direct route"))
    near = float(v @ emb.embed("favor the direct route today"))
    far = float(v @ emb.embed("unrelated words entirely elsewhere"))
    assert near > far
    with pytest.raises(DataError):
        emb.embed("   ")


def test_sim_summarizer_outputs_tagged_candidates(tiny_world):
    env, problem = tiny_world
    summ = SimSummarizer()
    traces = [
        "Trying the route [strategy:good_route]. The steps line up cleanly. "
        "Final answer: \\boxed{7}",
        "Trying the route [strategy:bad_route]. I stall before a definite result.",
    ]
    cands = summ.summarize(problem.prompt, traces, n_candidates=4, seed=0)
    assert 1 <= len(cands) <= 4
    assert any("[strategy:good_route]" in c for c in cands)
    assert cands == summ.summarize(problem.prompt, traces, n_candidates=4, seed=0)


# ---------------------------------------------------------------------------
# HTTP backends (mock transport; no network)
# ---------------------------------------------------------------------------


def _chat_response(texts, finish="stop", usage_tokens=None):
    body = {
        "choices": [
            {"message": {"content": t}, "finish_reason": finish} for t in texts
        ]
    }
    if usage_tokens is not None:
        body["usage"] = {"completion_tokens": usage_tokens}
    return body


def _client(handler, **kw):
    kw.setdefault("backoff_base", 0.0)
    return HttpClient(
        base_url="http://testserver/v1",
        model="test-model",
        transport=httpx.MockTransport(handler),
        **kw,
    )


def test_http_policy_returns_all_choices():
    seen = {}

    def handler(request):
        seen["payload"] = json.loads(request.content)
        return httpx.Response(200, json=_chat_response([f"t{i}" for i in range(8)]))

    pol = HttpPolicyBackend(_client(handler))
    comps = pol.sample(
        PromptParts(problem="question"), SamplingParams(n_samples=8, seed=77)
    )
    assert [c.text for c in comps] == [f"t{i}" for i in range(8)]
    assert seen["payload"]["n"] == 8
    assert seen["payload"]["seed"] == 77


def test_http_policy_choice_count_mismatch():
    def handler(request):
        return httpx.Response(200, json=_chat_response(["only one"]))

    pol = HttpPolicyBackend(_client(handler))
    with pytest.raises(BackendError):
        pol.sample(PromptParts(problem="q"), SamplingParams(n_samples=2, seed=0))


def test_http_policy_truncation_and_usage():
    def handler(request):
        return httpx.Response(
            200, json=_chat_response(["partial"], finish="length", usage_tokens=321)
        )

    pol = HttpPolicyBackend(_client(handler))
    (comp,) = pol.sample(PromptParts(problem="q"), SamplingParams(n_samples=1, seed=0))
    assert comp.truncated is True
    assert comp.token_count == 321


def test_http_retries_then_succeeds():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(500, text="flaky")
        return httpx.Response(200, json=_chat_response(["ok"]))

    pol = HttpPolicyBackend(_client(handler))
    (comp,) = pol.sample(PromptParts(problem="q"), SamplingParams(n_samples=1, seed=0))
    assert comp.text == "ok"
    assert calls["n"] == 3


def test_http_gives_up_after_max_retries():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return httpx.Response(503, text="down")

    client = _client(handler, max_retries=2)
    with pytest.raises(BackendError) as err:
        client.post_json("/chat/completions", {})
    assert calls["n"] == 3
    assert len(err.value.attempts) == 3


def test_http_permanent_client_error_does_not_retry():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return httpx.Response(404, text="nope")

    client = _client(handler)
    with pytest.raises(PermanentBackendError):
        client.post_json("/chat/completions", {})
    assert calls["n"] == 1


def test_http_sends_api_key_header(monkeypatch):
    monkeypatch.setenv("UNIT_TEST_KEY", "sk-unit")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("Authorization")
        return httpx.Response(200, json=_chat_response(["x"]))

    client = HttpClient(
        base_url="http://testserver/v1",
        model="m",
        api_key_env="UNIT_TEST_KEY",
        transport=httpx.MockTransport(handler),
    )
    HttpPolicyBackend(client).sample(
        PromptParts(problem="q"), SamplingParams(n_samples=1, seed=0)
    )
    assert seen["auth"] == "Bearer sk-unit"


def test_http_judge_parses_verdicts():
    replies = iter(["YES\nit follows", "no, it drifts", "MAYBE?"])

    def handler(request):
        return httpx.Response(200, json=_chat_response([next(replies)]))

    judge = HttpJudge(_client(handler))
    assert judge.binary_judgment("q", ("a", "b")).verdict is True
    assert judge.binary_judgment("q", ("a", "b")).verdict is False
    with pytest.raises(BackendError):
        judge.binary_judgment("q", ("a", "b"))


def test_http_embedder_normalizes():
    def handler(request):
        return httpx.Response(200, json={"data": [{"embedding": [3.0, 4.0]}]})

    emb = HttpEmbedder(_client(handler))
    v = emb.embed("text")
    assert np.allclose(v, [0.6, 0.8])
    assert emb.dim == 2


def test_http_summarizer_splits_blocks():
    def handler(request):
        return httpx.Response(
            200, json=_chat_response(["first hint\n###\nsecond hint\n###\n"])
        )

    summ = HttpSummarizer(_client(handler), "{n_candidates} {problem} {traces}")
    out = summ.summarize("p", ["t1", "t2"], n_candidates=5, seed=0)
    assert out == ["first hint", "second hint"]


def test_request_gate_is_shared_per_cap():
    assert request_gate(8) is request_gate(8)
    assert request_gate(8) is not request_gate(9)
