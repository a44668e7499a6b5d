import json

import pytest
from hypothesis import given, strategies as st

from absrl.core import (
    NO_ABSTRACTION,
    Abstraction,
    DataError,
    FileStamp,
    Problem,
    RewardSummary,
    RolloutRecord,
    RunManifest,
    abstraction_id_for,
    canonical_json,
    derive_seed,
    load_abstractions,
    load_manifest,
    load_problems,
    problem_id_for,
    read_jsonl,
    stamp_file,
    write_jsonl,
    write_manifest,
    write_problems,
)
from conftest import make_problem


def test_problem_id_is_content_hash():
    pid = problem_id_for("What is 2+2?")
    assert pid.startswith("p") and len(pid) == 17
    assert pid == problem_id_for("What is 2+2?")
    assert pid != problem_id_for("What is 2+3?")


def test_problem_rejects_mismatched_id():
    with pytest.raises(DataError):
        Problem(id="pdeadbeefdeadbeef", prompt="x", gold_answer="1")


def test_problem_requires_rate_only_when_assigned():
    p = make_problem("q", "1")
    assert p.base_success_rate is None
    with pytest.raises(DataError):
        make_problem("q", "1", split="easy")
    tagged = make_problem("q", "1", split="easy", rate=0.7)
    assert tagged.split_tag == "easy"
    with pytest.raises(DataError):
        make_problem("q", "1", rate=0.7)


def test_abstraction_create_derives_id():
    a = Abstraction.create(problem_id=problem_id_for("q"), text="use symmetry", source="human")
    assert a.id == abstraction_id_for(a.problem_id, "use symmetry")
    with pytest.raises(DataError):
        Abstraction.create(problem_id=problem_id_for("q"), text="   ", source="human")
    with pytest.raises(DataError):
        Abstraction.create(problem_id=problem_id_for("q"), text="x", source="oracle")


def test_rollout_record_invariants():
    pid = problem_id_for("q")
    with pytest.raises(DataError):
        RolloutRecord(
            problem_id=pid,
            abstraction_id=NO_ABSTRACTION,
            solution_text="x",
            correct=True,
            reward=0.0,
            seed=1,
            token_count=3,
            extracted_answer=None,
        )
    with pytest.raises(DataError):
        RolloutRecord(
            problem_id=pid,
            abstraction_id=NO_ABSTRACTION,
            solution_text="x",
            correct=False,
            reward=1.0,
            seed=1,
            token_count=3,
        )
    with pytest.raises(DataError):
        RolloutRecord(
            problem_id=pid,
            abstraction_id="a" + "0" * 16,
            solution_text="x",
            correct=False,
            reward=0.5,
            seed=1,
            token_count=3,
        )


def test_reward_summary_mean():
    s = RewardSummary(
        problem_id=problem_id_for("q"),
        abstraction_id="a" + "0" * 16,
        n_rollouts=3,
        n_correct=2,
    )
    assert float(s.mean_acc) == pytest.approx(2 / 3)
    with pytest.raises(DataError):
        RewardSummary(
            problem_id=problem_id_for("q"),
            abstraction_id="x",
            n_rollouts=2,
            n_correct=3,
        )


def test_derive_seed_is_stable_and_spread():
    a = derive_seed(0, "stream", 0)
    assert a == derive_seed(0, "stream", 0)
    assert a != derive_seed(0, "stream", 1)
    assert a != derive_seed(1, "stream", 0)
    assert a != derive_seed(0, "other", 0)
    assert 0 <= a < 2**64


def test_canonical_json_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "rows.jsonl"
    rows = [{"k": i, "v": "x" * i} for i in range(5)]
    write_jsonl(rows, path)
    back = [rec for _, rec in read_jsonl(path)]
    assert back == rows


def test_read_jsonl_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"ok":1}\nnot json\n', encoding="utf-8")
    with pytest.raises(DataError) as err:
        list(read_jsonl(path))
    assert ":2:" in str(err.value)


def test_load_problems_rejects_duplicates(tmp_path):
    p = make_problem("dup", "1")
    path = tmp_path / "p.jsonl"
    write_problems([p, p], path)
    with pytest.raises(DataError):
        load_problems(path)


def test_problem_round_trip_through_file(tmp_path):
    problems = [make_problem(f"q{i}", str(i)) for i in range(3)]
    path = tmp_path / "p.jsonl"
    write_problems(problems, path)
    assert load_problems(path) == problems


@given(
    prompt=st.text(min_size=1, max_size=40),
    gold=st.text(min_size=1, max_size=10).filter(str.strip),
)
def test_problem_serialization_round_trips(prompt, gold):
    p = make_problem(prompt, gold)
    assert Problem.from_record(p.to_record()) == p


def test_stamp_file_relativizes(tmp_path):
    f = tmp_path / "sub" / "data.jsonl"
    f.parent.mkdir()
    f.write_text("{}\n", encoding="utf-8")
    stamp = stamp_file(f, base_dir=tmp_path)
    assert stamp.path == "sub/data.jsonl"
    assert stamp.sha256
    outside = stamp_file(f)
    assert outside.path == str(f)


def test_manifest_write_and_load(tmp_path):
    m = RunManifest(
        stage="unit",
        config_hash="c" * 64,
        master_seed=3,
        inputs=[],
        outputs=[FileStamp(path="x", sha256="s")],
        started="1970-01-01T00:00:00+00:00",
        finished="1970-01-01T00:00:00+00:00",
        details={"n": 1},
    )
    path = tmp_path / "manifest_unit.json"
    digest = write_manifest(m, path)
    assert len(digest) == 64
    loaded = load_manifest(path)
    assert loaded.stage == "unit"
    assert loaded.outputs[0].path == "x"
    # Deterministic bytes: writing the same manifest again changes nothing.
    assert write_manifest(m, path) == digest
    raw = json.loads(path.read_text(encoding="utf-8"))
    assert list(raw) == sorted(raw)


def test_write_abstractions_round_trip(tmp_path):
    pid = problem_id_for("q")
    items = [
        Abstraction.create(problem_id=pid, text="favor the direct route", source="human"),
        Abstraction.create(
            problem_id=pid, text="avoid brute force", source="summarizer", uplift=0.125
        ),
    ]
    path = tmp_path / "a.jsonl"
    from absrl.core import write_abstractions

    write_abstractions(items, path)
    assert load_abstractions(path) == items
