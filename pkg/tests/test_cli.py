"""Command-line behavior: exit codes, dry runs, and the staged pipeline."""

import json

import pytest

from absrl.cli import main


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--help"])
    assert excinfo.value.code == 0
    assert "gen-abstractions" in capsys.readouterr().out

    with pytest.raises(SystemExit) as excinfo:
        main(["eval", "--help"])
    assert excinfo.value.code == 0
    assert "--n-samples" in capsys.readouterr().out


def test_no_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 2


def test_unknown_flag_suggests_nearest(tmp_path, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["eval", "--out-dir", str(tmp_path / "out"), "--n-sampels", "4"])
    assert excinfo.value.code == 2
    err = capsys.readouterr().err
    assert "did you mean" in err
    assert "--n-samples" in err


def test_missing_config_file_exits_two(tmp_path, capsys):
    rc = main(
        [
            "eval",
            "--out-dir",
            str(tmp_path / "out"),
            "--config",
            str(tmp_path / "absent.json"),
        ]
    )
    assert rc == 2
    assert "usage error" in capsys.readouterr().err


def test_bad_config_key_is_domain_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mystery_section": {}}), encoding="utf-8")
    rc = main(["eval", "--out-dir", str(tmp_path / "out"), "--config", str(cfg)])
    assert rc == 1
    assert "unknown config section" in capsys.readouterr().err


def test_dry_run_has_no_side_effects(tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["eval", "--out-dir", str(out), "--dry-run"])
    assert rc == 0
    assert not out.exists()
    plan = json.loads(capsys.readouterr().out)
    assert plan["stage"] == "eval"
    assert plan["config"]["backend"]["kind"] == "sim"
    assert any(p.endswith("summary.json") for p in plan["planned_outputs"])
    assert plan["manifest_path"].endswith("manifest_eval.json")


def test_report_rejects_malformed_summary(tmp_path, capsys):
    summary = tmp_path / "summary.json"
    summary.write_text(json.dumps({"n_problems": 2}), encoding="utf-8")
    rc = main(["report", "--out-dir", str(tmp_path / "out"), "--summary", str(summary)])
    assert rc == 1
    assert "absrl: error" in capsys.readouterr().err


def test_keyboard_interrupt_maps_to_130(tmp_path, monkeypatch, capsys):
    def boom(cfg):
        raise KeyboardInterrupt

    monkeypatch.setattr("absrl.cli.build_bundle", boom)
    rc = main(["gen-abstractions", "--out-dir", str(tmp_path / "out")])
    assert rc == 130
    assert "interrupted" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the staged pipeline once on the bundled world; share artifacts."""
    base = tmp_path_factory.mktemp("pipeline")
    dirs = {
        name: base / name
        for name in (
            "gen",
            "filt",
            "part",
            "eval",
            "joint",
            "compute",
            "adhere",
            "classify",
            "report",
        )
    }

    assert (
        main(
            [
                "gen-abstractions",
                "--out-dir",
                str(dirs["gen"]),
                "--seed",
                "7",
                "--n-traces",
                "8",
                "--n-abstractions",
                "3",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "filter",
                "--out-dir",
                str(dirs["filt"]),
                "--seed",
                "7",
                "--abstractions",
                str(dirs["gen"] / "abstractions.jsonl"),
                "--leak-samples",
                "4",
                "--uplift-samples",
                "64",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "partition",
                "--out-dir",
                str(dirs["part"]),
                "--seed",
                "7",
                "--partition-samples",
                "32",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "eval",
                "--out-dir",
                str(dirs["eval"]),
                "--seed",
                "7",
                "--abstractions",
                str(dirs["filt"] / "kept_abstractions.jsonl"),
                "--n-samples",
                "8",
                "--n-abstractions",
                "2",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "run-joint",
                "--out-dir",
                str(dirs["joint"]),
                "--seed",
                "7",
                "--problems",
                str(dirs["part"] / "partitioned_problems.jsonl"),
                "--epochs",
                "1",
            ]
        )
        == 0
    )
    return dirs


def test_pipeline_gen_outputs(pipeline):
    lines = (pipeline["gen"] / "abstractions.jsonl").read_text("utf-8").splitlines()
    assert lines
    first = json.loads(lines[0])
    assert {"id", "problem_id", "text", "source"} <= set(first)
    manifest = json.loads(
        (pipeline["gen"] / "manifest_gen_abstractions.json").read_text("utf-8")
    )
    assert manifest["stage"] == "gen_abstractions"
    assert manifest["details"]["status"] == "complete"


def test_pipeline_filter_outputs(pipeline):
    filt = pipeline["filt"]
    for name in (
        "abstractions_checked.jsonl",
        "kept_abstractions.jsonl",
        "uplift_reports.jsonl",
        "sft_corpus.jsonl",
        "manifest_filter.json",
    ):
        assert (filt / name).exists(), name
    kept = [
        json.loads(line)
        for line in (filt / "kept_abstractions.jsonl").read_text("utf-8").splitlines()
    ]
    assert kept
    assert all(rec["leak_status"] == "passed" for rec in kept)


def test_pipeline_partition_tags_every_problem(pipeline):
    recs = [
        json.loads(line)
        for line in (pipeline["part"] / "partitioned_problems.jsonl")
        .read_text("utf-8")
        .splitlines()
    ]
    assert recs
    assert all(rec["split_tag"] in ("easy", "medium", "hard") for rec in recs)
    assert len({rec["split_tag"] for rec in recs}) >= 2


def test_pipeline_eval_outputs(pipeline):
    ev = pipeline["eval"]
    for name in ("cells.jsonl", "rollouts.jsonl", "abstractions_used.jsonl"):
        assert (ev / name).exists(), name
    summary = json.loads((ev / "summary.json").read_text("utf-8"))
    assert {"wo_abs_avg", "w_abs_avg", "w_abs_best", "n_problems"} <= set(summary)
    assert 0.0 <= summary["wo_abs_avg"] <= 1.0
    assert summary["w_abs_best"] >= summary["w_abs_avg"] - 1e-12


def test_pipeline_run_joint_outputs(pipeline):
    joint = pipeline["joint"]
    assert (joint / "epoch_001" / "manifest.json").exists()
    assert (joint / "checkpoint.json").exists()
    run_summary = json.loads((joint / "run_summary.json").read_text("utf-8"))
    assert [stats["epoch"] for stats in run_summary] == [1]
    assert "mean_abstraction_reward" in run_summary[0]


def test_analyze_compute_skips_infeasible_points(pipeline, capsys):
    out = pipeline["compute"]
    rc = main(
        [
            "analyze-compute",
            "--out-dir",
            str(out),
            "--cells",
            str(pipeline["eval"] / "cells.jsonl"),
            "--budget",
            "8",
            "--k0",
            "0",
        ]
    )
    assert rc == 0
    rows = (out / "frontier.csv").read_text("utf-8").strip().splitlines()
    ms = [int(row.split(",")[2]) for row in rows[1:]]
    assert ms and max(ms) <= 2
    assert (out / "frontier.svg").exists()


def test_analyze_compute_strict_errors_on_infeasible(pipeline, tmp_path, capsys):
    rc = main(
        [
            "analyze-compute",
            "--out-dir",
            str(tmp_path / "strict"),
            "--cells",
            str(pipeline["eval"] / "cells.jsonl"),
            "--budget",
            "8",
            "--k0",
            "0",
            "--strict",
        ]
    )
    assert rc == 1


def test_analyze_adherence_outputs(pipeline):
    out = pipeline["adhere"]
    rc = main(
        [
            "analyze-adherence",
            "--out-dir",
            str(out),
            "--abstractions",
            str(pipeline["filt"] / "kept_abstractions.jsonl"),
            "--rollouts",
            str(pipeline["eval"] / "rollouts.jsonl"),
            "--max-pairs",
            "50",
        ]
    )
    assert rc == 0
    adherence = json.loads((out / "adherence.json").read_text("utf-8"))
    assert "abstraction" in adherence["rates"]
    assert all(0.0 <= v <= 1.0 for v in adherence["rates"].values())
    assert adherence["n_pairs"]["abstraction"] >= 1
    diversity = json.loads((out / "diversity.json").read_text("utf-8"))
    assert all(-1.0 <= v <= 1.0 for v in diversity.values())


def test_classify_outputs_histogram(pipeline):
    out = pipeline["classify"]
    rc = main(
        [
            "classify",
            "--out-dir",
            str(out),
            "--abstractions",
            str(pipeline["filt"] / "kept_abstractions.jsonl"),
        ]
    )
    assert rc == 0
    data = json.loads((out / "classifications.json").read_text("utf-8"))
    assert set(data["histogram"]) == {
        "caution_alert",
        "productive_launchpoint",
        "blind_follow",
        "structural_shortcut",
        "other",
    }
    assert sum(data["histogram"].values()) == len(data["categories"])


def test_report_renders_summary(pipeline, capsys):
    out = pipeline["report"]
    rc = main(
        [
            "report",
            "--out-dir",
            str(out),
            "--summary",
            str(pipeline["eval"] / "summary.json"),
        ]
    )
    assert rc == 0
    report = json.loads((out / "report.json").read_text("utf-8"))
    assert {"wo_abs_avg", "w_abs_avg", "w_abs_best"} <= set(report["conditions"])
    table = (out / "report.txt").read_text("utf-8")
    assert "w_abs (best)" in table


def test_eval_rerun_is_byte_identical(tmp_path):
    def run(out):
        rc = main(
            [
                "eval",
                "--out-dir",
                str(out),
                "--seed",
                "11",
                "--n-samples",
                "4",
                "--n-abstractions",
                "2",
            ]
        )
        assert rc == 0

    run(tmp_path / "a")
    run(tmp_path / "b")
    for name in ("summary.json", "cells.jsonl", "manifest_eval.json"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_train_abs_and_train_sol_emit_batches(tmp_path):
    abs_out = tmp_path / "abs"
    rc = main(
        [
            "train-abs",
            "--out-dir",
            str(abs_out),
            "--seed",
            "3",
            "--n-abstractions",
            "3",
        ]
    )
    assert rc == 0
    assert (abs_out / "abs_sft.jsonl").exists()
    assert (abs_out / "manifest_train_abs.json").exists()

    sol_out = tmp_path / "sol"
    rc = main(["train-sol", "--out-dir", str(sol_out), "--seed", "3"])
    assert rc == 0
    groups = [
        json.loads(line)
        for line in (sol_out / "sol_groups.jsonl").read_text("utf-8").splitlines()
    ]
    assert groups
    kinds = {g["group_kind"] for g in groups}
    assert kinds <= {"with_abs", "no_abs"}
    for g in groups:
        if g["group_kind"] == "no_abs":
            assert all(a == 0 for a in g["advantages"])
