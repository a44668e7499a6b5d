"""Command-line pipeline driver.

Subcommands cover the full loop: warmstart data generation (gen-abstractions,
filter), curriculum partitioning, training (train-abs, train-sol, run-joint),
evaluation and reporting (eval, report), and analyses (analyze-compute,
analyze-adherence, classify). Every command resolves one configuration tree
(defaults < --config file < flags), writes its outputs under --out-dir, and
drops a RunManifest next to them. Exit codes: 0 success, 1 domain error, 2
usage error. Diagnostics go to stderr; stdout carries only data (reports,
dry-run plans).
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import analysis, datagen, fixtures, metrics, trainer
from .backends.base import BackendError, PromptParts, SamplingParams, replace_params
from .backends.sim import (
    HashingEmbedder,
    SimAbstractionPolicy,
    SimEnv,
    SimJudge,
    SimSolutionPolicy,
    SimSummarizer,
)
from .config import RunConfig, apply_overrides, load_config
from .core import (
    NO_ABSTRACTION,
    Abstraction,
    DataError,
    Problem,
    RolloutRecord,
    RunManifest,
    derive_seed,
    load_abstractions,
    load_problems,
    load_rollouts,
    manifest_timestamp,
    stamp_file,
    write_abstractions,
    write_jsonl,
    write_manifest,
    write_problems,
    write_rollouts,
)
from .datagen import SummarizationJob, UpliftReport, build_sft_corpus, generate_candidates, measure_uplift
from .rewards import MixRatio
from .trainer import (
    CurriculumConfig,
    CurriculumStage,
    RftConfig,
    TrainState,
    rft_epoch_abs,
    emit_sol_batches,
    partition_by_success,
    rollout_group,
    run_joint,
)
from .verifier import LeakCheckError, leak_check

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad invocation (missing files, inconsistent flags); exits 2."""


# ---------------------------------------------------------------------------
# Backend bundle
# ---------------------------------------------------------------------------


@dataclass
class BackendBundle:
    kind: str
    sol_policy: Any
    abs_policy: Any
    judge: Any
    embedder: Any
    summarizer: Any
    env: SimEnv | None
    deterministic: bool


def _prompt_asset(name: str) -> str:
    return resources.files("absrl.prompts").joinpath(name).read_text(encoding="utf-8")


def build_bundle(cfg: RunConfig) -> BackendBundle:
    if cfg.backend.kind == "sim":
        if cfg.backend.sim_world:
            env = SimEnv.load(cfg.backend.sim_world)
        else:
            env = fixtures.fixture_world(default_boost=cfg.backend.default_boost)
        return BackendBundle(
            kind="sim",
            sol_policy=SimSolutionPolicy(env),
            abs_policy=SimAbstractionPolicy(env),
            judge=SimJudge(),
            embedder=HashingEmbedder(),
            summarizer=SimSummarizer(),
            env=env,
            deterministic=True,
        )
    from .backends.http import (
        HttpClient,
        HttpEmbedder,
        HttpJudge,
        HttpPolicyBackend,
        HttpSummarizer,
    )

    client = HttpClient(
        base_url=cfg.backend.base_url,
        model=cfg.backend.model,
        api_key_env=cfg.backend.api_key_env,
        request_cap=cfg.backend.request_cap,
        max_retries=cfg.backend.max_retries,
        timeout=cfg.backend.timeout,
    )
    return BackendBundle(
        kind="http",
        sol_policy=HttpPolicyBackend(client),
        abs_policy=HttpPolicyBackend(
            client, system_prompt=_prompt_asset("abstraction_generator.txt")
        ),
        judge=HttpJudge(client),
        embedder=HttpEmbedder(client),
        summarizer=HttpSummarizer(client, _prompt_asset("summarizer.txt")),
        env=None,
        deterministic=False,
    )


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    cfg: RunConfig
    out_dir: Path
    master_seed: int
    deterministic: bool
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)
    parent_manifest_hash: str | None = None

    def add_input(self, path: str | Path) -> None:
        self.inputs.append(Path(path))

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(Path(path))

    def manifest_path(self) -> Path:
        return self.out_dir / f"manifest_{self.name}.json"

    def write(self, status: str = "complete") -> str:
        stamp = manifest_timestamp(self.deterministic)
        details = dict(self.details)
        details["status"] = status
        manifest = RunManifest(
            stage=self.name,
            config_hash=self.cfg.config_hash(),
            master_seed=self.master_seed,
            inputs=[stamp_file(p, base_dir=self.out_dir) for p in self.inputs],
            outputs=[
                stamp_file(p, base_dir=self.out_dir) for p in self.outputs if p.exists()
            ],
            started=stamp,
            finished=stamp,
            parent_manifest_hash=self.parent_manifest_hash,
            details=details,
        )
        return write_manifest(manifest, self.manifest_path())

    def plan(self, planned_outputs: Sequence[str]) -> dict[str, Any]:
        return {
            "stage": self.name,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "master_seed": self.master_seed,
            "inputs": [str(p) for p in self.inputs],
            "planned_outputs": list(planned_outputs),
            "manifest_path": str(self.manifest_path()),
        }


def _parallel_map(fn: Callable[[Any], Any], items: Sequence[Any], jobs: int) -> list[Any]:
    """Order-preserving map, optionally threaded; results never depend on scheduling."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Shared argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    all_option_strings: set[str] = set()

    def error(self, message: str) -> None:  # type: ignore[override]
        if "unrecognized arguments:" in message:
            bad = message.split("unrecognized arguments:", 1)[1].strip().split()
            flags = [tok for tok in bad if tok.startswith("-")]
            hints = []
            for flag in flags:
                close = difflib.get_close_matches(
                    flag, sorted(_Parser.all_option_strings), n=1
                )
                if close:
                    hints.append(f"did you mean {close[0]!r} instead of {flag!r}?")
            if hints:
                message = message + "\n" + "\n".join(hints)
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _register_options(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:  # noqa: SLF001 - argparse has no public accessor
        _Parser.all_option_strings.update(action.option_strings)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="absrl",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker-pool size")
    common.add_argument(
        "--backend", choices=["sim", "http"], help="override config backend kind"
    )
    common.add_argument("--out-dir", required=True, help="output directory")
    common.add_argument(
        "--sim-world", help="simulated world JSON (default: bundled 20-problem fixture)"
    )
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="print resolved config and planned manifest; no side effects",
    )
    common.add_argument("-v", "--verbose", action="count", default=0)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-abstractions",
        parents=[common],
        help="sample traces and summarize them into candidate abstractions",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument("--n-traces", type=int, help="traces per problem to summarize")
    p.add_argument(
        "--n-abstractions", type=int, help="candidate abstractions per problem"
    )
    p.set_defaults(handler=cmd_gen_abstractions)

    p = sub.add_parser(
        "filter",
        parents=[common],
        help="leak-check and uplift-filter candidate abstractions; build SFT corpus",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument("--abstractions", required=True, help="candidate abstractions JSONL")
    p.add_argument("--leak-samples", type=int, help="samples per leak check")
    p.add_argument("--uplift-samples", type=int, help="rollouts per uplift arm")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser(
        "partition",
        parents=[common],
        help="tag problems easy/medium/hard by unconditioned success rate",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument("--partition-samples", type=int, help="rollouts per problem")
    p.set_defaults(handler=cmd_partition)

    p = sub.add_parser(
        "eval",
        parents=[common],
        help="run the no-abstraction / with-abstraction evaluation protocol",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument(
        "--abstractions",
        help="abstractions JSONL; omitted means sample from the abstraction policy",
    )
    p.add_argument("--n-samples", type=int, help="solutions per cell")
    p.add_argument("--n-abstractions", type=int, help="abstractions per problem")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser(
        "train-abs",
        parents=[common],
        help="one rejection fine-tuning round for the abstraction policy",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument("--n-abstractions", type=int, help="abstractions sampled per problem")
    p.set_defaults(handler=cmd_train_abs)

    p = sub.add_parser(
        "train-sol",
        parents=[common],
        help="emit one mixed batch of scored prompt groups for the solution policy",
    )
    p.add_argument("--problems", help="problems JSONL (default: bundled sim fixture)")
    p.add_argument("--mix-ratio", type=float, help="no-abstraction group fraction")
    p.set_defaults(handler=cmd_train_sol)

    p = sub.add_parser(
        "run-joint",
        parents=[common],
        help="alternate abstraction and solution training for E epochs",
    )
    p.add_argument("--problems", help="partitioned problems JSONL")
    p.add_argument("--epochs", type=int, help="joint epochs")
    p.add_argument("--mix-ratio", type=float, help="no-abstraction group fraction")
    p.add_argument("--resume", help="checkpoint.json from an interrupted run")
    p.set_defaults(handler=cmd_run_joint)

    p = sub.add_parser(
        "analyze-compute",
        parents=[common],
        help="iso-compute frontier over abstraction count vs samples per abstraction",
    )
    p.add_argument("--cells", required=True, help="eval cells JSONL")
    p.add_argument(
        "--budget", type=int, action="append", help="sampling budget C (repeatable)"
    )
    p.add_argument("--k0", help="comma-separated free-sample offsets, e.g. 0,2,4,6,8")
    p.add_argument(
        "--strict",
        action="store_true",
        help="error on grid points the cells cannot support instead of skipping",
    )
    p.set_defaults(handler=cmd_analyze_compute)

    p = sub.add_parser(
        "analyze-adherence",
        parents=[common],
        help="judge adherence across pairing conditions; embed solution diversity",
    )
    p.add_argument("--abstractions", required=True, help="abstractions JSONL")
    p.add_argument("--rollouts", required=True, help="rollouts JSONL from eval")
    p.add_argument("--max-pairs", type=int, help="cap on judged pairs per condition")
    p.set_defaults(handler=cmd_analyze_adherence)

    p = sub.add_parser(
        "classify",
        parents=[common],
        help="classify abstractions into behavioral categories",
    )
    p.add_argument("--abstractions", required=True, help="abstractions JSONL")
    p.set_defaults(handler=cmd_classify)

    p = sub.add_parser(
        "report",
        parents=[common],
        help="render an eval summary as JSON plus an aligned text table",
    )
    p.add_argument("--summary", required=True, help="summary.json from eval")
    p.set_defaults(handler=cmd_report)

    _register_options(parser)
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        for sub_parser in action.choices.values():
            _register_options(sub_parser)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = RunConfig()
    overrides: dict[str, Any] = {
        "backend.kind": getattr(args, "backend", None),
        "backend.sim_world": getattr(args, "sim_world", None),
        "datagen.n_traces": getattr(args, "n_traces", None),
        "datagen.leak_samples": getattr(args, "leak_samples", None),
        "datagen.uplift_samples": getattr(args, "uplift_samples", None),
        "curriculum.partition_samples": getattr(args, "partition_samples", None),
        "eval.n_samples": getattr(args, "n_samples", None),
        "train.epochs": getattr(args, "epochs", None),
        "rewards.mix_ratio": getattr(args, "mix_ratio", None),
        "analysis.adherence_max_pairs": getattr(args, "max_pairs", None),
    }
    n_abs = getattr(args, "n_abstractions", None)
    if n_abs is not None:
        overrides["datagen.n_candidates"] = n_abs
        overrides["eval.n_abstractions"] = n_abs
        overrides["train.n_abstractions_per_problem"] = n_abs
    return apply_overrides(cfg, overrides)


def _resolve_problems(
    args: argparse.Namespace, cfg: RunConfig, stage: Stage
) -> tuple[list[Problem], Path]:
    """Load --problems, or materialize the bundled fixture for sim runs."""
    path_arg = getattr(args, "problems", None)
    if path_arg:
        path = Path(path_arg)
        if not path.exists():
            raise UsageError(f"problems file not found: {path}")
        return load_problems(path), path
    if cfg.backend.kind != "sim":
        raise UsageError("--problems is required with the http backend")
    path = stage.out_dir / "fixture_problems.jsonl"
    if cfg.backend.sim_world:
        problems = SimEnv.load(cfg.backend.sim_world).problems_list()
    else:
        problems = fixtures.fixture_problems()
    if not getattr(args, "dry_run", False):
        write_problems(problems, path)
    return problems, path


def _sampling(cfg: RunConfig, train: bool, seed: int = 0) -> SamplingParams:
    return SamplingParams(
        temperature=cfg.sampling.temperature,
        max_tokens=cfg.sampling.max_tokens,
        n_samples=cfg.sampling.train_samples if train else cfg.sampling.val_samples,
        seed=seed,
    )


def _rft_config(cfg: RunConfig) -> RftConfig:
    t = cfg.train
    return RftConfig(
        tau=t.tau,
        max_kept_per_problem=t.max_kept_per_problem,
        n_abstractions_per_problem=t.n_abstractions_per_problem,
        reward_rollouts=t.reward_rollouts,
        abs_batch_size=t.abs_batch_size,
        sol_batch_size=t.sol_batch_size,
        group_size=t.group_size,
        lr_abs=t.lr_abs,
        lr_sol=t.lr_sol,
    )


def _curriculum_config(cfg: RunConfig) -> CurriculumConfig:
    c = cfg.curriculum
    return CurriculumConfig(
        easy_min=c.easy_min,
        hard_max=c.hard_max,
        stages=tuple(CurriculumStage(split, budget) for split, budget in c.stages),
    )


def _train_state(stage: Stage, bundle: BackendBundle, cfg: RunConfig) -> TrainState:
    return TrainState(
        out_dir=stage.out_dir,
        master_seed=stage.master_seed,
        abs_policy=bundle.abs_policy,
        sol_policy=bundle.sol_policy,
        config_hash=cfg.config_hash(),
        env=bundle.env,
        deterministic_time=bundle.deterministic,
    )


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def cmd_gen_abstractions(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    out_path = stage.out_dir / "abstractions.jsonl"
    if args.dry_run:
        print(json.dumps(stage.plan([str(out_path)]), indent=2, sort_keys=True))
        return 0
    params = _sampling(cfg, train=True)

    def one(problem: Problem) -> list[Abstraction]:
        seed = derive_seed(stage.master_seed, f"gen/traces/{problem.id}", 0)
        completions = bundle.sol_policy.sample(
            PromptParts(problem=problem.prompt, problem_id=problem.id),
            replace_params(params, n_samples=cfg.datagen.n_traces, seed=seed),
        )
        job = SummarizationJob(
            problem=problem,
            traces=tuple(c.text for c in completions),
            n_candidates=cfg.datagen.n_candidates,
        )
        return generate_candidates(job, bundle.summarizer, seed=stage.master_seed)

    batches = _parallel_map(one, problems, args.jobs)
    abstractions = [a for batch in batches for a in batch]
    write_abstractions(abstractions, out_path)
    stage.add_output(out_path)
    stage.details.update(
        {"n_problems": len(problems), "n_candidates": len(abstractions)}
    )
    stage.write()
    logger.info("wrote %d candidates to %s", len(abstractions), out_path)
    return 0


def cmd_filter(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    abs_path = Path(args.abstractions)
    if not abs_path.exists():
        raise UsageError(f"abstractions file not found: {abs_path}")
    stage.add_input(problems_path)
    stage.add_input(abs_path)
    checked_path = stage.out_dir / "abstractions_checked.jsonl"
    kept_path = stage.out_dir / "kept_abstractions.jsonl"
    reports_path = stage.out_dir / "uplift_reports.jsonl"
    sft_path = stage.out_dir / "sft_corpus.jsonl"
    if args.dry_run:
        print(
            json.dumps(
                stage.plan(
                    [str(checked_path), str(kept_path), str(reports_path), str(sft_path)]
                ),
                indent=2,
                sort_keys=True,
            )
        )
        return 0
    candidates = load_abstractions(abs_path)
    by_id = {p.id: p for p in problems}
    unknown = [a.id for a in candidates if a.problem_id not in by_id]
    if unknown:
        raise DataError(
            f"abstractions reference problems missing from {problems_path}: {unknown[:3]}"
        )
    params = _sampling(cfg, train=True)
    n_uplift = cfg.datagen.resolved_uplift_samples(cfg.backend.kind)

    def one(candidate: Abstraction) -> tuple[Abstraction, UpliftReport | None]:
        problem = by_id[candidate.problem_id]
        if bundle.env is not None:
            bundle.env.note_abstraction(candidate.id, candidate.text)
        result = leak_check(
            candidate,
            problem,
            bundle.sol_policy,
            params,
            n=cfg.datagen.leak_samples,
            master_seed=stage.master_seed,
        )
        if result.status == "failed":
            import dataclasses as _dc

            return _dc.replace(candidate, leak_status="failed"), None
        report = measure_uplift(
            problem,
            candidate,
            bundle.sol_policy,
            params,
            n=n_uplift,
            master_seed=stage.master_seed,
        )
        import dataclasses as _dc

        return _dc.replace(candidate, leak_status="passed", uplift=report.uplift), report

    results = _parallel_map(one, candidates, args.jobs)
    checked = [c for c, _ in results]
    reports = [r for _, r in results if r is not None]
    kept_pairs = [
        (c, r)
        for c, r in results
        if r is not None and r.decision == "keep" and c.leak_status == "passed"
    ]
    write_abstractions(checked, checked_path)
    write_abstractions([c for c, _ in kept_pairs], kept_path)
    write_jsonl((r.to_record() for r in reports), reports_path)
    n_sft = build_sft_corpus(problems, kept_pairs, sft_path)
    for path in (checked_path, kept_path, reports_path, sft_path):
        stage.add_output(path)
    n_failed = sum(1 for c in checked if c.leak_status == "failed")
    stage.details.update(
        {
            "n_candidates": len(candidates),
            "leak_checked": len(candidates),
            "leak_samples": cfg.datagen.leak_samples,
            "leak_failed": n_failed,
            "leak_passed": len(candidates) - n_failed,
            "uplift_samples": n_uplift,
            "n_kept": len(kept_pairs),
            "n_sft_records": n_sft,
        }
    )
    stage.write()
    logger.info(
        "filter: %d candidates, %d leak-failed, %d kept",
        len(candidates),
        n_failed,
        len(kept_pairs),
    )
    return 0


def cmd_partition(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    out_path = stage.out_dir / "partitioned_problems.jsonl"
    if args.dry_run:
        print(json.dumps(stage.plan([str(out_path)]), indent=2, sort_keys=True))
        return 0
    # Restartable: tags already present in an earlier (partial) output survive.
    if out_path.exists():
        prior = {p.id: p for p in load_problems(out_path)}
        problems = [prior.get(p.id, p) for p in problems]
    curriculum = _curriculum_config(cfg)
    params = _sampling(cfg, train=True)
    tagged: list[Problem] = []
    try:
        chunks = _parallel_map(
            lambda p: partition_by_success(
                [p],
                bundle.sol_policy,
                params,
                cfg.curriculum.partition_samples,
                curriculum,
                stage.master_seed,
            )[0],
            problems,
            args.jobs,
        )
        tagged = list(chunks)
    except (BackendError, LeakCheckError):
        # Preserve whatever finished so a rerun can resume from it.
        if tagged:
            write_problems(tagged, out_path)
            stage.add_output(out_path)
            stage.write(status="partial")
        raise
    write_problems(tagged, out_path)
    stage.add_output(out_path)
    counts = {tag: sum(1 for p in tagged if p.split_tag == tag) for tag in ("easy", "medium", "hard")}
    stage.details.update(
        {"n_problems": len(tagged), "split_counts": counts,
         "partition_samples": cfg.curriculum.partition_samples}
    )
    stage.write()
    logger.info("partition: %s", counts)
    return 0


def _eval_abstractions_for(
    problems: Sequence[Problem],
    cfg: RunConfig,
    stage: Stage,
    bundle: BackendBundle,
    abstractions_path: str | None,
    params: SamplingParams,
) -> dict[str, list[Abstraction]]:
    per_problem: dict[str, list[Abstraction]] = {p.id: [] for p in problems}
    if abstractions_path:
        path = Path(abstractions_path)
        if not path.exists():
            raise UsageError(f"abstractions file not found: {path}")
        stage.add_input(path)
        for abstraction in load_abstractions(path):
            bucket = per_problem.get(abstraction.problem_id)
            if bucket is not None and len(bucket) < cfg.eval.n_abstractions:
                bucket.append(abstraction)
        return per_problem
    for problem in problems:
        seed = derive_seed(stage.master_seed, f"eval/abs/{problem.id}", 0)
        completions = bundle.abs_policy.sample(
            PromptParts(problem=problem.prompt, problem_id=problem.id),
            replace_params(params, n_samples=cfg.eval.n_abstractions, seed=seed),
        )
        unique = list(dict.fromkeys(c.text for c in completions))
        per_problem[problem.id] = [
            Abstraction.create(problem_id=problem.id, text=t, source="generator_model")
            for t in unique
        ]
    return per_problem


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    cells_path = stage.out_dir / "cells.jsonl"
    rollouts_path = stage.out_dir / "rollouts.jsonl"
    used_path = stage.out_dir / "abstractions_used.jsonl"
    summary_path = stage.out_dir / "summary.json"
    if args.dry_run:
        print(
            json.dumps(
                stage.plan(
                    [str(cells_path), str(rollouts_path), str(used_path), str(summary_path)]
                ),
                indent=2,
                sort_keys=True,
            )
        )
        return 0
    params = _sampling(cfg, train=False)
    per_problem = _eval_abstractions_for(
        problems, cfg, stage, bundle, args.abstractions, params
    )
    skipped = [pid for pid, bucket in per_problem.items() if not bucket]
    evald = [p for p in problems if per_problem[p.id]]
    if not evald:
        raise DataError("no problem has any abstraction to evaluate")

    def one(problem: Problem) -> tuple[list[metrics.EvalCell], list[RolloutRecord]]:
        cells: list[metrics.EvalCell] = []
        rollouts: list[RolloutRecord] = []
        seed = derive_seed(stage.master_seed, f"eval/no_abs/{problem.id}", 0)
        _, records = rollout_group(
            problem, None, bundle.sol_policy, params, cfg.eval.n_samples, seed
        )
        rollouts.extend(records)
        cells.append(
            metrics.EvalCell(
                problem_id=problem.id,
                condition="no_abs",
                abstraction_id=NO_ABSTRACTION,
                n=len(records),
                c=sum(1 for r in records if r.correct),
            )
        )
        for abstraction in per_problem[problem.id]:
            if bundle.env is not None:
                bundle.env.note_abstraction(abstraction.id, abstraction.text)
            seed = derive_seed(
                stage.master_seed, f"eval/per_abs/{problem.id}/{abstraction.id}", 0
            )
            _, records = rollout_group(
                problem, abstraction, bundle.sol_policy, params, cfg.eval.n_samples, seed
            )
            rollouts.extend(records)
            cells.append(
                metrics.EvalCell(
                    problem_id=problem.id,
                    condition="per_abs",
                    abstraction_id=abstraction.id,
                    n=len(records),
                    c=sum(1 for r in records if r.correct),
                )
            )
        return cells, rollouts

    results = _parallel_map(one, evald, args.jobs)
    all_cells = [c for cells, _ in results for c in cells]
    all_rollouts = [r for _, rollouts in results for r in rollouts]
    summary = metrics.summarize_conditions(all_cells)
    metrics.write_cells(all_cells, cells_path)
    write_rollouts(all_rollouts, rollouts_path)
    write_abstractions(
        [a for p in evald for a in per_problem[p.id]], used_path
    )
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for path in (cells_path, rollouts_path, used_path, summary_path):
        stage.add_output(path)
    stage.details.update(
        {
            "n_problems": len(evald),
            "n_skipped_no_abstractions": len(skipped),
            "n_samples_per_cell": cfg.eval.n_samples,
            "summary": summary,
        }
    )
    stage.write()
    if skipped:
        logger.warning(
            "eval skipped %d problems with no abstractions", len(skipped)
        )
    print(metrics.render_conditions_table(summary))
    return 0


def cmd_train_abs(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    out_path = stage.out_dir / "abs_sft.jsonl"
    if args.dry_run:
        print(json.dumps(stage.plan([str(out_path)]), indent=2, sort_keys=True))
        return 0
    state = _train_state(stage, bundle, cfg)
    state.epoch = 1
    rft_cfg = _rft_config(cfg)
    batch = problems[: rft_cfg.abs_batch_size]
    result = rft_epoch_abs(batch, state, rft_cfg, _sampling(cfg, train=True))
    write_jsonl(result.sft_records, out_path)
    stage.add_output(out_path)
    stage.details.update(
        {
            "mean_abstraction_reward": result.mean_reward,
            "n_sampled": result.n_sampled,
            "n_kept": result.n_kept,
            "tau": rft_cfg.tau,
        }
    )
    stage.write()
    return 0


def cmd_train_sol(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    out_path = stage.out_dir / "sol_groups.jsonl"
    if args.dry_run:
        print(json.dumps(stage.plan([str(out_path)]), indent=2, sort_keys=True))
        return 0
    state = _train_state(stage, bundle, cfg)
    state.epoch = 1
    rft_cfg = _rft_config(cfg)
    mix = MixRatio(cfg.rewards.mix_ratio)
    batch = problems[: rft_cfg.sol_batch_size]
    result = emit_sol_batches(batch, state, rft_cfg, _sampling(cfg, train=True), mix)
    write_jsonl(result.shard_records, out_path)
    stage.add_output(out_path)
    stage.details.update(
        {
            "n_groups": len(result.groups),
            "mix_ratio": mix.value,
            "mean_with_abs_reward": result.mean_with_abs_reward,
            "external_trainer": trainer.EXTERNAL_TRAINER_DEFAULTS,
        }
    )
    stage.write()
    return 0


def cmd_run_joint(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    problems, problems_path = _resolve_problems(args, cfg, stage)
    stage.add_input(problems_path)
    summary_path = stage.out_dir / "run_summary.json"
    if args.dry_run:
        print(json.dumps(stage.plan([str(summary_path)]), indent=2, sort_keys=True))
        return 0
    state = _train_state(stage, bundle, cfg)
    stats = run_joint(
        problems,
        state,
        _rft_config(cfg),
        _curriculum_config(cfg),
        _sampling(cfg, train=True),
        epochs=cfg.train.epochs,
        mix=MixRatio(cfg.rewards.mix_ratio),
        resume_from=args.resume,
    )
    summary_path.write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    stage.add_output(summary_path)
    stage.parent_manifest_hash = state.parent_manifest_hash
    stage.details.update({"epochs": cfg.train.epochs, "epoch_stats": stats})
    stage.write()
    return 0


def cmd_analyze_compute(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    cells_path = Path(args.cells)
    if not cells_path.exists():
        raise UsageError(f"cells file not found: {cells_path}")
    stage.add_input(cells_path)
    csv_path = stage.out_dir / "frontier.csv"
    svg_path = stage.out_dir / "frontier.svg"
    if args.dry_run:
        print(
            json.dumps(
                stage.plan([str(csv_path), str(svg_path)]), indent=2, sort_keys=True
            )
        )
        return 0
    cells = metrics.load_cells(cells_path)
    budgets = args.budget or cfg.analysis.budgets
    if args.k0 is not None:
        k0_list = [int(tok) for tok in args.k0.split(",") if tok.strip()]
    else:
        k0_list = cfg.analysis.k0_list
    abs_per_problem: dict[str, int] = {}
    min_n: dict[str, int] = {}
    for cell in cells:
        if cell.condition == "per_abs":
            abs_per_problem[cell.problem_id] = abs_per_problem.get(cell.problem_id, 0) + 1
            min_n[cell.problem_id] = min(min_n.get(cell.problem_id, cell.n), cell.n)
    if not abs_per_problem:
        raise DataError("cells contain no per-abstraction entries")
    max_m = min(abs_per_problem.values())
    max_k = min(min_n.values())
    curves: dict[str, list[analysis.FrontierValue]] = {}
    all_values: list[analysis.FrontierValue] = []
    skipped: list[str] = []
    for budget in budgets:
        for k0 in k0_list:
            grid = analysis.iso_compute_grid(budget, k0)
            feasible = [p for p in grid if p.m <= max_m and p.k <= max_k]
            infeasible = [p for p in grid if p not in feasible]
            if infeasible and args.strict:
                p = infeasible[0]
                raise DataError(
                    f"cells cannot support point m={p.m}, k={p.k} "
                    f"(have {max_m} abstractions, {max_k} samples per cell)"
                )
            skipped.extend(f"C={p.budget},k0={p.k0},m={p.m}" for p in infeasible)
            if not feasible:
                continue
            values = analysis.frontier_eval(feasible, cells, seed=stage.master_seed)
            curves[f"C={budget},k0={k0}"] = values
            all_values.extend(values)
    if not all_values:
        raise DataError("no feasible frontier points for these cells")
    analysis.write_frontier_csv(all_values, csv_path)
    analysis.write_frontier_svg(curves, svg_path)
    stage.add_output(csv_path)
    stage.add_output(svg_path)
    stage.details.update(
        {
            "budgets": budgets,
            "k0_list": k0_list,
            "n_points": len(all_values),
            "skipped_points": skipped,
        }
    )
    stage.write()
    if skipped:
        logger.warning("skipped %d infeasible grid points", len(skipped))
    return 0


def _build_adherence_pairs(
    abstractions: Sequence[Abstraction],
    rollouts: Sequence[RolloutRecord],
    embedder: Any,
    max_pairs: int,
) -> list[analysis.AdherencePair]:
    by_id = {a.id: a for a in abstractions}
    with_abs = [r for r in rollouts if r.abstraction_id in by_id]
    no_abs = [r for r in rollouts if r.abstraction_id == NO_ABSTRACTION]
    if not with_abs or not no_abs:
        raise DataError(
            "adherence analysis needs both with-abstraction and no-abstraction rollouts"
        )
    pairs: list[analysis.AdherencePair] = []
    for record in with_abs[:max_pairs]:
        pairs.append(
            analysis.AdherencePair(
                abstraction_text=by_id[record.abstraction_id].text,
                solution_text=record.solution_text,
                condition="abstraction",
            )
        )
    ordered_abs = sorted(by_id.values(), key=lambda a: a.id)
    for i, record in enumerate(no_abs[:max_pairs]):
        abstraction = ordered_abs[i % len(ordered_abs)]
        pairs.append(
            analysis.AdherencePair(
                abstraction_text=abstraction.text,
                solution_text=record.solution_text,
                condition="no_abstraction",
            )
        )
    retrieval_sources = [r.solution_text for r in no_abs[:max_pairs]]
    pairs.extend(
        analysis.build_retrieval_pairs(
            ordered_abs[:max_pairs], retrieval_sources, embedder
        )
    )
    # Unrelated condition: solutions paired against an abstraction from a
    # different problem (cyclic shift over problems guarantees mismatch when
    # more than one problem is present).
    problems_in_order = sorted({a.problem_id for a in ordered_abs})
    if len(problems_in_order) > 1:
        shift = {
            pid: problems_in_order[(i + 1) % len(problems_in_order)]
            for i, pid in enumerate(problems_in_order)
        }
        abs_by_problem: dict[str, list[Abstraction]] = {}
        for a in ordered_abs:
            abs_by_problem.setdefault(a.problem_id, []).append(a)
        count = 0
        for record in with_abs:
            if count >= max_pairs:
                break
            other = shift[by_id[record.abstraction_id].problem_id]
            candidates = abs_by_problem.get(other)
            if not candidates:
                continue
            pairs.append(
                analysis.AdherencePair(
                    abstraction_text=candidates[count % len(candidates)].text,
                    solution_text=record.solution_text,
                    condition="unrelated_abstraction",
                )
            )
            count += 1
    return pairs


def cmd_analyze_adherence(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    abs_path = Path(args.abstractions)
    roll_path = Path(args.rollouts)
    for path in (abs_path, roll_path):
        if not path.exists():
            raise UsageError(f"input file not found: {path}")
        stage.add_input(path)
    adherence_path = stage.out_dir / "adherence.json"
    diversity_path = stage.out_dir / "diversity.json"
    if args.dry_run:
        print(
            json.dumps(
                stage.plan([str(adherence_path), str(diversity_path)]),
                indent=2,
                sort_keys=True,
            )
        )
        return 0
    abstractions = load_abstractions(abs_path)
    rollouts = load_rollouts(roll_path)
    pairs = _build_adherence_pairs(
        abstractions, rollouts, bundle.embedder, cfg.analysis.adherence_max_pairs
    )
    rates = analysis.adherence_rates(pairs, bundle.judge)
    solution_pairs = _build_diversity_pairs(rollouts, cfg.analysis.adherence_max_pairs)
    diversity = (
        analysis.semantic_diversity(solution_pairs, bundle.embedder)
        if solution_pairs
        else {}
    )
    n_pairs = {c: sum(1 for p in pairs if p.condition == c) for c in analysis.ADHERENCE_CONDITIONS}
    adherence_path.write_text(
        json.dumps({"rates": rates, "n_pairs": n_pairs}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    diversity_path.write_text(
        json.dumps(diversity, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    stage.add_output(adherence_path)
    stage.add_output(diversity_path)
    stage.details.update({"rates": rates, "n_pairs": n_pairs, "diversity": diversity})
    stage.write()
    print(json.dumps({"adherence": rates, "diversity": diversity}, indent=2, sort_keys=True))
    return 0


def _build_diversity_pairs(
    rollouts: Sequence[RolloutRecord], max_pairs: int
) -> list[tuple[str, str, str]]:
    by_prompt: dict[tuple[str, str], list[str]] = {}
    for record in rollouts:
        if record.solution_text.strip():
            by_prompt.setdefault(
                (record.problem_id, record.abstraction_id), []
            ).append(record.solution_text)
    pairs: list[tuple[str, str, str]] = []
    by_problem: dict[str, list[tuple[str, list[str]]]] = {}
    for (pid, aid), texts in sorted(by_prompt.items()):
        by_problem.setdefault(pid, []).append((aid, texts))
        pairing = "no_abstraction" if aid == NO_ABSTRACTION else "same_abstraction"
        for i in range(0, len(texts) - 1, 2):
            if len(pairs) < 3 * max_pairs:
                pairs.append((texts[i], texts[i + 1], pairing))
    for pid, groups in sorted(by_problem.items()):
        with_groups = [(aid, texts) for aid, texts in groups if aid != NO_ABSTRACTION]
        for i in range(len(with_groups) - 1):
            a_texts = with_groups[i][1]
            b_texts = with_groups[i + 1][1]
            if a_texts and b_texts and len(pairs) < 4 * max_pairs:
                pairs.append((a_texts[0], b_texts[0], "different_abstractions"))
    return pairs


def cmd_classify(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    bundle = build_bundle(cfg)
    stage.deterministic = bundle.deterministic
    abs_path = Path(args.abstractions)
    if not abs_path.exists():
        raise UsageError(f"abstractions file not found: {abs_path}")
    stage.add_input(abs_path)
    out_path = stage.out_dir / "classifications.json"
    if args.dry_run:
        print(json.dumps(stage.plan([str(out_path)]), indent=2, sort_keys=True))
        return 0
    abstractions = load_abstractions(abs_path)
    result = analysis.classify_many(abstractions, bundle.judge)
    out_path.write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    stage.add_output(out_path)
    stage.details.update({"histogram": result["histogram"]})
    stage.write()
    print(json.dumps(result["histogram"], indent=2, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace, cfg: RunConfig, stage: Stage) -> int:
    summary_path = Path(args.summary)
    if not summary_path.exists():
        raise UsageError(f"summary file not found: {summary_path}")
    stage.add_input(summary_path)
    json_path = stage.out_dir / "report.json"
    txt_path = stage.out_dir / "report.txt"
    if args.dry_run:
        print(
            json.dumps(stage.plan([str(json_path), str(txt_path)]), indent=2, sort_keys=True)
        )
        return 0
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    for key in ("wo_abs_avg", "w_abs_avg", "w_abs_best"):
        if key not in summary:
            raise DataError(f"summary is missing {key!r}; not an eval summary?")
    table = metrics.render_conditions_table(summary)
    json_path.write_text(
        json.dumps({"conditions": summary}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    txt_path.write_text(table + "\n", encoding="utf-8")
    stage.add_output(json_path)
    stage.add_output(txt_path)
    stage.details.update({"conditions": summary})
    stage.write()
    print(table)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        out_dir = Path(args.out_dir)
        if not args.dry_run:
            out_dir.mkdir(parents=True, exist_ok=True)
        stage = Stage(
            name=args.command.replace("-", "_"),
            cfg=cfg,
            out_dir=out_dir,
            master_seed=args.seed,
            deterministic=cfg.backend.kind == "sim",
        )
        return args.handler(args, cfg, stage)
    except UsageError as exc:
        print(f"absrl: usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"absrl: usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, BackendError, LeakCheckError) as exc:
        print(f"absrl: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("absrl: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
