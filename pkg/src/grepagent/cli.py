"""Command-line entry point.

Subcommands: ingest, index, run, bench, analyze, classify,
inject-distractors, report. Exit codes: 0 success, 1 harness error,
2 usage error. Config precedence: flags > environment > config file >
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import agent as agent_mod
from . import bm25 as bm25_mod
from . import corpus as corpus_mod
from . import evaluation as eval_mod
from . import metrics as metrics_mod
from .clients import HttpChatClient, ScriptedClient
from .context import PolicyError, policy_from_level
from .intents import INTENTS, classify_intent, intent_histogram
from .toolkit import SandboxConfig, ToolProfile

ENV_PREFIX = "GREPAGENT_"


class UsageError(Exception):
    pass


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def _setting(flag_value, env_key: str, config: dict, config_key: str, default=None):
    if flag_value is not None:
        return flag_value
    env = os.environ.get(ENV_PREFIX + env_key)
    if env is not None:
        return env
    if config_key in config:
        return config[config_key]
    return default


def _add_corpus_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True, help="corpus directory or JSONL file")
    parser.add_argument(
        "--layout",
        choices=["tree", "jsonl", "auto"],
        default="auto",
        help="corpus layout (file -> jsonl, directory -> tree when auto)",
    )


def _add_out_arg(parser: argparse.ArgumentParser, default: str) -> None:
    parser.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grepagent",
        description="Terminal-tool corpus search agent harness and evaluation toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="JSON config file (lowest-precedence settings)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "ingest",
        help="ingest a corpus and print its statistics",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--stats-out", help="write stats as JSON to this file")

    p = sub.add_parser(
        "index",
        help="build and persist a BM25 index",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--index-out", required=True, help="index file to write")
    p.add_argument("--k1", type=float, default=bm25_mod.DEFAULT_K1, help="BM25 k1")
    p.add_argument("--b", type=float, default=bm25_mod.DEFAULT_B, help="BM25 b")

    p = sub.add_parser(
        "run",
        help="run one question against the corpus",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--question", required=True, help="the question to answer")
    p.add_argument("--task-id", default="task-0", help="id used for output files")
    p.add_argument("--policy", default="L3", help="context policy level L0..L4")
    p.add_argument(
        "--profile",
        default="open_bash",
        help="tool profile: open_bash, read_grep, or retrieval",
    )
    p.add_argument("--prompt-kind", choices=["qa", "ir"], default="qa", help="instruction template")
    p.add_argument("--corpus-label", default=None, help="corpus name used in the prompt")
    p.add_argument("--max-turns", type=int, default=300, help="turn budget")
    p.add_argument("--tool-budget", type=int, default=200, help="tool-call budget")
    p.add_argument("--scripted", help="playback file for a scripted client (offline runs)")
    p.add_argument("--model", default=None, help="hosted model name")
    p.add_argument("--endpoint", default=None, help="chat-completions endpoint base URL")
    p.add_argument("--api-key-env", default=None, help="env var holding the API key")
    p.add_argument("--reasoning-effort", choices=["low", "medium", "high"], default=None, help="model reasoning effort")
    p.add_argument("--blocked-dir", action="append", default=[], help="directory to deny access to")
    p.add_argument("--search-index", help="BM25 index file enabling the search tool")
    _add_out_arg(p, "out/run")

    p = sub.add_parser(
        "bench",
        help="run a task file and aggregate results",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--tasks", required=True, help="newline-delimited task records")
    p.add_argument("--policy", default="L3", help="context policy level L0..L4")
    p.add_argument("--profile", default="open_bash", help="tool profile preset")
    p.add_argument("--prompt-kind", choices=["qa", "ir"], default=None, help="override task mode")
    p.add_argument("--corpus-label", default=None, help="corpus name used in the prompt")
    p.add_argument("--max-turns", type=int, default=300, help="turn budget")
    p.add_argument("--tool-budget", type=int, default=200, help="tool-call budget")
    p.add_argument("--parallelism", type=int, default=1, help="concurrent sessions")
    p.add_argument("--scripted-dir", help="directory of <task_id>.jsonl playback files")
    p.add_argument("--judge-scripted", help="playback file for a scripted judge")
    p.add_argument("--model", default=None, help="hosted model name")
    p.add_argument("--endpoint", default=None, help="chat-completions endpoint base URL")
    p.add_argument("--api-key-env", default=None, help="env var holding the API key")
    p.add_argument("--judge-model", default=None, help="hosted judge model name")
    p.add_argument("--reasoning-effort", choices=["low", "medium", "high"], default=None, help="model reasoning effort")
    p.add_argument("--price-table", help="JSON file: model -> {input, output} $/token")
    p.add_argument("--blocked-dir", action="append", default=[], help="directory to deny access to")
    p.add_argument("--search-index", help="BM25 index file enabling the search tool")
    p.add_argument("--sample", type=int, default=None, help="evaluate a random task subset")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--no-resume", action="store_true", help="re-run already-recorded tasks")
    p.add_argument("--c-seg", type=int, default=metrics_mod.DEFAULT_SEGMENT_CHARS, help="segment width in chars")
    _add_out_arg(p, "out/bench")

    p = sub.add_parser(
        "analyze",
        help="score recorded trajectories against gold sets",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--trajectories", nargs="+", required=True, help="trajectory JSONL files")
    p.add_argument("--tasks", required=True, help="task file providing gold docs")
    p.add_argument(
        "--c-seg",
        type=int,
        default=metrics_mod.DEFAULT_SEGMENT_CHARS,
        help="segment width in chars",
    )
    p.add_argument(
        "--read-overlap-threshold",
        type=float,
        default=metrics_mod.DEFAULT_READ_OVERLAP_THRESHOLD,
        help="fraction of an evidence span a read must cover",
    )
    p.add_argument("--intent-histogram", action="store_true", help="also print bash intents")
    _add_out_arg(p, "out/analyze")

    p = sub.add_parser(
        "classify",
        help="classify bash commands into intents",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--commands", required=True, help="file with one command per line")
    p.add_argument("--histogram", action="store_true", help="print fractions instead of labels")

    p = sub.add_parser(
        "inject-distractors",
        help="pad a corpus with distractor documents",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_corpus_args(p)
    p.add_argument("--distractors", required=True, help="distractor directory or JSONL file")
    p.add_argument(
        "--distractor-layout",
        choices=["tree", "jsonl", "auto"],
        default="auto",
        help="distractor source layout",
    )
    p.add_argument("--target-count", type=int, required=True, help="total docs after injection")
    _add_out_arg(p, "out/injected-corpus")

    p = sub.add_parser(
        "report",
        help="re-aggregate persisted benchmark records",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--results", required=True, help="results.jsonl from a bench run")
    p.add_argument("--report-out", help="write the aggregate as JSON to this file")

    return parser


# -- helpers -------------------------------------------------------------------


_POLICY_OVERRIDE_KEYS = (
    "per_result_cap",
    "compaction_trigger",
    "keep_recent_turns",
    "summarization_token_threshold",
    "retain_recent_tokens",
    "max_consecutive_summary_failures",
)


def _policy(level: str, config: dict | None = None):
    overrides = {
        k: v
        for k, v in ((config or {}).get("context_policy") or {}).items()
        if k in _POLICY_OVERRIDE_KEYS
    }
    try:
        return policy_from_level(level, **overrides)
    except PolicyError as exc:
        raise UsageError(str(exc)) from exc


def _profile(name: str) -> ToolProfile:
    try:
        return ToolProfile.from_name(name)
    except Exception as exc:
        raise UsageError(str(exc)) from exc


def _client_from_args(args, config: dict):
    if getattr(args, "scripted", None):
        return ScriptedClient.from_file(args.scripted)
    model = _setting(args.model, "MODEL", config, "model")
    endpoint = _setting(args.endpoint, "ENDPOINT", config, "endpoint")
    if not model or not endpoint:
        raise UsageError(
            "no client configured: pass --scripted PLAYBACK for offline runs, or "
            "--model and --endpoint (or GREPAGENT_MODEL / GREPAGENT_ENDPOINT) for a hosted model"
        )
    api_key_env = _setting(args.api_key_env, "API_KEY_ENV", config, "api_key_env", "GREPAGENT_API_KEY")
    effort = _setting(args.reasoning_effort, "REASONING_EFFORT", config, "reasoning_effort")
    return HttpChatClient(
        endpoint=endpoint, model=model, api_key_env=api_key_env, reasoning_effort=effort
    )


def _sandbox(manifest, blocked: list[str], config: dict | None = None) -> SandboxConfig:
    config = config or {}
    all_blocked = list(blocked) + list(config.get("blocked_dirs", []))
    return SandboxConfig(
        corpus_root=manifest.fs_root,
        blocked_dirs=tuple(Path(b) for b in all_blocked),
        extra_denied_commands=frozenset(config.get("denied_commands", [])),
    )


def _extra_tools(args, manifest) -> dict | None:
    index_path = getattr(args, "search_index", None)
    if not index_path:
        return None
    index = bm25_mod.load_index(Path(index_path))
    tool = bm25_mod.as_search_tool(index, manifest)
    return {tool.name: tool.registration()}


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    stats = corpus_mod.corpus_stats(manifest)
    for warning in manifest.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"docs: {stats.doc_count}")
    print(f"mean words per doc: {stats.mean_words:.1f}")
    if args.stats_out:
        Path(args.stats_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.stats_out).write_text(
            json.dumps(
                {"doc_count": stats.doc_count, "mean_words": stats.mean_words},
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
    return 0


def cmd_index(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    index = bm25_mod.build_index(manifest, k1=args.k1, b=args.b)
    out = Path(args.index_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bm25_mod.save_index(index, out)
    print(f"indexed {index.doc_count} docs, {len(index.postings)} terms -> {out}")
    return 0


def cmd_run(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    client = _client_from_args(args, config)
    label = args.corpus_label or Path(args.corpus).name
    agent_config = agent_mod.AgentConfig(
        tool_profile=_profile(args.profile),
        context_policy=_policy(args.policy, config),
        model_name=args.model or "scripted",
        reasoning_effort=args.reasoning_effort or "medium",
        max_turns=args.max_turns,
        prompt_kind=args.prompt_kind,
        tool_budget=args.tool_budget,
        corpus_label=label,
    )
    out_dir = Path(args.out)
    trajectory = agent_mod.run_session(
        args.task_id,
        args.question,
        agent_config,
        client,
        manifest,
        session_dir=out_dir,
        sandbox=_sandbox(manifest, args.blocked_dir, config),
        extra_tools=_extra_tools(args, manifest),
    )
    agent_mod.save_trajectory(trajectory, out_dir / f"{args.task_id}.trajectory.jsonl")
    if trajectory.final_state is not None:
        agent_mod.save_final_state(
            trajectory.final_state, out_dir / f"{args.task_id}.final_state.jsonl"
        )
    print(f"termination: {trajectory.termination}")
    print(f"rounds: {trajectory.rounds}  tool calls: {trajectory.tool_call_count}")
    answer = trajectory.final_answer
    if answer is None:
        print("no final answer")
        return 0
    if answer.explanation:
        print(f"Explanation: {answer.explanation}")
    print(f"Exact Answer: {answer.exact_answer}")
    print(f"Confidence: {answer.confidence}")
    if answer.ranked_docs:
        print("Ranked documents:")
        for i, doc in enumerate(answer.ranked_docs, start=1):
            print(f"  {i}. {doc}")
    return 0


def cmd_bench(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    tasks = eval_mod.load_tasks(args.tasks)
    if args.sample is not None:
        tasks = eval_mod.sample_tasks(tasks, args.sample, args.seed)
    label = args.corpus_label or Path(args.corpus).name
    prompt_kind = args.prompt_kind or (tasks[0].mode if tasks else "qa")
    agent_config = agent_mod.AgentConfig(
        tool_profile=_profile(args.profile),
        context_policy=_policy(args.policy, config),
        model_name=args.model or "scripted",
        reasoning_effort=args.reasoning_effort or "medium",
        max_turns=args.max_turns,
        prompt_kind=prompt_kind,
        tool_budget=args.tool_budget,
        corpus_label=label,
    )

    price_table = None
    if args.price_table:
        price_table = json.loads(Path(args.price_table).read_text(encoding="utf-8"))

    judge_factory = None
    if args.judge_scripted:
        judge_path = args.judge_scripted
        judge_factory = lambda: ScriptedClient.from_file(judge_path)  # noqa: E731
    elif args.judge_model:
        endpoint = _setting(args.endpoint, "ENDPOINT", config, "endpoint")
        if not endpoint:
            raise UsageError("--judge-model requires --endpoint")
        api_key_env = _setting(
            args.api_key_env, "API_KEY_ENV", config, "api_key_env", "GREPAGENT_API_KEY"
        )
        judge_factory = lambda: HttpChatClient(  # noqa: E731
            endpoint=endpoint, model=args.judge_model, api_key_env=api_key_env
        )

    out_dir = Path(args.out)
    extra = _extra_tools(args, manifest)
    report = _bench_with_clients(
        args,
        config,
        tasks,
        agent_config,
        manifest,
        out_dir,
        judge_factory,
        price_table,
        extra,
    )
    _print_bench_aggregate(report.aggregate)
    (out_dir / "aggregate.json").write_text(
        json.dumps(report.aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return 0


def _bench_with_clients(
    args, config, tasks, agent_config, manifest, out_dir, judge_factory, price_table, extra
):
    sandbox = _sandbox(manifest, args.blocked_dir, config)
    if args.scripted_dir:
        scripted_dir = Path(args.scripted_dir)
        # Per-task playback: run tasks one at a time binding each task's file.
        # Only the first call may start fresh; later ones must accumulate.
        records = []
        fresh = args.no_resume
        for task in tasks:
            playback = scripted_dir / f"{task.task_id}.jsonl"
            if not playback.exists():
                raise UsageError(f"missing playback file for task {task.task_id}: {playback}")
            partial = eval_mod.run_benchmark(
                [task],
                agent_config,
                lambda p=playback: ScriptedClient.from_file(p),
                manifest,
                out_dir,
                parallelism=1,
                judge_client_factory=judge_factory,
                price_table=price_table,
                sandbox=sandbox,
                extra_tools_factory=(lambda e=extra: e) if extra else None,
                c_seg=args.c_seg,
                read_overlap_threshold=metrics_mod.DEFAULT_READ_OVERLAP_THRESHOLD,
                resume=not fresh,
            )
            fresh = False
            records = partial.records
        return eval_mod.BenchReport(
            records=records, aggregate=eval_mod.aggregate_records(records)
        )
    client_factory = lambda: _client_from_args(args, config)  # noqa: E731
    return eval_mod.run_benchmark(
        tasks,
        agent_config,
        client_factory,
        manifest,
        out_dir,
        parallelism=args.parallelism,
        judge_client_factory=judge_factory,
        price_table=price_table,
        sandbox=sandbox,
        extra_tools_factory=(lambda e=extra: e) if extra else None,
        c_seg=args.c_seg,
        read_overlap_threshold=metrics_mod.DEFAULT_READ_OVERLAP_THRESHOLD,
        resume=not args.no_resume,
    )


def _print_bench_aggregate(agg: dict) -> None:
    print(f"tasks: {agg['task_count']}  errors: {agg['task_errors']}")
    if agg.get("accuracy") is not None:
        print(f"accuracy: {agg['accuracy']:.1f}% over {agg['judged_count']} judged "
              f"({agg['judge_failures']} judge failures excluded)")
    if agg.get("mean_ndcg") is not None:
        print(f"mean NDCG@10: {agg['mean_ndcg']:.4f}")
    print(f"avg tool calls: {agg['avg_tool_calls']:.2f}")
    if agg.get("cost_per_task") is not None:
        print(f"cost per task: ${agg['cost_per_task']:.4f}  total: ${agg['total_cost']:.4f}")


def cmd_analyze(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    tasks = {t.task_id: t for t in eval_mod.load_tasks(args.tasks)}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    header = {
        "c_seg": args.c_seg,
        "read_overlap_threshold": args.read_overlap_threshold,
    }
    print(f"c_seg={args.c_seg} read_overlap_threshold={args.read_overlap_threshold}")
    records_out = []
    for traj_path in args.trajectories:
        trajectory = agent_mod.load_trajectory(Path(traj_path))
        task = tasks.get(trajectory.task_id)
        if task is None or task.gold_set() is None:
            print(f"{trajectory.task_id}: no gold set, skipped", file=sys.stderr)
            continue
        state_path = Path(traj_path).parent / f"{trajectory.task_id}.final_state.jsonl"
        final_state = agent_mod.load_final_state(state_path) if state_path.exists() else None
        try:
            report = metrics_mod.compute_metrics(
                trajectory,
                task.gold_set(),
                manifest,
                c_seg=args.c_seg,
                read_overlap_threshold=args.read_overlap_threshold,
                final_state=final_state,
            )
        except metrics_mod.ScoringError as exc:
            print(f"{trajectory.task_id}: scoring error: {exc}", file=sys.stderr)
            continue
        reports.append(report)
        rec = eval_mod.metrics_report_to_json(report)
        records_out.append(rec)
        loc = "n/a" if report.localization is None else f"{report.localization:.4f}"
        print(
            f"{report.task_id}: coverage any={report.coverage_any} "
            f"mean={report.coverage_mean:.3f} all={report.coverage_all} localization={loc}"
        )
        if args.intent_histogram and report.intent_histogram:
            for intent in INTENTS:
                frac = report.intent_histogram.get(intent, 0.0)
                if frac:
                    print(f"    {intent}: {frac:.3f}")
    aggregate = metrics_mod.aggregate_metrics(reports)
    aggregate.update(header)
    (out_dir / "metrics.jsonl").write_text(
        "\n".join(json.dumps(r, sort_keys=True) for r in records_out) + "\n",
        encoding="utf-8",
    )
    (out_dir / "aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if reports:
        loc = aggregate.get("localization")
        print(
            f"aggregate over {aggregate['task_count']}: "
            f"any={aggregate['coverage_any']:.3f} mean={aggregate['coverage_mean']:.3f} "
            f"all={aggregate['coverage_all']:.3f} "
            f"localization={'n/a' if loc is None else f'{loc:.4f}'}"
        )
    return 0


def cmd_classify(args, config: dict) -> int:
    commands = [
        line.rstrip("\n")
        for line in Path(args.commands).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if args.histogram:
        for intent, frac in intent_histogram(commands).items():
            print(f"{intent}\t{frac!r}")
    else:
        for command in commands:
            print(f"{classify_intent(command)}\t{command}")
    return 0


def cmd_inject_distractors(args, config: dict) -> int:
    manifest = corpus_mod.ingest(args.corpus, args.layout)
    distractors = corpus_mod.ingest(args.distractors, args.distractor_layout)
    injected = corpus_mod.inject_distractors(manifest, distractors, args.target_count)
    out = corpus_mod.materialize_tree(injected, args.out)
    print(f"wrote {injected.doc_count} docs -> {out}")
    return 0


def cmd_report(args, config: dict) -> int:
    records = eval_mod.load_records(Path(args.results))
    if not records:
        raise UsageError(f"no records in {args.results}")
    aggregate = eval_mod.aggregate_records(records)
    _print_bench_aggregate(aggregate)
    if args.report_out:
        Path(args.report_out).write_text(
            json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "run": cmd_run,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
    "classify": cmd_classify,
    "inject-distractors": cmd_inject_distractors,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config_file(args.config or os.environ.get(ENV_PREFIX + "CONFIG"))
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (corpus_mod.CorpusError, eval_mod.EvalError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
