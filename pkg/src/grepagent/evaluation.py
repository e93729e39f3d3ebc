"""Task loading, answer judging, NDCG@10, cost accounting, and the
benchmark runner that ties a corpus, an agent config, and a task file into
per-task records and an aggregate report."""

from __future__ import annotations

import json
import math
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .agent import (
    AgentConfig,
    Trajectory,
    run_session,
    save_final_state,
    save_trajectory,
)
from .clients import ChatClient
from .corpus import CorpusManifest
from .metrics import (
    DEFAULT_READ_OVERLAP_THRESHOLD,
    DEFAULT_SEGMENT_CHARS,
    GoldSet,
    MetricsReport,
    compute_metrics,
)
from .prompts import render_judge_prompt
from .toolkit import SandboxConfig


class EvalError(Exception):
    pass


class ConfigError(EvalError):
    pass


class UndefinedMetricError(EvalError):
    pass


class JudgeParseError(EvalError):
    pass


# -- tasks ---------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    task_id: str
    question: str
    mode: str = "qa"  # "qa" | "ir"
    gold_answer: str | None = None
    gold_doc_ids: frozenset[str] = frozenset()
    qrels: dict[str, int] = field(default_factory=dict)
    evidence_spans: dict[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode == "qa" and self.gold_answer is None:
            raise EvalError(f"qa task {self.task_id!r} has no gold_answer")
        if self.mode == "ir" and not self.qrels:
            raise EvalError(f"ir task {self.task_id!r} has no qrels")

    def gold_set(self) -> GoldSet | None:
        if not self.gold_doc_ids:
            return None
        return GoldSet(
            task_id=self.task_id,
            gold_doc_ids=self.gold_doc_ids,
            evidence_spans=self.evidence_spans,
        )


def load_tasks(path: str | Path) -> list[Task]:
    """Newline-delimited task records:
    {task_id, question, mode?, gold_answer?, gold_docs?, qrels?, evidence_spans?}."""
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvalError(f"{path}:{lineno}: invalid task record ({exc.msg})") from exc
            spans = {
                doc: tuple((int(a), int(b)) for a, b in ranges)
                for doc, ranges in (rec.get("evidence_spans") or {}).items()
            }
            tasks.append(
                Task(
                    task_id=str(rec["task_id"]),
                    question=rec["question"],
                    mode=rec.get("mode", "qa"),
                    gold_answer=rec.get("gold_answer"),
                    gold_doc_ids=frozenset(rec.get("gold_docs", [])),
                    qrels={str(k): int(v) for k, v in (rec.get("qrels") or {}).items()},
                    evidence_spans=spans,
                )
            )
    return tasks


def load_qrels(path: str | Path) -> dict[str, dict[str, int]]:
    """Standard whitespace-separated "query_id iteration doc_id relevance"."""
    qrels: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise EvalError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            query_id, _iteration, doc_id, relevance = parts
            qrels.setdefault(query_id, {})[doc_id] = int(relevance)
    return qrels


def sample_tasks(tasks: list[Task], n: int, seed: int) -> list[Task]:
    """Deterministic subset sample; order follows the original task file."""
    if n >= len(tasks):
        return list(tasks)
    rng = random.Random(seed)
    picked = set(rng.sample(range(len(tasks)), n))
    return [t for i, t in enumerate(tasks) if i in picked]


# -- judging -------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    extracted_final_answer: str | None
    reasoning: str
    correct: bool
    confidence: int


# "correct answer" is the echoed gold field, parsed only to bound sections
_JUDGE_SECTION_RE = re.compile(
    r"(?im)^[ \t>#*]*(extracted_final_answer|reasoning|correct answer|correct|confidence)"
    r"\s*\**\s*:[ \t]*"
)
_YES_NO_RE = re.compile(r"(?i)\b(yes|no)\b")


def parse_judge_output(text: str) -> JudgeVerdict:
    sections: dict[str, str] = {}
    matches = list(_JUDGE_SECTION_RE.finditer(text or ""))
    for i, m in enumerate(matches):
        name = m.group(1).lower()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        if name not in sections:
            sections[name] = text[m.end() : end].strip()
    if "correct" not in sections:
        raise JudgeParseError("judge output has no 'Correct:' field")
    decision = _YES_NO_RE.search(sections["correct"])
    if not decision:
        raise JudgeParseError(f"unparseable 'Correct:' value: {sections['correct']!r}")
    extracted = sections.get("extracted_final_answer", "").strip() or None
    if extracted is not None and extracted.strip("'\"`").lower() == "none":
        extracted = None
    confidence = 100
    conf_text = sections.get("confidence", "")
    conf_match = re.search(r"(\d+(?:\.\d+)?)", conf_text)
    if conf_match:
        confidence = max(0, min(100, int(float(conf_match.group(1)))))
    return JudgeVerdict(
        extracted_final_answer=extracted,
        reasoning=sections.get("reasoning", ""),
        correct=decision.group(1).lower() == "yes",
        confidence=confidence,
    )


def judge(
    question: str,
    response: str,
    gold_answer: str,
    client: ChatClient,
    max_retries: int = 2,
) -> JudgeVerdict:
    """Render the judging template, call the judge model, parse the verdict.

    Raises JudgeParseError once the output stays unparseable after retries;
    the caller records the task as a judge failure rather than an answer.
    """
    if not response:
        raise EvalError("cannot judge an empty response")
    prompt = render_judge_prompt(question, response, gold_answer)
    last_error: Exception | None = None
    for _ in range(max_retries + 1):
        reply = client.complete([{"role": "user", "content": prompt}], tools=())
        try:
            return parse_judge_output(reply.text or "")
        except JudgeParseError as exc:
            last_error = exc
    raise JudgeParseError(f"judge output unparseable after {max_retries} retries: {last_error}")


# -- ranking score -------------------------------------------------------------


def ndcg_at_k(ranking: Sequence[str], qrels: dict[str, int], k: int = 10) -> float:
    """Exponential-gain NDCG: DCG = sum (2^rel - 1) / log2(i + 1), i from 1."""
    if k < 1:
        raise ConfigError(f"cutoff k must be >= 1, got {k}")
    ideal_rels = sorted(qrels.values(), reverse=True)[:k]
    idcg = sum((2**rel - 1) / math.log2(i + 1) for i, rel in enumerate(ideal_rels, start=1))
    if idcg == 0:
        raise UndefinedMetricError("all qrels are zero; NDCG is undefined")
    dcg = sum(
        (2 ** qrels.get(doc_id, 0) - 1) / math.log2(i + 1)
        for i, doc_id in enumerate(ranking[:k], start=1)
    )
    return dcg / idcg


# -- cost ----------------------------------------------------------------------


def account_cost(trajectory: Trajectory, price_table: dict[str, dict[str, float]]) -> float:
    """Dollars for the trajectory's token usage under per-token prices."""
    prices = price_table.get(trajectory.model_name)
    if prices is None:
        raise ConfigError(f"model {trajectory.model_name!r} missing from price table")
    return trajectory.input_tokens * prices["input"] + trajectory.output_tokens * prices["output"]


# -- benchmark runner ----------------------------------------------------------


@dataclass
class TaskRecord:
    task_id: str
    mode: str
    termination: str
    exact_answer: str | None
    correct: bool | None
    judge_failed: bool
    ndcg: float | None
    tool_calls: int
    input_tokens: int
    output_tokens: int
    cost: float | None
    latency: float
    metrics: dict | None
    error: str | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, rec: dict) -> "TaskRecord":
        known = {f: rec.get(f) for f in cls.__dataclass_fields__}
        known["judge_failed"] = bool(rec.get("judge_failed", False))
        known["tool_calls"] = int(rec.get("tool_calls", 0))
        known["input_tokens"] = int(rec.get("input_tokens", 0))
        known["output_tokens"] = int(rec.get("output_tokens", 0))
        known["latency"] = float(rec.get("latency", 0.0))
        return cls(**known)


@dataclass
class BenchReport:
    records: list[TaskRecord]
    aggregate: dict


def aggregate_records(records: list[TaskRecord]) -> dict:
    """Recomputable exactly from the persisted per-task records."""
    judged = [r for r in records if r.correct is not None]
    failures = [r for r in records if r.judge_failed]
    errors = [r for r in records if r.error]
    ndcgs = [r.ndcg for r in records if r.ndcg is not None]
    costs = [r.cost for r in records if r.cost is not None]
    agg: dict = {
        "task_count": len(records),
        "judged_count": len(judged),
        "judge_failures": len(failures),
        "task_errors": len(errors),
        "accuracy": (100.0 * sum(r.correct for r in judged) / len(judged)) if judged else None,
        "mean_ndcg": sum(ndcgs) / len(ndcgs) if ndcgs else None,
        "avg_tool_calls": sum(r.tool_calls for r in records) / len(records) if records else 0.0,
        "avg_latency": sum(r.latency for r in records) / len(records) if records else 0.0,
        "cost_per_task": sum(costs) / len(costs) if costs else None,
        "total_cost": sum(costs) if costs else None,
    }
    return agg


def load_records(path: Path) -> list[TaskRecord]:
    records = []
    if Path(path).exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(TaskRecord.from_json(json.loads(line)))
    return records


def run_benchmark(
    tasks: list[Task],
    config: AgentConfig,
    client_factory: Callable[[], ChatClient],
    manifest: CorpusManifest,
    out_dir: Path,
    parallelism: int = 1,
    judge_client_factory: Callable[[], ChatClient] | None = None,
    price_table: dict | None = None,
    sandbox: SandboxConfig | None = None,
    extra_tools_factory: Callable[[], dict] | None = None,
    c_seg: int = DEFAULT_SEGMENT_CHARS,
    read_overlap_threshold: float = DEFAULT_READ_OVERLAP_THRESHOLD,
    resume: bool = True,
) -> BenchReport:
    """Run every task, judge/score it, and append per-task records as they
    finish. Individual task failures are recorded, never abort the batch;
    already-recorded task_ids are skipped when resuming."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "results.jsonl"
    if not resume and records_path.exists():
        records_path.unlink()
    existing = load_records(records_path) if resume else []
    done_ids = {r.task_id for r in existing}
    pending = [t for t in tasks if t.task_id not in done_ids]
    write_lock = threading.Lock()
    new_records: list[TaskRecord] = []

    def persist(record: TaskRecord) -> None:
        with write_lock:
            with open(records_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
            new_records.append(record)

    def run_one(task: Task) -> None:
        started = time.monotonic()
        try:
            record = _run_task(
                task,
                config,
                client_factory(),
                manifest,
                out_dir,
                judge_client_factory() if judge_client_factory else None,
                price_table,
                sandbox,
                extra_tools_factory() if extra_tools_factory else None,
                c_seg,
                read_overlap_threshold,
            )
        except Exception as exc:  # noqa: BLE001 - per-task isolation is the contract
            record = TaskRecord(
                task_id=task.task_id,
                mode=task.mode,
                termination="error",
                exact_answer=None,
                correct=None,
                judge_failed=False,
                ndcg=None,
                tool_calls=0,
                input_tokens=0,
                output_tokens=0,
                cost=None,
                latency=time.monotonic() - started,
                metrics=None,
                error=f"{type(exc).__name__}: {exc}",
            )
        persist(record)

    if parallelism <= 1:
        for task in pending:
            run_one(task)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(run_one, pending))

    all_records = existing + new_records
    return BenchReport(records=all_records, aggregate=aggregate_records(all_records))


def _run_task(
    task: Task,
    config: AgentConfig,
    client: ChatClient,
    manifest: CorpusManifest,
    out_dir: Path,
    judge_client: ChatClient | None,
    price_table: dict | None,
    sandbox: SandboxConfig | None,
    extra_tools: dict | None,
    c_seg: int,
    read_overlap_threshold: float,
) -> TaskRecord:
    started = time.monotonic()
    session_dir = out_dir / "sessions" / task.task_id
    trajectory = run_session(
        task.task_id,
        task.question,
        config,
        client,
        manifest,
        session_dir=session_dir,
        sandbox=sandbox,
        extra_tools=extra_tools,
    )
    save_trajectory(trajectory, session_dir / f"{task.task_id}.trajectory.jsonl")
    if trajectory.final_state is not None:
        save_final_state(trajectory.final_state, session_dir / f"{task.task_id}.final_state.jsonl")

    correct: bool | None = None
    judge_failed = False
    ndcg: float | None = None
    answer_text = trajectory.final_answer.exact_answer if trajectory.final_answer else None

    if task.mode == "qa" and judge_client is not None and trajectory.final_answer is not None:
        response = _response_text(trajectory)
        try:
            verdict = judge(task.question, response, task.gold_answer or "", judge_client)
            correct = verdict.correct
        except JudgeParseError:
            judge_failed = True
    if task.mode == "ir" and trajectory.final_answer is not None:
        ranking = list(trajectory.final_answer.ranked_docs)
        ndcg = ndcg_at_k(ranking, task.qrels, k=10)

    metrics_dict: dict | None = None
    gold = task.gold_set()
    if gold is not None:
        report = compute_metrics(
            trajectory,
            gold,
            manifest,
            c_seg=c_seg,
            read_overlap_threshold=read_overlap_threshold,
        )
        metrics_dict = metrics_report_to_json(report)

    cost = account_cost(trajectory, price_table) if price_table else None
    return TaskRecord(
        task_id=task.task_id,
        mode=task.mode,
        termination=trajectory.termination,
        exact_answer=answer_text,
        correct=correct,
        judge_failed=judge_failed,
        ndcg=ndcg,
        tool_calls=trajectory.tool_call_count,
        input_tokens=trajectory.input_tokens,
        output_tokens=trajectory.output_tokens,
        cost=cost,
        latency=time.monotonic() - started,
        metrics=metrics_dict,
    )


def _response_text(trajectory: Trajectory) -> str:
    answer = trajectory.final_answer
    if answer is None:
        return ""
    parts = []
    if answer.explanation:
        parts.append(f"Explanation: {answer.explanation}")
    parts.append(f"Exact Answer: {answer.exact_answer}")
    parts.append(f"Confidence: {answer.confidence}%")
    return "\n\n".join(parts)


def metrics_report_to_json(report: MetricsReport) -> dict:
    return {
        "task_id": report.task_id,
        "coverage_any": report.coverage_any,
        "coverage_mean": report.coverage_mean,
        "coverage_all": report.coverage_all,
        "localization": report.localization,
        "retained_coverage": report.retained_coverage,
        "tool_call_count": report.tool_call_count,
        "intent_histogram": report.intent_histogram,
        "c_seg": report.c_seg,
        "read_overlap_threshold": report.read_overlap_threshold,
        "surfaced_doc_ids": list(report.surfaced_doc_ids),
        "candidate_count": report.candidate_count,
        "warnings": list(report.warnings),
    }
