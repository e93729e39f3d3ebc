"""Judging, NDCG@10, cost accounting, task files, and the benchmark runner."""

from __future__ import annotations

import json
import math
import random

import pytest

from grepagent.agent import AgentConfig, Trajectory
from grepagent.clients import ScriptedClient
from grepagent.context import policy_from_level
from grepagent.evaluation import (
    BenchReport,
    ConfigError,
    EvalError,
    JudgeParseError,
    Task,
    UndefinedMetricError,
    account_cost,
    aggregate_records,
    judge,
    load_qrels,
    load_records,
    load_tasks,
    ndcg_at_k,
    parse_judge_output,
    run_benchmark,
    sample_tasks,
)
from grepagent.toolkit import ToolProfile

from conftest import GOLD_DOC_ID


# -- NDCG -----------------------------------------------------------------------


def oracle_ndcg(ranking, qrels, k=10):
    """Explicit DCG/IDCG sums, written independently of the implementation."""

    def dcg(rels):
        return sum((2**rel - 1) / math.log2(pos + 2) for pos, rel in enumerate(rels))

    gains = [qrels.get(doc, 0) for doc in list(ranking)[:k]]
    ideal = sorted(qrels.values(), reverse=True)[:k]
    return dcg(gains) / dcg(ideal)


class TestNdcg:
    def test_ideal_single_relevant(self):
        assert ndcg_at_k(["gold"], {"gold": 1}, 10) == pytest.approx(1.0, abs=1e-12)

    def test_rank_two_single_relevant(self):
        value = ndcg_at_k(["noise", "gold"], {"gold": 1}, 10)
        assert value == pytest.approx(1 / math.log2(3), abs=1e-9)

    def test_only_irrelevant_docs(self):
        assert ndcg_at_k(["a", "b"], {"gold": 2}, 10) == 0.0

    def test_empty_ranking_is_zero(self):
        assert ndcg_at_k([], {"gold": 1}, 10) == 0.0

    def test_all_zero_qrels_undefined(self):
        with pytest.raises(UndefinedMetricError):
            ndcg_at_k(["a"], {"a": 0, "b": 0}, 10)

    def test_bad_cutoff(self):
        with pytest.raises(ConfigError):
            ndcg_at_k(["a"], {"a": 1}, 0)

    def test_perfect_order_graded(self):
        qrels = {"a": 3, "b": 2, "c": 1}
        assert ndcg_at_k(["a", "b", "c"], qrels, 10) == pytest.approx(1.0, abs=1e-12)

    def test_matches_oracle_on_random_instances(self):
        rng = random.Random(4242)
        for _ in range(300):
            docs = [f"d{i}" for i in range(rng.randint(1, 20))]
            qrels = {d: rng.randint(0, 3) for d in docs}
            if all(v == 0 for v in qrels.values()):
                qrels[docs[0]] = 1
            ranking = rng.sample(docs, rng.randint(0, len(docs)))
            k = rng.choice([1, 5, 10])
            assert ndcg_at_k(ranking, qrels, k) == pytest.approx(
                oracle_ndcg(ranking, qrels, k), abs=1e-12
            )

    def test_in_unit_interval(self):
        rng = random.Random(11)
        for _ in range(100):
            docs = [f"d{i}" for i in range(10)]
            qrels = {d: rng.randint(0, 3) for d in docs}
            qrels["d0"] = max(qrels["d0"], 1)
            ranking = rng.sample(docs, 10)
            assert 0.0 <= ndcg_at_k(ranking, qrels, 10) <= 1.0


# -- judge ----------------------------------------------------------------------


class TestJudgeParsing:
    def test_correct_yes(self):
        verdict = parse_judge_output(
            "Extracted_final_answer: Rocinante\nReasoning: matches\nCorrect: yes\nConfidence: 88"
        )
        assert verdict.correct is True
        assert verdict.extracted_final_answer == "Rocinante"
        assert verdict.confidence == 88

    def test_none_convention(self):
        verdict = parse_judge_output(
            "Extracted_final_answer: None\nReasoning: no final answer given\nCorrect: no"
        )
        assert verdict.correct is False
        assert verdict.extracted_final_answer is None
        assert verdict.confidence == 100  # absent confidence defaults to 100

    def test_single_correct_line_governs(self):
        for value, expected in (("yes", True), ("no", False), ("Yes.", True), ("NO!", False)):
            verdict = parse_judge_output(f"Correct: {value}")
            assert verdict.correct is expected

    def test_unparseable_raises(self):
        with pytest.raises(JudgeParseError):
            parse_judge_output("I think the answer looks fine.")

    def test_scripted_judge_deterministic(self):
        reply = "Extracted_final_answer: 4\nReasoning: same number\nCorrect: yes\nConfidence: 100"
        client = ScriptedClient(steps=[{"text": reply}])
        verdict = judge("how many?", "Exact Answer: 4", "four", client)
        assert verdict.correct is True

    def test_retries_then_failure(self):
        client = ScriptedClient(
            steps=[{"text": "garbled"}, {"text": "still garbled"}, {"text": "nope"}]
        )
        with pytest.raises(JudgeParseError):
            judge("q", "Exact Answer: x", "gold", client, max_retries=2)
        assert client.calls_made == 3

    def test_empty_response_rejected(self):
        with pytest.raises(EvalError):
            judge("q", "", "gold", ScriptedClient(steps=[]))


# -- cost -----------------------------------------------------------------------


class TestAccountCost:
    PRICES = {"modelx": {"input": 1e-6, "output": 2e-6}}

    def _trajectory(self, input_tokens, output_tokens):
        return Trajectory(
            task_id="t", model_name="modelx", input_tokens=input_tokens, output_tokens=output_tokens
        )

    def test_zero_usage(self):
        assert account_cost(self._trajectory(0, 0), self.PRICES) == 0.0

    def test_arithmetic(self):
        assert account_cost(self._trajectory(1000, 1000), self.PRICES) == pytest.approx(0.003)

    def test_replay_identical(self):
        a = account_cost(self._trajectory(1234, 567), self.PRICES)
        b = account_cost(self._trajectory(1234, 567), self.PRICES)
        assert a == b

    def test_missing_model(self):
        trajectory = Trajectory(task_id="t", model_name="ghost")
        with pytest.raises(ConfigError):
            account_cost(trajectory, self.PRICES)


# -- task files -------------------------------------------------------------------


class TestTaskLoading:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "tasks.jsonl"
        path.write_text(
            json.dumps(
                {
                    "task_id": "q1",
                    "question": "what horse?",
                    "gold_answer": "Rocinante",
                    "gold_docs": [GOLD_DOC_ID],
                    "evidence_spans": {GOLD_DOC_ID: [[10, 60]]},
                }
            )
            + "\n"
            + json.dumps(
                {
                    "task_id": "q2",
                    "question": "rank docs",
                    "mode": "ir",
                    "qrels": {GOLD_DOC_ID: 2, "animals/ponies.txt": 0},
                }
            )
            + "\n",
            encoding="utf-8",
        )
        tasks = load_tasks(path)
        assert [t.task_id for t in tasks] == ["q1", "q2"]
        assert tasks[0].evidence_spans[GOLD_DOC_ID] == ((10, 60),)
        assert tasks[1].qrels[GOLD_DOC_ID] == 2

    def test_qa_without_gold_answer_rejected(self):
        with pytest.raises(EvalError):
            Task(task_id="x", question="?", mode="qa")

    def test_ir_without_qrels_rejected(self):
        with pytest.raises(EvalError):
            Task(task_id="x", question="?", mode="ir")

    def test_qrels_file_import(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("q1 0 docA 2\nq1 0 docB 0\nq2 0 docC 1\n", encoding="utf-8")
        qrels = load_qrels(path)
        assert qrels == {"q1": {"docA": 2, "docB": 0}, "q2": {"docC": 1}}

    def test_sampler_is_seeded(self):
        tasks = [
            Task(task_id=f"t{i}", question="?", gold_answer="a") for i in range(30)
        ]
        first = [t.task_id for t in sample_tasks(tasks, 10, seed=42)]
        second = [t.task_id for t in sample_tasks(tasks, 10, seed=42)]
        other = [t.task_id for t in sample_tasks(tasks, 10, seed=43)]
        assert first == second
        assert len(first) == 10
        assert first != other


# -- benchmark runner -----------------------------------------------------------


ANSWER_TEXT = (
    "Explanation: found it in [@corpus/animals/rocinante.txt]\n\n"
    "Exact Answer: Rocinante\n\n"
    "Confidence: 90%"
)
JUDGE_YES = "Extracted_final_answer: Rocinante\nReasoning: match\nCorrect: yes\nConfidence: 90"


def _qa_client_factory():
    return ScriptedClient(
        steps=[
            {
                "tool_calls": [
                    {
                        "name": "grep",
                        "args": {"pattern": "Rocinante", "path": ".", "output_mode": "content"},
                    }
                ]
            },
            {"text": ANSWER_TEXT},
        ]
    )


def _judge_factory():
    return ScriptedClient(steps=[{"text": JUDGE_YES}])


def _tasks(n=3):
    return [
        Task(
            task_id=f"q{i}",
            question="what is the horse's name?",
            gold_answer="Rocinante",
            gold_doc_ids=frozenset({GOLD_DOC_ID}),
        )
        for i in range(n)
    ]


def _config():
    return AgentConfig(
        tool_profile=ToolProfile.read_grep(),
        context_policy=policy_from_level("L2"),
        model_name="modelx",
        max_turns=10,
        corpus_label="corpus",
    )


class TestRunBenchmark:
    def test_three_tasks_report(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        report = run_benchmark(
            _tasks(3),
            _config(),
            _qa_client_factory,
            manifest,
            tmp_path / "bench",
            parallelism=2,
            judge_client_factory=_judge_factory,
            price_table={"modelx": {"input": 1e-6, "output": 2e-6}},
        )
        assert len(report.records) == 3
        assert report.aggregate["accuracy"] == 100.0
        assert report.aggregate["task_count"] == 3
        assert all(r.correct for r in report.records)
        assert all(r.metrics["coverage_any"] == 1 for r in report.records)
        assert all(r.cost is not None and r.cost > 0 for r in report.records)

    def test_resume_skips_completed(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        out = tmp_path / "bench"
        calls = {"n": 0}

        def counting_factory():
            calls["n"] += 1
            return _qa_client_factory()

        run_benchmark(
            _tasks(3)[:2], _config(), counting_factory, manifest, out,
            judge_client_factory=_judge_factory,
        )
        assert calls["n"] == 2
        report = run_benchmark(
            _tasks(3), _config(), counting_factory, manifest, out,
            judge_client_factory=_judge_factory,
        )
        assert calls["n"] == 3  # only the third task ran
        assert len(report.records) == 3

    def test_parallelism_isolation(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus

        def run(par, sub):
            return run_benchmark(
                _tasks(4), _config(), _qa_client_factory, manifest,
                tmp_path / sub, parallelism=par, judge_client_factory=_judge_factory,
            )

        serial = run(1, "serial")
        parallel = run(4, "parallel")

        def canon(report: BenchReport):
            rows = []
            for r in sorted(report.records, key=lambda r: r.task_id):
                d = r.to_json()
                d.pop("latency")
                rows.append(d)
            return rows

        assert canon(serial) == canon(parallel)

    def test_task_failure_recorded_not_fatal(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        bad_task = Task(
            task_id="bad",
            question="?",
            gold_answer="x",
            gold_doc_ids=frozenset({"missing-doc.txt"}),
        )
        report = run_benchmark(
            [bad_task] + _tasks(1),
            _config(),
            _qa_client_factory,
            manifest,
            tmp_path / "bench",
            judge_client_factory=_judge_factory,
        )
        assert len(report.records) == 2
        failed = next(r for r in report.records if r.task_id == "bad")
        assert failed.error is not None
        assert report.aggregate["task_errors"] == 1

    def test_judge_failure_excluded_from_accuracy(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus

        def bad_judge():
            return ScriptedClient(steps=[{"text": "??"}, {"text": "??"}, {"text": "??"}])

        report = run_benchmark(
            _tasks(1), _config(), _qa_client_factory, manifest, tmp_path / "bench",
            judge_client_factory=bad_judge,
        )
        record = report.records[0]
        assert record.judge_failed
        assert record.correct is None
        assert report.aggregate["accuracy"] is None
        assert report.aggregate["judge_failures"] == 1

    def test_aggregates_recompute_from_persisted_records(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        out = tmp_path / "bench"
        report = run_benchmark(
            _tasks(3), _config(), _qa_client_factory, manifest, out,
            judge_client_factory=_judge_factory,
        )
        reloaded = load_records(out / "results.jsonl")
        assert aggregate_records(reloaded) == report.aggregate

    def test_ir_task_scored_with_ndcg(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        ir_answer = (
            "Relevant Documents (ranked by relevance, most relevant first; maximum 20 documents):\n"
            f"1. corpus/{GOLD_DOC_ID}\n"
            "2. corpus/animals/ponies.txt\n\n"
            "Explanation: see above\n\n"
            "Exact Answer: see ranking\n\n"
            "Confidence: 80%"
        )

        def ir_client():
            return ScriptedClient(steps=[{"text": ir_answer}])

        task = Task(
            task_id="ir1",
            question="find docs about the horse",
            mode="ir",
            qrels={GOLD_DOC_ID: 2, "animals/ponies.txt": 0},
            gold_doc_ids=frozenset({GOLD_DOC_ID}),
        )
        config = AgentConfig(
            tool_profile=ToolProfile.read_grep(),
            context_policy=policy_from_level("L2"),
            model_name="modelx",
            max_turns=5,
            prompt_kind="ir",
            corpus_label="corpus",
        )
        report = run_benchmark(
            [task], config, ir_client, manifest, tmp_path / "bench"
        )
        record = report.records[0]
        assert record.ndcg == pytest.approx(1.0, abs=1e-12)
        assert report.aggregate["mean_ndcg"] == pytest.approx(1.0, abs=1e-12)


def test_judge_parses_full_template_shaped_reply():
    # judges typically echo the gold field between sections
    reply = (
        "Extracted_final_answer: Rocinante\n\n"
        "Correct Answer: Rocinante\n\n"
        "Reasoning: the names match exactly.\n\n"
        "Correct: yes\n\n"
        "Confidence: 95%"
    )
    verdict = parse_judge_output(reply)
    assert verdict.extracted_final_answer == "Rocinante"
    assert verdict.correct is True
    assert verdict.confidence == 95
    assert "match" in verdict.reasoning


def test_no_resume_starts_fresh(synthetic_corpus, tmp_path):
    manifest, _ = synthetic_corpus
    out = tmp_path / "bench"
    for _ in range(2):
        report = run_benchmark(
            _tasks(2), _config(), _qa_client_factory, manifest, out,
            judge_client_factory=_judge_factory, resume=False,
        )
    assert len(report.records) == 2
    assert len(load_records(out / "results.jsonl")) == 2
