"""Prompt rendering, answer parsing, and the session loop."""

from __future__ import annotations

import pytest

from grepagent.agent import (
    AgentConfig,
    canonical_trajectory_bytes,
    load_trajectory,
    parse_answer,
    parse_ranking,
    run_session,
    save_trajectory,
)
from grepagent.clients import ScriptedClient
from grepagent.context import policy_from_level
from grepagent.prompts import PromptError, render_prompt
from grepagent.toolkit import EXIT_DENIED, ToolProfile

from conftest import GOLD_DOC_ID


class TestRenderPrompt:
    def test_qa_contains_question_and_format(self):
        text = render_prompt("qa", "wiki", "q")
        assert "Question: q" in text
        assert "Exact Answer:" in text
        assert "@wiki" in text

    def test_ir_contains_ranking_cap(self):
        text = render_prompt("ir", "wiki", "which docs?")
        assert "maximum 20 documents" in text
        assert "NDCG" in text

    def test_empty_query_rejected(self):
        with pytest.raises(PromptError):
            render_prompt("qa", "wiki", "")

    def test_unknown_kind_rejected(self):
        with pytest.raises(PromptError):
            render_prompt("chat", "wiki", "q")


class TestParseAnswer:
    def test_extracts_exact_answer(self):
        answer = parse_answer("Explanation: because.\n\nExact Answer: Rocinante\n\nConfidence: 85%")
        assert answer.exact_answer == "Rocinante"
        assert answer.explanation == "because."
        assert answer.confidence == 85

    def test_case_insensitive_headers(self):
        answer = parse_answer("EXACT ANSWER: forty-two")
        assert answer.exact_answer == "forty-two"

    def test_no_answer_section_is_parse_failure(self):
        assert parse_answer("I am still searching the corpus.") is None

    def test_missing_confidence_defaults_100(self):
        assert parse_answer("Exact Answer: x").confidence == 100

    def test_confidence_clamped(self):
        assert parse_answer("Exact Answer: x\nConfidence: 250%").confidence == 100


class TestParseRanking:
    def test_ordered_paths(self, synthetic_corpus):
        manifest, _ = synthetic_corpus
        text = (
            "Relevant Documents:\n"
            f"1. corpus/{GOLD_DOC_ID}\n"
            "2. corpus/animals/ponies.txt\n"
            "3. corpus/places/toboso.txt\n"
        )
        ranked, warnings = parse_ranking(text, manifest, "corpus")
        assert ranked == [GOLD_DOC_ID, "animals/ponies.txt", "places/toboso.txt"]
        assert warnings == []

    def test_unknown_paths_dropped_with_warning(self, synthetic_corpus):
        manifest, _ = synthetic_corpus
        text = "Relevant Documents:\n1. corpus/ghost.txt\n2. corpus/animals/mules.txt\n"
        ranked, warnings = parse_ranking(text, manifest, "corpus")
        assert ranked == ["animals/mules.txt"]
        assert len(warnings) == 1

    def test_truncates_to_twenty(self, tmp_path):
        from grepagent.corpus import ingest_tree

        root = tmp_path / "c"
        root.mkdir()
        for i in range(25):
            (root / f"d{i:02d}.txt").write_text(f"doc {i}", encoding="utf-8")
        manifest = ingest_tree(root)
        text = "Relevant Documents:\n" + "\n".join(
            f"{i + 1}. d{i:02d}.txt" for i in range(25)
        )
        ranked, _ = parse_ranking(text, manifest, "c")
        assert len(ranked) == 20
        assert ranked[0] == "d00.txt"

    def test_duplicates_keep_first(self, synthetic_corpus):
        manifest, _ = synthetic_corpus
        text = (
            f"1. {GOLD_DOC_ID}\n2. animals/ponies.txt\n3. {GOLD_DOC_ID}\n"
        )
        ranked, _ = parse_ranking(text, manifest, "corpus")
        assert ranked == [GOLD_DOC_ID, "animals/ponies.txt"]

    def test_zero_resolvable_paths(self, synthetic_corpus):
        manifest, _ = synthetic_corpus
        ranked, warnings = parse_ranking("1. nothing/here.txt\n", manifest, "corpus")
        assert ranked == []
        assert warnings


def _config(profile=None, policy="L2", **kwargs):
    return AgentConfig(
        tool_profile=profile or ToolProfile.read_grep(),
        context_policy=policy_from_level(policy),
        model_name="scripted-model",
        corpus_label="corpus",
        **kwargs,
    )


ANSWER = "Explanation: evidence cited.\n\nExact Answer: Rocinante\n\nConfidence: 95%"


def _grep_then_answer():
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
            {"text": ANSWER},
        ]
    )


class TestRunSession:
    def test_grep_then_answer(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        trajectory = run_session(
            "t1", "what is the horse called?", _config(), _grep_then_answer(),
            manifest, tmp_path / "s",
        )
        assert trajectory.termination == "answered"
        assert trajectory.rounds == 2
        assert trajectory.tool_call_count == 1
        assert trajectory.final_answer.exact_answer == "Rocinante"
        assert trajectory.final_answer.confidence == 95

    def test_never_answering_hits_turn_budget(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(steps=[{"text": "hmm, still thinking"}] * 50)
        trajectory = run_session(
            "t2", "q", _config(max_turns=7), client, manifest, tmp_path / "s"
        )
        assert trajectory.termination == "turn_budget"
        assert trajectory.rounds == 7

    def test_tool_budget_trips_then_forced_answer(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        steps = [
            {"tool_calls": [{"name": "grep", "args": {"pattern": "x", "path": "."}}]}
            for _ in range(3)
        ] + [{"text": ANSWER}]
        client = ScriptedClient(steps=steps)
        trajectory = run_session(
            "t3", "q", _config(tool_budget=3), client, manifest, tmp_path / "s"
        )
        assert trajectory.termination == "tool_budget"
        assert trajectory.tool_call_count == 3
        # the forced completion with tools disabled still parsed an answer
        assert trajectory.final_answer is not None

    def test_out_of_profile_tool_denied_session_continues(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(
            steps=[
                {"tool_calls": [{"name": "bash", "args": {"command": "ls"}}]},
                {"text": ANSWER},
            ]
        )
        trajectory = run_session(
            "t4", "q", _config(profile=ToolProfile.read_grep()), client,
            manifest, tmp_path / "s",
        )
        assert trajectory.termination == "answered"
        denials = [
            t for t in trajectory.turns if t.role == "tool" and t.exit_status == EXIT_DENIED
        ]
        assert len(denials) == 1
        assert "bash" not in trajectory.executed_tools

    def test_profile_enforcement_no_bash_under_read_grep(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(
            steps=[
                {"tool_calls": [{"name": "bash", "args": {"command": "cat animals/rocinante.txt"}}]},
                {"tool_calls": [{"name": "grep", "args": {"pattern": "Rocinante", "path": "."}}]},
                {"text": ANSWER},
            ]
        )
        trajectory = run_session(
            "t5", "q", _config(profile=ToolProfile.read_grep()), client,
            manifest, tmp_path / "s",
        )
        assert trajectory.executed_tools == frozenset({"grep"})

    def test_client_error_terminates(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(steps=[{"error": "boom"}])
        trajectory = run_session("t6", "q", _config(), client, manifest, tmp_path / "s")
        assert trajectory.termination == "client_error"
        assert trajectory.final_answer is None

    def test_tool_call_and_result_pair_by_seq(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(
            steps=[
                {
                    "tool_calls": [
                        {"name": "grep", "args": {"pattern": "Rocinante", "path": "."}},
                        {"name": "read", "args": {"path": GOLD_DOC_ID, "offset": 1, "limit": 3}},
                    ]
                },
                {"text": ANSWER},
            ]
        )
        trajectory = run_session("t7", "q", _config(), client, manifest, tmp_path / "s")
        calls = {t.seq: t for t in trajectory.turns if t.role == "tool_call"}
        results = {t.seq: t for t in trajectory.turns if t.role == "tool"}
        assert set(calls) == set(results)
        assert len(calls) == 2
        for seq, call in calls.items():
            assert results[seq].tool_name == call.tool_name

    def test_text_with_tool_calls_prefers_tools(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        client = ScriptedClient(
            steps=[
                {
                    "text": "Exact Answer: premature",
                    "tool_calls": [{"name": "grep", "args": {"pattern": "Rocinante", "path": "."}}],
                },
                {"text": ANSWER},
            ]
        )
        trajectory = run_session("t8", "q", _config(), client, manifest, tmp_path / "s")
        assert trajectory.rounds == 2
        assert trajectory.final_answer.exact_answer == "Rocinante"

    def test_ir_session_parses_ranking(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        ir_answer = (
            "Relevant Documents:\n"
            f"1. corpus/{GOLD_DOC_ID}\n"
            "2. corpus/animals/ponies.txt\n\n"
            "Explanation: both mention horses.\n\n"
            "Exact Answer: listed above\n\n"
            "Confidence: 70%"
        )
        client = ScriptedClient(steps=[{"text": ir_answer}])
        trajectory = run_session(
            "t9", "find horse docs", _config(prompt_kind="ir"), client,
            manifest, tmp_path / "s",
        )
        assert trajectory.final_answer.ranked_docs == (GOLD_DOC_ID, "animals/ponies.txt")


class TestReplayDeterminism:
    def test_byte_identical_modulo_wall_time(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        paths = []
        for run_dir in ("one", "two"):
            trajectory = run_session(
                "replay", "q", _config(), _grep_then_answer(), manifest,
                tmp_path / run_dir,
            )
            path = tmp_path / run_dir / "t.trajectory.jsonl"
            save_trajectory(trajectory, path)
            paths.append(path)
        assert canonical_trajectory_bytes(paths[0]) == canonical_trajectory_bytes(paths[1])

    def test_round_trip_load(self, synthetic_corpus, tmp_path):
        manifest, _ = synthetic_corpus
        trajectory = run_session(
            "rt", "q", _config(), _grep_then_answer(), manifest, tmp_path / "s"
        )
        path = tmp_path / "rt.trajectory.jsonl"
        save_trajectory(trajectory, path)
        loaded = load_trajectory(path)
        assert loaded.task_id == trajectory.task_id
        assert loaded.termination == trajectory.termination
        assert loaded.final_answer == trajectory.final_answer
        assert len(loaded.turns) == len(trajectory.turns)
        assert [t.role for t in loaded.turns] == [t.role for t in trajectory.turns]
        assert loaded.executed_tools == trajectory.executed_tools


class TestAgentConfig:
    def test_max_turns_must_be_positive(self):
        with pytest.raises(ValueError):
            AgentConfig(
                tool_profile=ToolProfile.read_grep(),
                context_policy=policy_from_level("L0"),
                max_turns=0,
            )


class TestRetrievalProfile:
    def test_search_only_session_and_preview_candidates(self, synthetic_corpus, tmp_path):
        from grepagent.bm25 import as_search_tool, build_index
        from grepagent.metrics import GoldSet, extract_candidates

        manifest, info = synthetic_corpus
        tool = as_search_tool(build_index(manifest), manifest, preview_length=96)
        client = ScriptedClient(
            steps=[
                {"tool_calls": [{"name": "search", "args": {"query": "Rocinante horse", "k": 3}}]},
                {"tool_calls": [{"name": "read", "args": {"path": GOLD_DOC_ID, "limit": 2}}]},
                {"text": ANSWER},
            ]
        )
        config = _config(profile=ToolProfile.retrieval())
        trajectory = run_session(
            "ret", "q", config, client, manifest, tmp_path / "s",
            extra_tools={tool.name: tool.registration()},
        )
        # pure retrieval agent: the read call was denied, no file tools ran
        assert trajectory.executed_tools == frozenset({"search"})
        gold = GoldSet(task_id="ret", gold_doc_ids=frozenset({info["gold_doc"]}))
        candidates, _ = extract_candidates(trajectory, gold, manifest)
        previews = [c for c in candidates if c.provenance == "retriever_preview"]
        assert previews
        assert previews[0].doc_id == info["gold_doc"]
        assert previews[0].snippet_length == 96
