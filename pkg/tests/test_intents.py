"""Bash-command intent classification."""

from __future__ import annotations

import pytest

from grepagent.intents import INTENTS, classify_intent, intent_histogram


# The three anchored examples plus the rest of the rule table.
CASES = [
    ("rg -n 'foo' docs | head -n 50", "search_plus_limit"),
    ("cat file.txt", "full_document_read"),
    ("ls -la corpus | head", "directory_listing"),
    ("rg -n 'term' wiki_dump.jsonl | head", "local_context_peek"),
    ("grep -m 3 \"Rocinante\" wiki_corpus/wiki_dump.jsonl | head -c 1500", "local_context_peek"),
    ("rg -n 'keyword1' bc_docs | rg 'keyword2'", "chained_search"),
    ("rg foo docs | wc -l", "aggregation_count"),
    ("cut -f1 log | sort | uniq -c", "aggregation_count"),
    ("rg Rocinante", "single_keyword_search"),
    ("rg 'water bottle squirt' corpus", "single_keyword_search"),
    ("rg 'Don Quixote.*horse' dump.jsonl", "regex_match"),
    ("grep -i 'nov(ember)?\\s*2023' docs", "regex_match"),
    ("ls", "directory_listing"),
    ("ls corpus/espn.co.uk", "directory_listing"),
    ("find bc_plus_docs -maxdepth 2 -type f", "file_localization"),
    ("ls docs | rg report", "file_localization"),
    ("python3 -c 'print(1)'", "inline_scripting"),
    ("python - <<'PY'\nprint(2)\nPY", "inline_scripting"),
    ("tac notes.txt", "full_document_read"),
    ("echo hello", "other"),
    ("sed -i s/a/b/ f.txt", "other"),
    ("", "other"),
]


@pytest.mark.parametrize("command,expected", CASES)
def test_classification(command, expected):
    assert classify_intent(command) == expected


def test_total_and_deterministic():
    commands = [c for c, _ in CASES] + ["rg a | rg b | head", "wc -l *.txt"]
    first = [classify_intent(c) for c in commands]
    second = [classify_intent(c) for c in commands]
    assert first == second
    assert all(intent in INTENTS for intent in first)


def test_limit_after_two_searches_is_still_limit_rule():
    # rule 1 fires before rule 2
    assert classify_intent("rg a docs | rg b | head") == "search_plus_limit"


def test_sed_range_counts_as_limit():
    assert classify_intent("rg -n foo docs | sed -n '1,200p'") == "search_plus_limit"


def test_histogram_fractions_sum_to_one():
    commands = [c for c, _ in CASES if c]
    hist = intent_histogram(commands)
    assert abs(sum(hist.values()) - 1.0) <= 1e-12
    assert set(hist) == set(INTENTS)


def test_histogram_empty_corpus():
    assert intent_histogram([]) == {}


def test_dot_directory_target_is_not_a_file():
    assert classify_intent("grep -rn 'Rocinante' . | head -n 5") == "search_plus_limit"
    assert classify_intent("rg -n foo .. | head") == "search_plus_limit"
