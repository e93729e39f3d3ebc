"""Shared fixtures: small corpora in both layouts and the bundled synthetic
corpus with one planted gold fact."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from grepagent.corpus import ingest_jsonl, ingest_tree

GOLD_DOC_ID = "animals/rocinante.txt"
GOLD_FACT = "The horse Rocinante belongs to Don Quixote de la Mancha."

_WORDS = (
    "archive ballad current dusk ember fjord granary harbor inlet jetty "
    "keel lantern meadow noon orchard plain quarry ridge saddle thicket "
    "upland vale willow yonder zenith"
).split()


def _filler(seed: int, n_words: int) -> str:
    """Deterministic prose filler; seed-tagged so docs never share long runs."""
    words = []
    for i in range(n_words):
        word = _WORDS[(seed * 7 + i * 3) % len(_WORDS)]
        if i % 4 == 0:
            word = f"{word}{seed}"
        words.append(word)
    lines = []
    for i in range(0, len(words), 12):
        lines.append(" ".join(words[i : i + 12]) + ".")
    return "\n".join(lines)


def build_synthetic_corpus(root: Path) -> dict:
    """Ten documents in a small tree; one carries the planted gold fact.

    Returns {"gold_doc": id, "fact": str, "fact_line": int}.
    """
    root.mkdir(parents=True, exist_ok=True)
    docs = {
        "animals/rocinante.txt": None,  # gold, built below
        "animals/ponies.txt": _filler(2, 260),
        "animals/mules.txt": _filler(3, 240),
        "places/la_mancha.txt": _filler(4, 280),
        "places/toboso.txt": _filler(5, 250),
        "people/quixote.txt": _filler(6, 300),
        "people/sancho.txt": _filler(7, 270),
        "books/chivalry.txt": _filler(8, 230),
        "books/romances.txt": _filler(9, 220),
        "misc/notes.txt": _filler(10, 210),
    }
    gold_lines = _filler(1, 140).splitlines()
    gold_lines.insert(2, GOLD_FACT)
    docs["animals/rocinante.txt"] = "\n".join(gold_lines)
    for rel, contents in docs.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(contents, encoding="utf-8")
    gold_text = docs["animals/rocinante.txt"]
    fact_start = gold_text.index(GOLD_FACT)
    return {
        "gold_doc": GOLD_DOC_ID,
        "fact": GOLD_FACT,
        "fact_line": 3,
        "fact_span": (fact_start, fact_start + len(GOLD_FACT)),
    }


@pytest.fixture
def synthetic_corpus(tmp_path):
    root = tmp_path / "corpus"
    info = build_synthetic_corpus(root)
    manifest = ingest_tree(root)
    return manifest, info


@pytest.fixture
def tree_corpus(tmp_path):
    root = tmp_path / "tree"
    (root / "sub").mkdir(parents=True)
    (root / "a.txt").write_text("alpha bravo charlie\nsecond line here\n", encoding="utf-8")
    (root / "b.txt").write_text("delta echo\n", encoding="utf-8")
    (root / "sub" / "c.txt").write_text("foxtrot golf hotel india\n", encoding="utf-8")
    return ingest_tree(root)


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def jsonl_corpus(tmp_path):
    path = write_jsonl(
        tmp_path / "dump.jsonl",
        [
            {"id": 1, "contents": "Rocinante is a horse in a famous novel."},
            {"id": 2, "contents": "An unrelated article about harbors and jetties."},
            {"id": 3, "contents": "Another article mentioning ponies and mules."},
        ],
    )
    return ingest_jsonl(path)


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[acceptance] {name}: {outcome}", flush=True)
