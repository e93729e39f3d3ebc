"""Okapi BM25 inverted index and the retrieval-tool interface built on it.

Scoring uses IDF = ln((N - df + 0.5)/(df + 0.5) + 1) with k1 = 0.9 and
b = 0.4 (overridable). Tokenization is lowercase, split on non-alphanumeric
characters, empty tokens dropped; no stemming or stopword removal, so
index builds are fully deterministic and persist byte-identically.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import CorpusManifest, EmptyCorpusError

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_PREVIEW_LENGTH = 512
DEFAULT_MAX_K = 100

INDEX_FORMAT = "grepagent-bm25"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class IndexError_(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)


@dataclass(frozen=True)
class SearchHit:
    doc_id: str
    score: float
    preview: str


def build_index(
    manifest: CorpusManifest, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> Bm25Index:
    if manifest.doc_count == 0:
        raise EmptyCorpusError("cannot index an empty corpus")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for doc in manifest.iter_documents():
        tokens = tokenize(doc.contents)
        doc_lengths[doc.doc_id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc.doc_id, tf))
    return Bm25Index(postings=postings, doc_lengths=doc_lengths, k1=k1, b=b)


def search(index: Bm25Index, query: str, k: int) -> list[SearchHit]:
    """Top-k documents by BM25 score, ties broken by doc_id ascending.

    Previews are attached by ``attach_previews``; hits carry empty previews
    until then so scoring stays independent of the corpus contents.
    """
    if k < 1:
        raise IndexError_(f"k must be >= 1, got {k}")
    terms = tokenize(query)
    if not terms:
        return []
    scores: dict[str, float] = {}
    avgdl = index.avg_doc_length
    for term in terms:
        idf = index.idf(term)
        if idf == 0.0:
            continue
        for doc_id, tf in index.postings[term]:
            dl = index.doc_lengths[doc_id]
            denom = tf + index.k1 * (1.0 - index.b + index.b * dl / avgdl)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1.0) / denom
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    return [SearchHit(doc_id=doc_id, score=score, preview="") for doc_id, score in ranked]


def attach_previews(
    hits: list[SearchHit], manifest: CorpusManifest, preview_length: int = DEFAULT_PREVIEW_LENGTH
) -> list[SearchHit]:
    out = []
    for hit in hits:
        text = manifest.lookup(hit.doc_id).contents[:preview_length]
        out.append(SearchHit(hit.doc_id, hit.score, text.replace("\n", " ")))
    return out


# -- persistence --------------------------------------------------------------


def save_index(index: Bm25Index, path: Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "doc_lengths": index.doc_lengths,
        "postings": {term: [[d, tf] for d, tf in plist] for term, plist in index.postings.items()},
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":")),
        encoding="utf-8",
    )


def load_index(path: Path) -> Bm25Index:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != INDEX_FORMAT:
        raise IndexError_(f"not a bm25 index file: {path}")
    if payload.get("version") != INDEX_VERSION:
        raise IndexError_(f"unsupported index version: {payload.get('version')}")
    return Bm25Index(
        postings={
            term: [(d, tf) for d, tf in plist] for term, plist in payload["postings"].items()
        },
        doc_lengths=payload["doc_lengths"],
        k1=payload["k1"],
        b=payload["b"],
    )


# -- search tool registration ------------------------------------------------


@dataclass
class SearchTool:
    """The retriever-mediated interface: a "search" tool the agent can call.

    The observation is the exact text inserted into the conversation:
    numbered blocks of doc_id, score, and a fixed-length preview.
    """

    index: Bm25Index
    manifest: CorpusManifest
    max_k: int = DEFAULT_MAX_K
    preview_length: int = DEFAULT_PREVIEW_LENGTH
    name: str = "search"

    @property
    def definition(self) -> dict:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": "Search the corpus and return the top-k documents with previews.",
                "parameters": {
                    "type": "object",
                    "properties": {
                        "query": {"type": "string", "description": "Search query"},
                        "k": {
                            "type": "integer",
                            "description": f"Number of results (max {self.max_k})",
                        },
                    },
                    "required": ["query"],
                },
            },
        }

    def run(self, args: dict) -> tuple[str, int]:
        query = str(args.get("query", ""))
        k = int(args.get("k", 10) or 10)
        notice = ""
        if k > self.max_k:
            notice = f"[k clamped to {self.max_k}]\n"
            k = self.max_k
        if k < 1:
            k = 1
        hits = attach_previews(search(self.index, query, k), self.manifest, self.preview_length)
        if not hits:
            return notice + "No results", 1
        blocks = [
            f"{rank}. doc_id={hit.doc_id} score={hit.score:.4f}\n   {hit.preview}"
            for rank, hit in enumerate(hits, start=1)
        ]
        return notice + "\n".join(blocks), 0

    def registration(self) -> tuple[dict, object]:
        """(definition, runner) pair for ToolExecutor registration."""
        return self.definition, self.run


def as_search_tool(
    index: Bm25Index,
    manifest: CorpusManifest,
    max_k: int = DEFAULT_MAX_K,
    preview_length: int = DEFAULT_PREVIEW_LENGTH,
) -> SearchTool:
    return SearchTool(index=index, manifest=manifest, max_k=max_k, preview_length=preview_length)
