"""Trajectory-level coverage and localization scoring.

Coverage asks whether gold documents appear in the recorded trace at all;
localization asks how narrow the best exposed span of each surfaced gold
document is, measured in fixed-width character segments:

    nu(x)     = max(1, ceil(x / c_seg))
    psi(a; b) = 1                          if b == 1
                max(1 - log(a)/log(b), 0)  otherwise, with a clamped to b
    seg_score = psi(nu(snippet_chars), nu(doc_chars))

Candidates are reconstructed from raw tool outputs: every aligned matched
line from a grep-style search, sufficiently-overlapping read spans, preview
snippets from the retrieval tool, and a full-document fallback for
documents surfaced only by path.
"""

from __future__ import annotations

import difflib
import json
import math
import re
from dataclasses import dataclass, field

from .agent import Trajectory
from .context import SessionState, strip_truncation_marker
from .corpus import CorpusManifest
from .intents import classify_intent, intent_histogram
from .toolkit import strip_read_prefixes

DEFAULT_SEGMENT_CHARS = 200
DEFAULT_READ_OVERLAP_THRESHOLD = 0.5
EXCERPT_CHARS = 64
_EXCERPT_STRIDE = 16

PROVENANCE_GREP_LINE = "grep_line"
PROVENANCE_READ_SPAN = "read_span"
PROVENANCE_PATH_ONLY = "path_only"
PROVENANCE_RETRIEVER_PREVIEW = "retriever_preview"


class MetricError(Exception):
    pass


class ScoringError(MetricError):
    pass


@dataclass(frozen=True)
class GoldSet:
    task_id: str
    gold_doc_ids: frozenset[str]
    # doc_id -> annotated evidence character ranges, when available
    evidence_spans: dict[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.gold_doc_ids:
            raise MetricError(f"gold set for task {self.task_id!r} is empty")


@dataclass(frozen=True)
class Candidate:
    turn_index: int
    doc_id: str
    snippet: str
    snippet_length: int
    provenance: str


@dataclass
class MetricsReport:
    task_id: str
    coverage_any: int
    coverage_mean: float
    coverage_all: int
    localization: float | None
    retained_coverage: float | None
    tool_call_count: int
    intent_histogram: dict[str, float]
    c_seg: int
    read_overlap_threshold: float
    surfaced_doc_ids: tuple[str, ...] = ()
    candidate_count: int = 0
    warnings: tuple[str, ...] = ()


# -- segment math -------------------------------------------------------------


def nu(x: int, c_seg: int = DEFAULT_SEGMENT_CHARS) -> int:
    """Map a character length to a segment count, never below 1."""
    if c_seg < 1:
        raise MetricError(f"segment width must be >= 1, got {c_seg}")
    if x < 0:
        raise MetricError(f"length must be >= 0, got {x}")
    return max(1, math.ceil(x / c_seg))


def psi(a: int, b: int) -> float:
    """Log-scaled narrowness of a segments inside b segments, in [0, 1]."""
    if a < 1 or b < 1:
        raise MetricError(f"segment counts must be >= 1, got a={a}, b={b}")
    if b == 1:
        return 1.0
    a = min(a, b)
    return max(1.0 - math.log(a) / math.log(b), 0.0)


def seg_score(
    snippet_length: int, doc_length: int, c_seg: int = DEFAULT_SEGMENT_CHARS
) -> float:
    if doc_length < 1:
        raise MetricError(f"doc_length must be >= 1, got {doc_length}")
    return psi(nu(snippet_length, c_seg), nu(doc_length, c_seg))


# -- candidate extraction -------------------------------------------------------

_ANNOTATED_LINE_RE = re.compile(r"^(.*?):(\d+):(.*)$")
_RECORD_ID_RE = re.compile(r'"id"\s*:\s*(\d+)')
_SEARCH_HIT_RE = re.compile(r"^\s*\d+\.\s+doc_id=(\S+)\s+score=\S+")
_READ_PREFIX_RE = re.compile(r"^\s*\d+->")


class _Extraction:
    def __init__(self, gold: GoldSet, manifest: CorpusManifest, threshold: float):
        self.gold = gold
        self.manifest = manifest
        self.threshold = threshold
        self.candidates: list[Candidate] = []
        self.warnings: list[str] = []
        self.docs = {}
        for doc_id in gold.gold_doc_ids:
            try:
                self.docs[doc_id] = manifest.lookup(doc_id)
            except Exception as exc:
                raise ScoringError(f"gold doc {doc_id!r} not found in corpus: {exc}") from exc

    def add(self, turn_index: int, doc_id: str, snippet: str, provenance: str) -> None:
        if provenance == PROVENANCE_PATH_ONLY:
            length = self.docs[doc_id].char_length
        else:
            length = len(snippet)
        self.candidates.append(
            Candidate(
                turn_index=turn_index,
                doc_id=doc_id,
                snippet=snippet,
                snippet_length=length,
                provenance=provenance,
            )
        )

    # alignment helpers -----------------------------------------------------

    def doc_for_path(self, path_text: str) -> str | None:
        """Exact path alignment: the gold doc whose id the path ends with."""
        cleaned = path_text.strip()
        while cleaned.startswith("./"):
            cleaned = cleaned[2:]
        for doc_id in self.gold.gold_doc_ids:
            if cleaned == doc_id or cleaned.endswith("/" + doc_id):
                return doc_id
        return None

    def doc_for_record_line(self, line: str) -> str | None:
        m = _RECORD_ID_RE.search(line)
        if m and m.group(1) in self.gold.gold_doc_ids:
            return m.group(1)
        return None

    def paths_mentioned(self, text: str) -> set[str]:
        found = set()
        for doc_id in self.gold.gold_doc_ids:
            if "/" in doc_id or "." in doc_id:
                if doc_id in text:
                    found.add(doc_id)
            else:
                # JSONL ids only count as mentions in an id-like position.
                if re.search(rf'"id"\s*:\s*{re.escape(doc_id)}\b', text) or re.search(
                    rf"\bDocument {re.escape(doc_id)}\b", text
                ):
                    found.add(doc_id)
        return found

    def read_overlap_sufficient(self, doc_id: str, start: int, end: int) -> bool:
        spans = self.gold.evidence_spans.get(doc_id)
        if not spans:
            return True
        for ev_start, ev_end in spans:
            width = max(1, ev_end - ev_start)
            covered = max(0, min(end, ev_end) - max(start, ev_start))
            if covered / width >= self.threshold:
                return True
        return False

    def excerpt_align(self, turn_index: int, residual: str) -> None:
        """Map unannotated tool text back to gold documents via verbatim
        64-char excerpts; ambiguous matches are dropped with a warning."""
        if len(residual) < EXCERPT_CHARS:
            return
        regions: dict[str, list[tuple[int, int]]] = {}
        positions = list(range(0, len(residual) - EXCERPT_CHARS + 1, _EXCERPT_STRIDE))
        if positions and positions[-1] != len(residual) - EXCERPT_CHARS:
            positions.append(len(residual) - EXCERPT_CHARS)
        for pos in positions:
            window = residual[pos : pos + EXCERPT_CHARS]
            holders = [d for d, doc in self.docs.items() if window in doc.contents]
            if len(holders) > 1:
                self.warnings.append(
                    f"turn {turn_index}: excerpt matches {len(holders)} gold docs, dropped"
                )
                continue
            if len(holders) == 1:
                regions.setdefault(holders[0], []).append((pos, pos + EXCERPT_CHARS))
        for doc_id, spans in regions.items():
            spans.sort()
            merged: list[list[int]] = []
            for lo, hi in spans:
                if merged and lo <= merged[-1][1]:
                    merged[-1][1] = max(merged[-1][1], hi)
                else:
                    merged.append([lo, hi])
            total = sum(hi - lo for lo, hi in merged)
            snippet = residual[merged[0][0] : merged[0][0] + total]
            self.add(turn_index, doc_id, snippet, PROVENANCE_READ_SPAN)


def extract_candidates(
    trajectory: Trajectory,
    gold: GoldSet,
    manifest: CorpusManifest,
    read_overlap_threshold: float = DEFAULT_READ_OVERLAP_THRESHOLD,
) -> tuple[list[Candidate], list[str]]:
    """Reconstruct (document, snippet) candidates from every observation."""
    ex = _Extraction(gold, manifest, read_overlap_threshold)
    calls_by_seq = {
        t.seq: t for t in trajectory.turns if t.role == "tool_call" and t.seq is not None
    }
    for turn in trajectory.turns:
        if turn.role != "tool" or turn.inline_text is None:
            continue
        call = calls_by_seq.get(turn.seq)
        args = call.args if call and call.args else {}
        body = strip_truncation_marker(turn.inline_text)
        tool = turn.tool_name or ""
        if tool == "search":
            _extract_search(ex, turn.turn_index, body)
        elif tool == "read":
            _extract_read(ex, turn.turn_index, args, body)
        elif tool == "grep":
            _extract_grep(ex, turn.turn_index, args, body)
        elif tool == "bash":
            _extract_bash(ex, turn.turn_index, body)
    return ex.candidates, ex.warnings


def _extract_search(ex: _Extraction, turn_index: int, body: str) -> None:
    lines = body.splitlines()
    for i, line in enumerate(lines):
        m = _SEARCH_HIT_RE.match(line)
        if not m:
            continue
        doc_id = m.group(1)
        if doc_id not in ex.gold.gold_doc_ids:
            continue
        preview = ""
        if i + 1 < len(lines) and not _SEARCH_HIT_RE.match(lines[i + 1]):
            preview = lines[i + 1]
            if preview.startswith("   "):
                preview = preview[3:]
        if preview:
            ex.add(turn_index, doc_id, preview, PROVENANCE_RETRIEVER_PREVIEW)
        else:
            ex.add(turn_index, doc_id, "", PROVENANCE_PATH_ONLY)


def _extract_read(ex: _Extraction, turn_index: int, args: dict, body: str) -> None:
    path = str(args.get("path") or args.get("file_path") or "")
    doc_id = ex.doc_for_path(path)
    if doc_id is None:
        # Reading a JSONL corpus file exposes record lines.
        stripped = strip_read_prefixes(body)
        consumed = _record_lines(ex, turn_index, stripped.splitlines())
        residual = "\n".join(l for l in stripped.splitlines() if l not in consumed)
        ex.excerpt_align(turn_index, residual)
        return
    span_text = strip_read_prefixes(body)
    doc = ex.docs[doc_id]
    start = doc.contents.find(span_text) if span_text else -1
    if start < 0:
        offset = max(1, int(args.get("offset", 1) or 1))
        limit = int(args.get("limit", 2000) or 2000)
        lines = doc.contents.splitlines()
        start = sum(len(l) + 1 for l in lines[: offset - 1])
        span_text = "\n".join(lines[offset - 1 : offset - 1 + limit])
    end = start + len(span_text)
    if span_text and ex.read_overlap_sufficient(doc_id, start, end):
        ex.add(turn_index, doc_id, span_text, PROVENANCE_READ_SPAN)
    else:
        ex.add(turn_index, doc_id, "", PROVENANCE_PATH_ONLY)


def _extract_grep(ex: _Extraction, turn_index: int, args: dict, body: str) -> None:
    mode = args.get("output_mode", "content")
    if mode == "files_with_matches":
        for line in body.splitlines():
            doc_id = ex.doc_for_path(line)
            if doc_id is not None:
                ex.add(turn_index, doc_id, "", PROVENANCE_PATH_ONLY)
        return
    _, matched_docs = _annotated_lines(ex, turn_index, body.splitlines())
    # Context lines and headers may still surface docs by path alone.
    for doc_id in ex.paths_mentioned(body) - matched_docs:
        ex.add(turn_index, doc_id, "", PROVENANCE_PATH_ONLY)


def _extract_bash(ex: _Extraction, turn_index: int, body: str) -> None:
    lines = body.splitlines()
    consumed, _ = _annotated_lines(ex, turn_index, lines)
    consumed |= _record_lines(ex, turn_index, lines)
    residual = "\n".join(l for l in lines if l not in consumed)
    ex.excerpt_align(turn_index, residual)
    surfaced = {c.doc_id for c in ex.candidates if c.turn_index == turn_index}
    for doc_id in ex.paths_mentioned(body) - surfaced:
        ex.add(turn_index, doc_id, "", PROVENANCE_PATH_ONLY)


def _annotated_lines(
    ex: _Extraction, turn_index: int, lines: list[str]
) -> tuple[set[str], set[str]]:
    """grep/rg -n style "path:lineno:text" lines; each aligned matched line
    becomes one candidate whose snippet is that matched line. Returns the
    consumed lines and the aligned doc ids."""
    consumed: set[str] = set()
    matched: set[str] = set()
    for line in lines:
        m = _ANNOTATED_LINE_RE.match(line)
        if not m:
            continue
        path_part, _, text = m.groups()
        doc_id = ex.doc_for_path(path_part)
        if doc_id is not None:
            ex.add(turn_index, doc_id, text, PROVENANCE_GREP_LINE)
            matched.add(doc_id)
            consumed.add(line)
            continue
        record_doc = ex.doc_for_record_line(text)
        if record_doc is not None:
            # A matched line that is an entire one-line record scores with
            # the full record length.
            ex.add(turn_index, record_doc, text, PROVENANCE_GREP_LINE)
            matched.add(record_doc)
            consumed.add(line)
    return consumed, matched


def _record_lines(ex: _Extraction, turn_index: int, lines: list[str]) -> set[str]:
    """Raw JSONL record lines exposed by bash or read output."""
    consumed: set[str] = set()
    for line in lines:
        stripped = line.strip()
        if not stripped.startswith("{"):
            continue
        doc_id = ex.doc_for_record_line(stripped)
        if doc_id is None:
            continue
        try:
            record = json.loads(stripped)
        except json.JSONDecodeError:
            record = None
        if record is not None and str(record.get("id")) == doc_id:
            ex.add(turn_index, doc_id, stripped, PROVENANCE_GREP_LINE)
            consumed.add(line)
    return consumed


# -- coverage and localization ---------------------------------------------


@dataclass(frozen=True)
class Coverage:
    any: int
    mean: float
    all: int


def surfaced_docs(candidates: list[Candidate]) -> set[str]:
    return {c.doc_id for c in candidates}


def coverage(gold: GoldSet, candidates: list[Candidate]) -> Coverage:
    surfaced = surfaced_docs(candidates) & gold.gold_doc_ids
    n_gold = len(gold.gold_doc_ids)
    return Coverage(
        any=int(len(surfaced) >= 1),
        mean=len(surfaced) / n_gold,
        all=int(len(surfaced) == n_gold),
    )


def localization(
    gold: GoldSet,
    candidates: list[Candidate],
    manifest: CorpusManifest,
    c_seg: int = DEFAULT_SEGMENT_CHARS,
) -> float | None:
    """Mean over surfaced gold docs of the best seg-score; None when no gold
    doc was surfaced (reported as absent, never as zero)."""
    by_doc: dict[str, list[Candidate]] = {}
    for cand in candidates:
        if cand.doc_id in gold.gold_doc_ids:
            by_doc.setdefault(cand.doc_id, []).append(cand)
    if not by_doc:
        return None
    scores = []
    for doc_id, cands in by_doc.items():
        try:
            doc_length = manifest.lookup(doc_id).char_length
        except Exception as exc:
            raise ScoringError(f"gold doc {doc_id!r} not found in corpus: {exc}") from exc
        scores.append(max(seg_score(c.snippet_length, doc_length, c_seg) for c in cands))
    return sum(scores) / len(scores)


def retained_coverage(
    final_state: SessionState, gold: GoldSet, manifest: CorpusManifest
) -> float:
    """Fraction of gold docs whose id or a >=64-char verbatim excerpt still
    appears in a non-placeholder turn of the final conversation state."""
    live_texts = [t.content for t in final_state.turns if not t.compacted]
    retained = 0
    for doc_id in gold.gold_doc_ids:
        contents = manifest.lookup(doc_id).contents
        if any(_doc_present(text, doc_id, contents) for text in live_texts):
            retained += 1
    return retained / len(gold.gold_doc_ids)


def _doc_present(text: str, doc_id: str, contents: str) -> bool:
    if "/" in doc_id or "." in doc_id:
        if doc_id in text:
            return True
    elif re.search(rf'"id"\s*:\s*{re.escape(doc_id)}\b', text) or re.search(
        rf"\bDocument {re.escape(doc_id)}\b", text
    ):
        return True
    if len(text) < EXCERPT_CHARS or not contents:
        return False
    matcher = difflib.SequenceMatcher(None, text, contents, autojunk=False)
    match = matcher.find_longest_match(0, len(text), 0, len(contents))
    return match.size >= EXCERPT_CHARS


# -- assembled report ---------------------------------------------------------


def compute_metrics(
    trajectory: Trajectory,
    gold: GoldSet,
    manifest: CorpusManifest,
    c_seg: int = DEFAULT_SEGMENT_CHARS,
    read_overlap_threshold: float = DEFAULT_READ_OVERLAP_THRESHOLD,
    final_state: SessionState | None = None,
) -> MetricsReport:
    candidates, warnings = extract_candidates(
        trajectory, gold, manifest, read_overlap_threshold
    )
    cov = coverage(gold, candidates)
    loc = localization(gold, candidates, manifest, c_seg)
    state = final_state if final_state is not None else trajectory.final_state
    retained = retained_coverage(state, gold, manifest) if state is not None else None
    return MetricsReport(
        task_id=trajectory.task_id,
        coverage_any=cov.any,
        coverage_mean=cov.mean,
        coverage_all=cov.all,
        localization=loc,
        retained_coverage=retained,
        tool_call_count=trajectory.tool_call_count,
        intent_histogram=intent_histogram(trajectory.bash_commands()),
        c_seg=c_seg,
        read_overlap_threshold=read_overlap_threshold,
        surfaced_doc_ids=tuple(sorted(surfaced_docs(candidates) & gold.gold_doc_ids)),
        candidate_count=len(candidates),
        warnings=tuple(warnings),
    )


def aggregate_metrics(reports: list[MetricsReport]) -> dict:
    """Means over tasks; localization averages over trajectories that
    surfaced at least one gold doc (matched gold documents only)."""
    if not reports:
        return {"task_count": 0}
    localized = [r.localization for r in reports if r.localization is not None]
    retained = [r.retained_coverage for r in reports if r.retained_coverage is not None]
    merged_commands_hist: dict[str, float] = {}
    for r in reports:
        for intent, frac in r.intent_histogram.items():
            merged_commands_hist[intent] = merged_commands_hist.get(intent, 0.0) + frac
    for intent in merged_commands_hist:
        merged_commands_hist[intent] /= len(reports)
    return {
        "task_count": len(reports),
        "coverage_any": sum(r.coverage_any for r in reports) / len(reports),
        "coverage_mean": sum(r.coverage_mean for r in reports) / len(reports),
        "coverage_all": sum(r.coverage_all for r in reports) / len(reports),
        "localization": sum(localized) / len(localized) if localized else None,
        "retained_coverage": sum(retained) / len(retained) if retained else None,
        "avg_tool_calls": sum(r.tool_call_count for r in reports) / len(reports),
        "intent_histogram": merged_commands_hist,
        "c_seg": reports[0].c_seg,
        "read_overlap_threshold": reports[0].read_overlap_threshold,
    }


def classify_command(command: str) -> str:
    """Public alias kept next to the other trajectory metrics."""
    return classify_intent(command)
