"""Corpus ingestion and lookup for the two supported layouts.

A corpus is either a directory tree of UTF-8 text files (one document per
file, doc_id = path relative to the root) or a JSON-lines file (one record
per line with integer "id" and text "contents", doc_id = id as text).
JSON-lines documents are indexed by byte offset and loaded lazily so that
multi-million-line dumps never have to fit in memory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

BINARY_SNIFF_BYTES = 8192


class CorpusError(Exception):
    """Base class for corpus ingestion and lookup failures."""


class EmptyCorpusError(CorpusError):
    pass


class DocumentNotFoundError(CorpusError):
    pass


class JsonlParseError(CorpusError):
    def __init__(self, path: Path, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.line_number = line_number


class DuplicateIdError(CorpusError):
    pass


class DistractorShortfallError(CorpusError):
    def __init__(self, missing: int):
        super().__init__(f"distractor source exhausted: {missing} more document(s) needed")
        self.missing = missing


@dataclass(frozen=True)
class Document:
    """One corpus document with its identity and raw text."""

    doc_id: str
    contents: str

    @property
    def char_length(self) -> int:
        return len(self.contents)

    @property
    def word_count(self) -> int:
        return len(self.contents.split())


@dataclass(frozen=True)
class _Entry:
    """Locator for one document: a file, a byte offset into a JSONL file,
    or inline text (used for documents injected from in-memory sources)."""

    path: Path | None = None
    offset: int = -1
    inline: str | None = None


@dataclass(frozen=True)
class CorpusManifest:
    """Immutable registry mapping doc ids to document locators.

    Safe to share across concurrent sessions; lookups never touch paths
    outside the ingested roots.
    """

    root: Path
    layout: str  # "tree" | "jsonl"
    id_index: dict[str, _Entry]
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def doc_count(self) -> int:
        return len(self.id_index)

    @property
    def fs_root(self) -> Path:
        """Directory the agent's tools treat as the working directory."""
        return self.root if self.layout == "tree" else self.root.parent

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.id_index

    def doc_ids(self) -> list[str]:
        return list(self.id_index)

    def iter_documents(self) -> Iterator[Document]:
        """Documents in manifest order; JSONL entries stream the file once
        instead of seeking per lookup."""
        jsonl_ids = [
            doc_id
            for doc_id, e in self.id_index.items()
            if e.offset >= 0 and e.path == self.root
        ]
        if self.layout == "jsonl" and len(jsonl_ids) == len(self.id_index):
            with open(self.root, "rb") as fh:
                offsets = sorted(
                    (self.id_index[d].offset, d) for d in jsonl_ids
                )
                for offset, doc_id in offsets:
                    fh.seek(offset)
                    record = json.loads(fh.readline().decode("utf-8", errors="replace"))
                    yield Document(doc_id, record["contents"])
            return
        for doc_id in self.id_index:
            yield self.lookup(doc_id)

    def lookup(self, doc_id: str) -> Document:
        entry = self.id_index.get(doc_id)
        if entry is None:
            raise DocumentNotFoundError(f"unknown doc id: {doc_id!r}")
        if entry.inline is not None:
            return Document(doc_id, entry.inline)
        assert entry.path is not None
        if entry.offset >= 0:
            with open(entry.path, "rb") as fh:
                fh.seek(entry.offset)
                raw = fh.readline()
            record = json.loads(raw.decode("utf-8", errors="replace"))
            return Document(doc_id, record["contents"])
        # Hostile ids ("../x") are rejected above: only paths recorded at
        # ingest or injection time ever appear in id_index.
        return Document(doc_id, _read_text(entry.path))


def _is_within(path: Path, root: Path) -> bool:
    try:
        path.relative_to(root)
        return True
    except ValueError:
        return False


def _read_text(path: Path) -> str:
    data = path.read_bytes()
    return data.decode("utf-8", errors="replace")


def _looks_binary(path: Path) -> bool:
    # A NUL byte in the first 8 KiB marks the file as binary and it is skipped.
    with open(path, "rb") as fh:
        return b"\x00" in fh.read(BINARY_SNIFF_BYTES)


def ingest_tree(root: str | os.PathLike) -> CorpusManifest:
    """Enumerate every regular text file under ``root`` recursively.

    doc_id is the path relative to the root, in posix form. Binary files
    are skipped with a warning recorded on the manifest.
    """
    root_path = Path(root)
    if not root_path.is_dir() or not os.access(root_path, os.R_OK):
        raise CorpusError(f"corpus root not readable: {root_path}")
    index: dict[str, _Entry] = {}
    warnings: list[str] = []
    for path in sorted(root_path.rglob("*")):
        if not path.is_file() or path.is_symlink():
            continue
        rel = path.relative_to(root_path).as_posix()
        if _looks_binary(path):
            warnings.append(f"skipped binary file: {rel}")
            continue
        index[rel] = _Entry(path=path)
    if not index:
        raise EmptyCorpusError(f"no text documents under {root_path}")
    return CorpusManifest(root=root_path, layout="tree", id_index=index, warnings=tuple(warnings))


def ingest_jsonl(path: str | os.PathLike) -> CorpusManifest:
    """Index a JSON-lines corpus by byte offset without retaining contents.

    Each non-empty line must be a JSON object with an integer "id" and a
    text "contents" field. Documents are loaded lazily on lookup.
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise CorpusError(f"corpus file not found: {file_path}")
    index: dict[str, _Entry] = {}
    offset = 0
    with open(file_path, "rb") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line_offset = offset
            offset += len(raw)
            if not raw.strip():
                continue
            try:
                record = json.loads(raw.decode("utf-8", errors="replace"))
            except json.JSONDecodeError as exc:
                raise JsonlParseError(file_path, line_number, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise JsonlParseError(file_path, line_number, "record is not an object")
            if "id" not in record or not isinstance(record["id"], int) or isinstance(record["id"], bool):
                raise JsonlParseError(file_path, line_number, 'missing or non-integer "id" field')
            if "contents" not in record or not isinstance(record["contents"], str):
                raise JsonlParseError(file_path, line_number, 'missing or non-text "contents" field')
            doc_id = str(record["id"])
            if doc_id in index:
                raise DuplicateIdError(f"{file_path}:{line_number}: duplicate id {doc_id}")
            index[doc_id] = _Entry(path=file_path, offset=line_offset)
    if not index:
        raise EmptyCorpusError(f"no records in {file_path}")
    return CorpusManifest(root=file_path, layout="jsonl", id_index=index)


def ingest(path: str | os.PathLike, layout: str = "auto") -> CorpusManifest:
    """Ingest ``path`` as the requested layout, or sniff it when "auto"."""
    p = Path(path)
    if layout == "auto":
        layout = "jsonl" if p.is_file() else "tree"
    if layout == "tree":
        return ingest_tree(p)
    if layout == "jsonl":
        return ingest_jsonl(p)
    raise CorpusError(f"unknown corpus layout: {layout!r}")


DISTRACTOR_ID_TEMPLATE = "distractor/{k}.txt"


def inject_distractors(
    manifest: CorpusManifest,
    extra_docs: CorpusManifest | Iterable[Document],
    target_count: int,
) -> CorpusManifest:
    """Return a new manifest padded to ``target_count`` documents.

    Original documents keep their ids and locators untouched. Injected
    documents receive sequential ids "distractor/<k>.txt"; an id already
    present in the corpus is rewritten by appending "-dup<n>".
    """
    if target_count < manifest.doc_count:
        raise CorpusError(
            f"target_count {target_count} below current doc count {manifest.doc_count}"
        )
    needed = target_count - manifest.doc_count
    index = dict(manifest.id_index)
    if needed:
        source = _iter_entries(extra_docs)
        taken = 0
        for entry in source:
            doc_id = DISTRACTOR_ID_TEMPLATE.format(k=taken)
            if doc_id in index:
                n = 1
                while f"{doc_id}-dup{n}" in index:
                    n += 1
                doc_id = f"{doc_id}-dup{n}"
            index[doc_id] = entry
            taken += 1
            if taken == needed:
                break
        if taken < needed:
            raise DistractorShortfallError(needed - taken)
    return CorpusManifest(
        root=manifest.root,
        layout=manifest.layout,
        id_index=index,
        warnings=manifest.warnings,
    )


def _iter_entries(source: CorpusManifest | Iterable[Document]) -> Iterator[_Entry]:
    if isinstance(source, CorpusManifest):
        yield from source.id_index.values()
        return
    for doc in source:
        yield _Entry(inline=doc.contents)


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    mean_words: float


def corpus_stats(manifest: CorpusManifest) -> CorpusStats:
    """Document count and mean document length in whitespace-split words."""
    if manifest.doc_count == 0:
        raise EmptyCorpusError("cannot compute stats for an empty manifest")
    total_words = 0
    for doc in manifest.iter_documents():
        total_words += doc.word_count
    return CorpusStats(doc_count=manifest.doc_count, mean_words=total_words / manifest.doc_count)


def materialize_tree(manifest: CorpusManifest, out_root: str | os.PathLike) -> Path:
    """Write every manifest document under ``out_root`` as a file tree.

    Used to turn an injected manifest into a corpus that terminal tools can
    actually search. Ids containing path separators become subdirectories.
    """
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    for doc_id in manifest.id_index:
        rel = Path(doc_id)
        if rel.is_absolute() or ".." in rel.parts:
            raise CorpusError(f"refusing to materialize unsafe doc id: {doc_id!r}")
        target = out / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(manifest.lookup(doc_id).contents, encoding="utf-8")
    return out
