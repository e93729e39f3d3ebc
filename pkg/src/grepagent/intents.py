"""Deterministic first-match classification of bash commands into the ten
search-behavior intents observed in agent trajectories, plus "other"."""

from __future__ import annotations

import re
import shlex

SEARCH_PLUS_LIMIT = "search_plus_limit"
CHAINED_SEARCH = "chained_search"
AGGREGATION_COUNT = "aggregation_count"
SINGLE_KEYWORD_SEARCH = "single_keyword_search"
DIRECTORY_LISTING = "directory_listing"
INLINE_SCRIPTING = "inline_scripting"
FILE_LOCALIZATION = "file_localization"
FULL_DOCUMENT_READ = "full_document_read"
LOCAL_CONTEXT_PEEK = "local_context_peek"
REGEX_MATCH = "regex_match"
OTHER = "other"

INTENTS = (
    SEARCH_PLUS_LIMIT,
    CHAINED_SEARCH,
    AGGREGATION_COUNT,
    SINGLE_KEYWORD_SEARCH,
    DIRECTORY_LISTING,
    INLINE_SCRIPTING,
    FILE_LOCALIZATION,
    FULL_DOCUMENT_READ,
    LOCAL_CONTEXT_PEEK,
    REGEX_MATCH,
    OTHER,
)

_SEARCH_CMDS = {"rg", "grep", "egrep", "fgrep", "zgrep"}
_LIMIT_CMDS = {"head", "tail"}
_LIST_CMDS = {"ls", "find"}
_INTERP_CMDS = {"python", "python2", "python3", "perl", "ruby", "node"}
_READ_CMDS = {"cat", "tac"}
_REGEX_METACHARS = set(".^$*+?()[]{}|\\")
_SED_RANGE_RE = re.compile(r"^\d+(,\d+|,\$)?p$")


def _split_stages(command: str) -> list[list[str]]:
    """Flatten the command into pipeline stages (token lists), splitting on
    |, ;, &&, and ||, outside of quotes."""
    stages: list[str] = []
    current: list[str] = []
    quote: str | None = None
    i = 0
    text = command
    while i < len(text):
        ch = text[i]
        if quote:
            current.append(ch)
            if ch == quote:
                quote = None
            i += 1
            continue
        if ch in "'\"":
            quote = ch
            current.append(ch)
            i += 1
            continue
        if ch == "|" and i + 1 < len(text) and text[i + 1] == "|":
            stages.append("".join(current))
            current = []
            i += 2
            continue
        if ch in "|;" or (ch == "&" and i + 1 < len(text) and text[i + 1] == "&"):
            stages.append("".join(current))
            current = []
            i += 2 if ch == "&" else 1
            continue
        current.append(ch)
        i += 1
    stages.append("".join(current))
    tokenized = []
    for stage in stages:
        stage = stage.strip()
        if not stage:
            continue
        try:
            tokens = shlex.split(stage, posix=True)
        except ValueError:
            tokens = stage.split()
        # skip leading environment assignments
        while tokens and re.match(r"^[A-Za-z_][A-Za-z0-9_]*=", tokens[0]):
            tokens = tokens[1:]
        if tokens:
            tokenized.append(tokens)
    return tokenized


def _cmd(stage: list[str]) -> str:
    return stage[0].rsplit("/", 1)[-1] if stage else ""


def _is_limit(stage: list[str]) -> bool:
    cmd = _cmd(stage)
    if cmd in _LIMIT_CMDS:
        return True
    if cmd == "sed" and "-n" in stage:
        return any(_SED_RANGE_RE.match(tok.strip("'\"")) for tok in stage[1:])
    return False


def _is_interp(stage: list[str]) -> bool:
    if _cmd(stage) not in _INTERP_CMDS:
        return False
    return "-c" in stage or "-e" in stage or "-" in stage[1:] or any("<<" in t for t in stage)


def _positionals(stage: list[str]) -> list[str]:
    """Non-flag arguments of a search stage, skipping flag values."""
    out = []
    skip_next = False
    takes_value = {"-m", "-A", "-B", "-C", "-g", "--glob", "-t", "--type", "--type-add", "-e", "-f"}
    for tok in stage[1:]:
        if skip_next:
            skip_next = False
            continue
        if tok in takes_value:
            skip_next = True
            continue
        if tok.startswith("-"):
            continue
        out.append(tok)
    return out


def _targets_single_file(stage: list[str]) -> bool:
    paths = _positionals(stage)[1:]  # first positional is the pattern
    if len(paths) != 1:
        return False
    base = paths[0].rstrip("/").rsplit("/", 1)[-1]
    if base in (".", ".."):
        return False
    return "." in base


def classify_intent(command: str) -> str:
    """Total, deterministic, first rule that fires wins."""
    stages = _split_stages(command)
    if not stages:
        return OTHER
    search_indices = [i for i, s in enumerate(stages) if _cmd(s) in _SEARCH_CMDS]

    # 1. limit stage after a search stage
    if search_indices:
        first_search = search_indices[0]
        for i in range(first_search + 1, len(stages)):
            if _is_limit(stages[i]):
                if _targets_single_file(stages[first_search]):
                    return LOCAL_CONTEXT_PEEK
                return SEARCH_PLUS_LIMIT

    # 2. two search stages
    if len(search_indices) >= 2:
        return CHAINED_SEARCH

    # 3. counting / aggregation
    for i, stage in enumerate(stages):
        if _cmd(stage) == "wc":
            return AGGREGATION_COUNT
        if (
            _cmd(stage) == "uniq"
            and "-c" in stage
            and i > 0
            and _cmd(stages[i - 1]) == "sort"
        ):
            return AGGREGATION_COUNT

    # 4. bare search with one pattern
    if len(stages) == 1 and search_indices:
        positionals = _positionals(stages[0])
        pattern = positionals[0] if positionals else ""
        if any(ch in _REGEX_METACHARS for ch in pattern):
            return REGEX_MATCH
        return SINGLE_KEYWORD_SEARCH

    # 5. listing / locating files
    first_cmd = _cmd(stages[0])
    if first_cmd in _LIST_CMDS:
        if first_cmd == "find" or search_indices:
            return FILE_LOCALIZATION
        return DIRECTORY_LISTING

    # 6. inline interpreter scripts
    if any(_is_interp(s) for s in stages):
        return INLINE_SCRIPTING

    # 7. whole-document reads
    if any(_cmd(s) in _READ_CMDS for s in stages):
        return FULL_DOCUMENT_READ

    return OTHER


def intent_histogram(commands: list[str]) -> dict[str, float]:
    """Fraction of commands per intent; fractions sum to 1 when non-empty."""
    if not commands:
        return {}
    counts = {intent: 0 for intent in INTENTS}
    for command in commands:
        counts[classify_intent(command)] += 1
    total = len(commands)
    return {intent: count / total for intent, count in counts.items()}
