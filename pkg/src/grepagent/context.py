"""Runtime context management: truncation, compaction, and summarization.

Five policy levels with fixed thresholds:

  L0  nothing
  L1  per-result truncation at 50,000 chars
  L2  per-result truncation at 20,000 chars
  L3  L2 + compaction once accumulated tool output exceeds 240,000 chars,
      sparing the most recent 12 turns
  L4  L3 + model-generated summarization when estimated context tokens
      exceed a threshold, retaining the most recent 20,000 tokens and
      giving up after 3 consecutive summarization failures

Compaction is a zero-LLM operation: it replaces the contents of older
tool-result turns with short placeholders that keep the tool-call structure
visible. Summarization replaces the compacted prefix with one model-written
summary turn.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .clients import ChatClient

TRUNCATION_MARKER_TEMPLATE = "\n[...truncated, {omitted} chars omitted]"
_TRUNCATION_MARKER_RE = re.compile(r"\n\[\.\.\.truncated, (\d+) chars omitted\]$")

PLACEHOLDER_TEMPLATE = "[tool result compacted: {tool} output, {length} chars]"
_PLACEHOLDER_RE = re.compile(r"^\[tool result compacted: .* output, \d+ chars\]$")

CHARS_PER_TOKEN = 4

SUMMARY_PROMPT = (
    "Summarize the investigation so far for your own future reference. Cover:\n"
    "- entities and facts discovered, with the document paths that support them\n"
    "- constraints established or ruled out\n"
    "- search angles that turned out to be dead ends\n"
    "- the next steps you had planned\n"
    "Reply with the summary only."
)
SUMMARY_HEADER = "[summary of earlier conversation]\n"


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class ContextPolicy:
    level: str
    per_result_cap: int | None = None
    compaction_trigger: int | None = None
    keep_recent_turns: int = 12
    summarization_token_threshold: int | None = None
    retain_recent_tokens: int = 20_000
    max_consecutive_summary_failures: int = 3

    @property
    def truncation_enabled(self) -> bool:
        return self.per_result_cap is not None

    @property
    def compaction_enabled(self) -> bool:
        return self.compaction_trigger is not None

    @property
    def summarization_enabled(self) -> bool:
        return self.summarization_token_threshold is not None


# The L4 token threshold is not fixed by the level definition; 160K sits
# comfortably under common 200K context windows and is overridable.
DEFAULT_L4_TOKEN_THRESHOLD = 160_000

POLICY_PRESETS: dict[str, ContextPolicy] = {
    "L0": ContextPolicy(level="L0"),
    "L1": ContextPolicy(level="L1", per_result_cap=50_000),
    "L2": ContextPolicy(level="L2", per_result_cap=20_000),
    "L3": ContextPolicy(level="L3", per_result_cap=20_000, compaction_trigger=240_000),
    "L4": ContextPolicy(
        level="L4",
        per_result_cap=20_000,
        compaction_trigger=240_000,
        summarization_token_threshold=DEFAULT_L4_TOKEN_THRESHOLD,
    ),
}


def policy_from_level(level: str, **overrides) -> ContextPolicy:
    try:
        preset = POLICY_PRESETS[level.upper()]
    except KeyError:
        raise PolicyError(f"unknown policy level: {level!r} (expected L0..L4)") from None
    return replace(preset, **overrides) if overrides else preset


@dataclass(frozen=True)
class ToolCallRecord:
    """One tool call requested in an assistant turn."""

    seq: int
    name: str
    args: dict


@dataclass
class Turn:
    role: str  # "user" | "assistant" | "tool"
    content: str
    tool_name: str | None = None
    tool_seq: int | None = None
    tool_calls: tuple[ToolCallRecord, ...] = ()
    compacted: bool = False
    original_length: int | None = None

    @property
    def is_tool_result(self) -> bool:
        return self.role == "tool"


@dataclass
class SessionState:
    """The live working context of one session. Owned by exactly one session."""

    turns: list[Turn] = field(default_factory=list)
    summary_failure_streak: int = 0
    summarization_suppressed: bool = False
    compaction_events: int = 0
    summarization_events: int = 0

    @property
    def accumulated_tool_chars(self) -> int:
        return sum(len(t.content) for t in self.turns if t.is_tool_result)

    def append(self, turn: Turn) -> None:
        self.turns.append(turn)


def truncate_result(raw: str, cap: int) -> str:
    """Cap ``raw`` at ``cap`` characters, appending an omission marker.

    Idempotent: text that already carries a marker over a within-cap body is
    returned unchanged.
    """
    if cap < 1:
        raise PolicyError(f"per-result cap must be >= 1, got {cap}")
    if len(raw) <= cap:
        return raw
    m = _TRUNCATION_MARKER_RE.search(raw)
    if m and m.start() <= cap:
        return raw
    omitted = len(raw) - cap
    return raw[:cap] + TRUNCATION_MARKER_TEMPLATE.format(omitted=omitted)


def omitted_chars_of(inline_text: str, full_length: int) -> int:
    """full_length minus the portion of the raw output kept before the marker."""
    m = _TRUNCATION_MARKER_RE.search(inline_text)
    if not m:
        return 0
    return full_length - m.start()


def strip_truncation_marker(inline_text: str) -> str:
    m = _TRUNCATION_MARKER_RE.search(inline_text)
    return inline_text[: m.start()] if m else inline_text


def estimate_tokens(state: SessionState) -> int:
    """Deterministic chars/4 estimate over all turn contents, rounded up."""
    total = sum(len(t.content) for t in state.turns)
    return math.ceil(total / CHARS_PER_TOKEN)


def _estimate_turn_tokens(turn: Turn) -> int:
    return math.ceil(len(turn.content) / CHARS_PER_TOKEN)


def compact(state: SessionState, policy: ContextPolicy) -> SessionState:
    """Placeholder older tool-result turns once accumulated output exceeds
    the trigger. The most recent ``keep_recent_turns`` turns are untouched;
    turn count, roles, and tool-call records are preserved exactly."""
    if not policy.compaction_enabled:
        return state
    assert policy.compaction_trigger is not None
    if state.accumulated_tool_chars <= policy.compaction_trigger:
        return state
    cutoff = max(0, len(state.turns) - policy.keep_recent_turns)
    changed = False
    for turn in state.turns[:cutoff]:
        if not turn.is_tool_result or turn.compacted:
            continue
        turn.original_length = len(turn.content)
        turn.content = PLACEHOLDER_TEMPLATE.format(
            tool=turn.tool_name or "tool", length=turn.original_length
        )
        turn.compacted = True
        changed = True
    if changed:
        state.compaction_events += 1
    return state


def _summary_split_index(state: SessionState, policy: ContextPolicy) -> int:
    """Index of the first turn of the preserved suffix.

    The suffix is the largest run of trailing turns whose estimated tokens
    fit within retain_recent_tokens (always at least the final turn). The
    leading user turn carrying the task itself is never summarized away.
    """
    head = 1 if state.turns and state.turns[0].role == "user" else 0
    budget = policy.retain_recent_tokens
    split = len(state.turns)
    spent = 0
    for i in range(len(state.turns) - 1, head - 1, -1):
        spent += _estimate_turn_tokens(state.turns[i])
        if spent > budget and split < len(state.turns):
            break
        split = i
    return max(split, head)


def summarize(state: SessionState, policy: ContextPolicy, llm: "ChatClient") -> SessionState:
    """Replace the compacted prefix with a single model-generated summary turn.

    Client failures increment a streak; after max_consecutive_summary_failures
    with no intervening success, summarization is suppressed for the session.
    """
    if not policy.summarization_enabled or state.summarization_suppressed:
        return state
    assert policy.summarization_token_threshold is not None
    if estimate_tokens(state) <= policy.summarization_token_threshold:
        return state
    head = 1 if state.turns and state.turns[0].role == "user" else 0
    split = _summary_split_index(state, policy)
    if split <= head:
        return state
    prefix = state.turns[head:split]
    rendered = "\n\n".join(
        f"[{t.role}{' ' + t.tool_name if t.tool_name else ''}]\n{t.content}" for t in prefix
    )
    messages = [
        {"role": "user", "content": SUMMARY_PROMPT + "\n\nConversation so far:\n\n" + rendered},
    ]
    try:
        response = llm.complete(messages, tools=())
        summary_text = (response.text or "").strip()
        if not summary_text:
            raise ValueError("empty summary")
    except Exception:
        state.summary_failure_streak += 1
        if state.summary_failure_streak >= policy.max_consecutive_summary_failures:
            state.summarization_suppressed = True
        return state
    state.summary_failure_streak = 0
    summary_turn = Turn(role="user", content=SUMMARY_HEADER + summary_text)
    state.turns[head:split] = [summary_turn]
    state.summarization_events += 1
    return state


def apply_policy(state: SessionState, policy: ContextPolicy, llm: "ChatClient | None" = None) -> SessionState:
    """Run the per-turn pipeline: compaction, then summarization.

    Truncation has already happened at the tool boundary. Summarization is
    only attempted once compaction has fired at least once in the session.
    """
    compact(state, policy)
    if policy.summarization_enabled and llm is not None and state.compaction_events >= 1:
        summarize(state, policy, llm)
    return state


def is_placeholder(content: str) -> bool:
    return bool(_PLACEHOLDER_RE.match(content))

