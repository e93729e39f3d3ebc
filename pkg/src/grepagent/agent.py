"""The agent session loop.

Renders the task prompt, calls a pluggable chat client with the active tool
profile's definitions, executes requested tool calls through the sandboxed
executor, applies the context policy after each round, and terminates when
the model produces a parseable final answer or a budget trips.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from .clients import ChatClient, ClientError
from .context import (
    ContextPolicy,
    SessionState,
    ToolCallRecord,
    Turn,
    apply_policy,
)
from .corpus import CorpusManifest
from .prompts import ANSWER_NOW_SUFFIX, render_prompt
from .toolkit import (
    DEFAULT_TOOL_CALL_BUDGET,
    SandboxConfig,
    ToolExecutor,
    ToolProfile,
)

TERMINATION_ANSWERED = "answered"
TERMINATION_TURN_BUDGET = "turn_budget"
TERMINATION_TOOL_BUDGET = "tool_budget"
TERMINATION_CLIENT_ERROR = "client_error"

MAX_RANKED_DOCS = 20


@dataclass(frozen=True)
class AgentConfig:
    tool_profile: ToolProfile
    context_policy: ContextPolicy
    model_name: str = "scripted"
    reasoning_effort: str = "medium"
    max_turns: int = 300
    prompt_kind: str = "qa"
    tool_budget: int = DEFAULT_TOOL_CALL_BUDGET
    corpus_label: str = "corpus"

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass(frozen=True)
class FinalAnswer:
    exact_answer: str
    explanation: str = ""
    confidence: int = 100
    ranked_docs: tuple[str, ...] = ()


@dataclass
class TrajectoryTurn:
    turn_index: int
    role: str  # "user" | "assistant" | "tool_call" | "tool"
    inline_text: str | None = None
    tool_name: str | None = None
    args: dict | None = None
    seq: int | None = None
    omitted_chars: int = 0
    exit_status: int | None = None
    log_ref: str | None = None
    token_usage: tuple[int, int] | None = None
    wall_time: float = 0.0


@dataclass
class Trajectory:
    task_id: str
    turns: list[TrajectoryTurn] = field(default_factory=list)
    final_answer: FinalAnswer | None = None
    termination: str = TERMINATION_CLIENT_ERROR
    rounds: int = 0
    tool_call_count: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    wall_time: float = 0.0
    model_name: str = ""
    policy_level: str = ""
    profile_preset: str = ""
    executed_tools: frozenset[str] = frozenset()
    final_state: SessionState | None = None
    ranking_warnings: tuple[str, ...] = ()

    def bash_commands(self) -> list[str]:
        return [
            t.args.get("command", "")
            for t in self.turns
            if t.role == "tool_call" and t.tool_name == "bash" and t.args
        ]


_SECTION_NAMES = ("explanation", "exact answer", "confidence", "relevant documents")
_SECTION_RE = re.compile(
    r"(?im)^[ \t>#*]*(explanation|exact answer|confidence|relevant documents[^:\n]*)\s*\**\s*:[ \t]*",
)
_CONFIDENCE_RE = re.compile(r"(\d+(?:\.\d+)?)")


def _split_sections(text: str) -> dict[str, str]:
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        name = m.group(1).lower()
        for canonical in _SECTION_NAMES:
            if name.startswith(canonical):
                name = canonical
                break
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        if name not in sections:
            sections[name] = text[m.end() : end].strip()
    return sections


def parse_answer(text: str) -> FinalAnswer | None:
    """Extract the structured final answer; None means "not final yet"."""
    sections = _split_sections(text or "")
    exact = sections.get("exact answer", "").strip().strip("*").strip()
    if not exact:
        return None
    confidence = 100
    if "confidence" in sections:
        m = _CONFIDENCE_RE.search(sections["confidence"])
        if m:
            confidence = max(0, min(100, int(float(m.group(1)))))
    return FinalAnswer(
        exact_answer=exact,
        explanation=sections.get("explanation", ""),
        confidence=confidence,
    )


_RANK_ITEM_RE = re.compile(r"(?m)^\s*\d+[.)]\s*(.+?)\s*$")


def parse_ranking(
    text: str, manifest: CorpusManifest, corpus_label: str = ""
) -> tuple[list[str], list[str]]:
    """Extract the ranked document list from an IR-mode answer.

    Paths are normalized against the manifest (the corpus label prefix is
    stripped); unknown entries are dropped with a warning, duplicates keep
    their first position, and the list is cut to 20 entries.
    """
    sections = _split_sections(text or "")
    source = sections.get("relevant documents", text or "")
    ranked: list[str] = []
    warnings: list[str] = []
    seen: set[str] = set()
    for m in _RANK_ITEM_RE.finditer(source):
        raw = m.group(1).strip().strip("`").strip()
        raw = raw.strip("[]").lstrip("@")
        doc_id = _normalize_doc_path(raw, manifest, corpus_label)
        if doc_id is None:
            warnings.append(f"ranked path not in corpus: {raw}")
            continue
        if doc_id in seen:
            continue
        seen.add(doc_id)
        ranked.append(doc_id)
        if len(ranked) == MAX_RANKED_DOCS:
            break
    return ranked, warnings


def _normalize_doc_path(raw: str, manifest: CorpusManifest, corpus_label: str) -> str | None:
    candidates = [raw]
    if corpus_label and raw.startswith(corpus_label + "/"):
        candidates.append(raw[len(corpus_label) + 1 :])
    if "/" in raw:
        candidates.append(raw.split("/", 1)[1])
    for cand in candidates:
        if cand in manifest:
            return cand
    return None


TOOL_DEFINITIONS: dict[str, dict] = {
    "bash": {
        "type": "function",
        "function": {
            "name": "bash",
            "description": "Run a shell command in the corpus working directory and return its output.",
            "parameters": {
                "type": "object",
                "properties": {
                    "command": {"type": "string", "description": "The command to run"},
                    "timeout": {"type": "integer", "description": "Timeout in milliseconds"},
                },
                "required": ["command"],
            },
        },
    },
    "read": {
        "type": "function",
        "function": {
            "name": "read",
            "description": "Read a file from the corpus with line numbers.",
            "parameters": {
                "type": "object",
                "properties": {
                    "path": {"type": "string", "description": "Corpus-relative file path"},
                    "offset": {"type": "integer", "description": "1-based first line to read"},
                    "limit": {"type": "integer", "description": "Number of lines to read"},
                },
                "required": ["path"],
            },
        },
    },
    "grep": {
        "type": "function",
        "function": {
            "name": "grep",
            "description": "Search corpus files with a regular expression.",
            "parameters": {
                "type": "object",
                "properties": {
                    "pattern": {"type": "string", "description": "Regex pattern"},
                    "path": {"type": "string", "description": "File or directory to search"},
                    "output_mode": {
                        "type": "string",
                        "enum": ["content", "files_with_matches"],
                    },
                    "head_limit": {"type": "integer", "description": "Max entries to return"},
                    "-i": {"type": "boolean", "description": "Case-insensitive match"},
                    "-C": {"type": "integer", "description": "Context lines around matches"},
                },
                "required": ["pattern"],
            },
        },
    },
}


def tool_definitions(profile: ToolProfile, extra: dict[str, dict] | None = None) -> list[dict]:
    defs = dict(TOOL_DEFINITIONS)
    if extra:
        defs.update(extra)
    return [defs[name] for name in sorted(profile.allowed_tools) if name in defs]


def render_messages(state: SessionState) -> list[dict]:
    """Map the live session turns onto chat-completion messages."""
    messages: list[dict] = []
    for turn in state.turns:
        if turn.role == "assistant":
            msg: dict = {"role": "assistant", "content": turn.content}
            if turn.tool_calls:
                msg["tool_calls"] = [
                    {
                        "id": f"call_{c.seq}",
                        "type": "function",
                        "function": {
                            "name": c.name,
                            "arguments": json.dumps(c.args, sort_keys=True),
                        },
                    }
                    for c in turn.tool_calls
                ]
            messages.append(msg)
        elif turn.role == "tool":
            messages.append(
                {
                    "role": "tool",
                    "tool_call_id": f"call_{turn.tool_seq}",
                    "content": turn.content,
                }
            )
        else:
            messages.append({"role": turn.role, "content": turn.content})
    return messages


def run_session(
    task_id: str,
    question: str,
    config: AgentConfig,
    client: ChatClient,
    manifest: CorpusManifest,
    session_dir: Path,
    sandbox: SandboxConfig | None = None,
    extra_tools: dict | None = None,
) -> Trajectory:
    """Run one task to completion and return the recorded trajectory.

    ``extra_tools`` maps tool name -> (definition, runner) for registered
    extension tools such as the retrieval search tool.
    """
    started = time.monotonic()
    session_dir = Path(session_dir)
    session_dir.mkdir(parents=True, exist_ok=True)
    if sandbox is None:
        sandbox = SandboxConfig(corpus_root=manifest.fs_root)
    executor = ToolExecutor(
        sandbox,
        log_dir=session_dir,
        per_result_cap=config.context_policy.per_result_cap,
    )
    extra_defs: dict[str, dict] = {}
    if extra_tools:
        for name, (definition, runner) in extra_tools.items():
            executor.register_tool(name, runner)
            extra_defs[name] = definition

    prompt = render_prompt(config.prompt_kind, config.corpus_label, question)
    state = SessionState()
    state.append(Turn(role="user", content=prompt))
    tool_defs = tool_definitions(config.tool_profile, extra_defs)

    trajectory = Trajectory(
        task_id=task_id,
        model_name=config.model_name,
        policy_level=config.context_policy.level,
        profile_preset=config.tool_profile.preset,
    )
    trajectory.turns.append(TrajectoryTurn(turn_index=0, role="user", inline_text=prompt))
    executed: set[str] = set()

    def record(turn: TrajectoryTurn) -> None:
        turn.turn_index = len(trajectory.turns)
        trajectory.turns.append(turn)

    def do_completion(messages: list[dict], tools):
        response = client.complete(messages, tools)
        trajectory.input_tokens += response.input_tokens
        trajectory.output_tokens += response.output_tokens
        return response

    termination: str | None = None
    answer: FinalAnswer | None = None

    while trajectory.rounds < config.max_turns:
        round_started = time.monotonic()
        try:
            response = do_completion(render_messages(state), tool_defs)
        except ClientError:
            termination = TERMINATION_CLIENT_ERROR
            break
        trajectory.rounds += 1

        if response.tool_calls:
            # Tool calls take precedence; any text rides along as reasoning.
            calls: list[ToolCallRecord] = []
            results = []
            for req in response.tool_calls:
                if config.tool_profile.allows(req.name):
                    result = executor.execute(req.name, req.args)
                    executed.add(req.name)
                else:
                    result = executor.deny(req.name, f"tool not in profile: {req.name}")
                call = ToolCallRecord(seq=executor.seq, name=req.name, args=req.args)
                calls.append(call)
                results.append((call, result))
            assistant_turn = Turn(
                role="assistant", content=response.text or "", tool_calls=tuple(calls)
            )
            state.append(assistant_turn)
            record(
                TrajectoryTurn(
                    turn_index=0,
                    role="assistant",
                    inline_text=response.text or "",
                    token_usage=(response.input_tokens, response.output_tokens),
                    wall_time=time.monotonic() - round_started,
                )
            )
            for call, result in results:
                state.append(
                    Turn(
                        role="tool",
                        content=result.inline_text,
                        tool_name=call.name,
                        tool_seq=call.seq,
                    )
                )
                record(
                    TrajectoryTurn(
                        turn_index=0,
                        role="tool_call",
                        tool_name=call.name,
                        args=call.args,
                        seq=call.seq,
                    )
                )
                record(
                    TrajectoryTurn(
                        turn_index=0,
                        role="tool",
                        tool_name=call.name,
                        seq=call.seq,
                        inline_text=result.inline_text,
                        omitted_chars=result.omitted_chars,
                        exit_status=result.exit_status,
                        log_ref=result.log_ref,
                        wall_time=result.wall_time,
                    )
                )
                trajectory.tool_call_count += 1
            apply_policy(state, config.context_policy, client)
            if trajectory.tool_call_count >= config.tool_budget:
                termination = TERMINATION_TOOL_BUDGET
                break
            continue

        text = response.text or ""
        state.append(Turn(role="assistant", content=text))
        record(
            TrajectoryTurn(
                turn_index=0,
                role="assistant",
                inline_text=text,
                token_usage=(response.input_tokens, response.output_tokens),
                wall_time=time.monotonic() - round_started,
            )
        )
        answer = parse_answer(text)
        if answer is not None:
            if config.prompt_kind == "ir":
                ranked, warnings = parse_ranking(text, manifest, config.corpus_label)
                answer = FinalAnswer(
                    exact_answer=answer.exact_answer,
                    explanation=answer.explanation,
                    confidence=answer.confidence,
                    ranked_docs=tuple(ranked),
                )
                trajectory.ranking_warnings = tuple(warnings)
            termination = TERMINATION_ANSWERED
            break
        # Neither tool calls nor a parseable answer: a reasoning turn.

    if termination is None:
        termination = TERMINATION_TURN_BUDGET

    if termination in (TERMINATION_TURN_BUDGET, TERMINATION_TOOL_BUDGET) and answer is None:
        # One last completion with tools disabled, asking for the answer.
        state.append(Turn(role="user", content=ANSWER_NOW_SUFFIX))
        record(TrajectoryTurn(turn_index=0, role="user", inline_text=ANSWER_NOW_SUFFIX))
        try:
            forced_started = time.monotonic()
            response = do_completion(render_messages(state), ())
            text = response.text or ""
            state.append(Turn(role="assistant", content=text))
            record(
                TrajectoryTurn(
                    turn_index=0,
                    role="assistant",
                    inline_text=text,
                    token_usage=(response.input_tokens, response.output_tokens),
                    wall_time=time.monotonic() - forced_started,
                )
            )
            answer = parse_answer(text)
            if answer is not None and config.prompt_kind == "ir":
                ranked, warnings = parse_ranking(text, manifest, config.corpus_label)
                answer = FinalAnswer(
                    exact_answer=answer.exact_answer,
                    explanation=answer.explanation,
                    confidence=answer.confidence,
                    ranked_docs=tuple(ranked),
                )
                trajectory.ranking_warnings = tuple(warnings)
        except ClientError:
            pass

    trajectory.final_answer = answer
    trajectory.termination = termination
    trajectory.executed_tools = frozenset(executed)
    trajectory.final_state = state
    trajectory.wall_time = time.monotonic() - started
    return trajectory


# -- persistence ------------------------------------------------------------


def save_trajectory(trajectory: Trajectory, path: Path) -> None:
    """One JSON record per line; bit-stable across replays except wall_time."""
    meta = {
        "kind": "meta",
        "task_id": trajectory.task_id,
        "model_name": trajectory.model_name,
        "policy_level": trajectory.policy_level,
        "profile_preset": trajectory.profile_preset,
        "termination": trajectory.termination,
        "rounds": trajectory.rounds,
        "tool_call_count": trajectory.tool_call_count,
        "input_tokens": trajectory.input_tokens,
        "output_tokens": trajectory.output_tokens,
        "executed_tools": sorted(trajectory.executed_tools),
        "final_answer": None
        if trajectory.final_answer is None
        else {
            "exact_answer": trajectory.final_answer.exact_answer,
            "explanation": trajectory.final_answer.explanation,
            "confidence": trajectory.final_answer.confidence,
            "ranked_docs": list(trajectory.final_answer.ranked_docs),
        },
        "wall_time": trajectory.wall_time,
    }
    lines = [json.dumps(meta, sort_keys=True, ensure_ascii=False)]
    for turn in trajectory.turns:
        rec = {"kind": "turn", "turn_index": turn.turn_index, "role": turn.role}
        if turn.tool_name is not None:
            rec["tool_name"] = turn.tool_name
        if turn.args is not None:
            rec["args"] = turn.args
        if turn.inline_text is not None:
            rec["inline_text"] = turn.inline_text
        if turn.seq is not None:
            rec["seq"] = turn.seq
        if turn.omitted_chars:
            rec["omitted_chars"] = turn.omitted_chars
        if turn.exit_status is not None:
            rec["exit_status"] = turn.exit_status
        if turn.log_ref is not None:
            rec["log_ref"] = turn.log_ref
        if turn.token_usage is not None:
            rec["token_usage"] = list(turn.token_usage)
        rec["wall_time"] = turn.wall_time
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(path: Path) -> Trajectory:
    trajectory: Trajectory | None = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "meta":
                fa = rec.get("final_answer")
                trajectory = Trajectory(
                    task_id=rec["task_id"],
                    model_name=rec.get("model_name", ""),
                    policy_level=rec.get("policy_level", ""),
                    profile_preset=rec.get("profile_preset", ""),
                    termination=rec.get("termination", ""),
                    rounds=rec.get("rounds", 0),
                    tool_call_count=rec.get("tool_call_count", 0),
                    input_tokens=rec.get("input_tokens", 0),
                    output_tokens=rec.get("output_tokens", 0),
                    executed_tools=frozenset(rec.get("executed_tools", [])),
                    wall_time=rec.get("wall_time", 0.0),
                    final_answer=None
                    if fa is None
                    else FinalAnswer(
                        exact_answer=fa["exact_answer"],
                        explanation=fa.get("explanation", ""),
                        confidence=fa.get("confidence", 100),
                        ranked_docs=tuple(fa.get("ranked_docs", [])),
                    ),
                )
            elif rec.get("kind") == "turn":
                assert trajectory is not None, "turn record before meta record"
                usage = rec.get("token_usage")
                trajectory.turns.append(
                    TrajectoryTurn(
                        turn_index=rec["turn_index"],
                        role=rec["role"],
                        tool_name=rec.get("tool_name"),
                        args=rec.get("args"),
                        inline_text=rec.get("inline_text"),
                        seq=rec.get("seq"),
                        omitted_chars=rec.get("omitted_chars", 0),
                        exit_status=rec.get("exit_status"),
                        log_ref=rec.get("log_ref"),
                        token_usage=None if usage is None else (usage[0], usage[1]),
                        wall_time=rec.get("wall_time", 0.0),
                    )
                )
    if trajectory is None:
        raise ValueError(f"no meta record in trajectory file: {path}")
    return trajectory


def canonical_trajectory_bytes(path: Path) -> bytes:
    """The trajectory file with timing fields removed, for replay comparison."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec.pop("wall_time", None)
            out.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    return ("\n".join(out) + "\n").encode("utf-8")


def save_final_state(state: SessionState, path: Path) -> None:
    lines = []
    for i, turn in enumerate(state.turns):
        rec = {
            "turn_index": i,
            "role": turn.role,
            "content": turn.content,
            "tool_name": turn.tool_name,
            "compacted": turn.compacted,
        }
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_final_state(path: Path) -> SessionState:
    state = SessionState()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            state.append(
                Turn(
                    role=rec["role"],
                    content=rec["content"],
                    tool_name=rec.get("tool_name"),
                    compacted=rec.get("compacted", False),
                )
            )
    return state
