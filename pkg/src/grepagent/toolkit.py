"""Sandboxed terminal tools: bash, read, and grep.

read and grep are implemented natively (regex search over the corpus files)
so the restricted tool profile behaves identically on any host; bash
delegates to the host shell with the working directory pinned to the corpus
root. Every tool result is capped by the session's context policy, with the
full raw output spilled to a per-call log file when anything is cut.
"""

from __future__ import annotations

import os
import re
import shlex
import signal
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

from .context import truncate_result, omitted_chars_of
from .corpus import BINARY_SNIFF_BYTES

EXIT_OK = 0
EXIT_NO_MATCH = 1
EXIT_ERROR = 2
EXIT_TIMEOUT = 124
EXIT_DENIED = 126

DEFAULT_BASH_TIMEOUT_MS = 120_000
DEFAULT_READ_LIMIT = 2000
DEFAULT_TOOL_CALL_BUDGET = 200

NETWORK_DENYLIST = frozenset({"curl", "wget", "nc", "ncat", "ssh", "scp", "ping"})
_URL_RE = re.compile(r"https?://", re.IGNORECASE)
# Paths bash commands may touch outside the corpus root (scratch space).
PATH_ALLOWLIST = ("/tmp", "/dev/null", "/dev/stdin", "/dev/stdout", "/dev/stderr")


class ToolError(Exception):
    pass


@dataclass(frozen=True)
class ToolProfile:
    """The set of tools exposed to a session."""

    allowed_tools: frozenset[str]
    preset: str = "custom"

    def allows(self, tool_name: str) -> bool:
        return tool_name in self.allowed_tools

    @classmethod
    def open_bash(cls) -> "ToolProfile":
        return cls(allowed_tools=frozenset({"bash", "read"}), preset="open_bash")

    @classmethod
    def read_grep(cls) -> "ToolProfile":
        return cls(allowed_tools=frozenset({"read", "grep"}), preset="read_grep")

    @classmethod
    def retrieval(cls, with_read: bool = False) -> "ToolProfile":
        tools = {"search", "read"} if with_read else {"search"}
        return cls(allowed_tools=frozenset(tools), preset="retrieval")

    @classmethod
    def from_name(cls, name: str) -> "ToolProfile":
        presets = {
            "open_bash": cls.open_bash,
            "read_grep": cls.read_grep,
            "retrieval": cls.retrieval,
        }
        try:
            return presets[name]()
        except KeyError:
            raise ToolError(f"unknown tool profile: {name!r}") from None


@dataclass(frozen=True)
class ToolResult:
    inline_text: str
    full_length: int
    omitted_chars: int
    log_ref: str | None
    exit_status: int
    wall_time: float


@dataclass(frozen=True)
class SandboxDecision:
    allowed: bool
    reason: str | None = None


@dataclass(frozen=True)
class SandboxConfig:
    """Corpus root plus the directories and commands a session may not touch."""

    corpus_root: Path
    blocked_dirs: tuple[Path, ...] = ()
    extra_denied_commands: frozenset[str] = frozenset()

    def denied_commands(self) -> frozenset[str]:
        return NETWORK_DENYLIST | self.extra_denied_commands


@dataclass
class AuditRecord:
    tool: str
    path: Path
    allowed: bool


def _resolve_under_root(path_text: str, root: Path) -> Path | None:
    """Resolve a tool path argument against the corpus root; None if it escapes."""
    candidate = Path(path_text)
    resolved = candidate.resolve() if candidate.is_absolute() else (root / candidate).resolve()
    root_resolved = root.resolve()
    try:
        resolved.relative_to(root_resolved)
    except ValueError:
        return None
    return resolved


def _in_blocked_dir(path: Path, config: SandboxConfig) -> bool:
    for blocked in config.blocked_dirs:
        blocked_abs = blocked if blocked.is_absolute() else config.corpus_root / blocked
        try:
            path.resolve().relative_to(blocked_abs.resolve())
            return True
        except ValueError:
            continue
    return False


def check_path(path_text: str, config: SandboxConfig) -> SandboxDecision:
    resolved = _resolve_under_root(path_text, config.corpus_root)
    if resolved is None:
        return SandboxDecision(False, f"path escapes corpus root: {path_text}")
    if _in_blocked_dir(resolved, config):
        return SandboxDecision(False, f"path is in a blocked data directory: {path_text}")
    return SandboxDecision(True)


def _command_tokens(command: str) -> list[str]:
    try:
        return shlex.split(command, posix=True)
    except ValueError:
        return command.split()


def check_command(command: str, config: SandboxConfig) -> SandboxDecision:
    """Best-effort static screen of a bash command.

    Denies network-capable commands, URL-shaped arguments, and path
    arguments that resolve outside the corpus root or inside a blocked
    directory. Shell-variable arguments cannot be resolved statically and
    are let through; the guarantee is best-effort by design.
    """
    denied = config.denied_commands()
    for token in _command_tokens(command):
        if token.startswith("-"):
            continue
        base = os.path.basename(token.rstrip(";|&"))
        if base in denied:
            return SandboxDecision(False, f"network command denied: {base}")
        if _URL_RE.search(token):
            return SandboxDecision(False, f"URL argument denied: {token}")
        if token.startswith("$") or "$(" in token or "`" in token:
            continue
        looks_pathy = "/" in token or token == ".." or token.startswith("../") or token.startswith("~")
        if not looks_pathy:
            continue
        if token.startswith("~"):
            return SandboxDecision(False, f"home-relative path denied: {token}")
        if any(token == p or token.startswith(p + "/") for p in PATH_ALLOWLIST):
            continue
        resolved = _resolve_under_root(token, config.corpus_root)
        if resolved is None:
            return SandboxDecision(False, f"path escapes corpus root: {token}")
        if _in_blocked_dir(resolved, config):
            return SandboxDecision(False, f"path is in a blocked data directory: {token}")
    return SandboxDecision(True)


def sandbox_check(request: str, config: SandboxConfig, kind: str = "command") -> SandboxDecision:
    """Gate a command (kind="command") or a single path (kind="path")."""
    if kind == "path":
        return check_path(request, config)
    return check_command(request, config)


_LINE_PREFIX_WIDTH = 6


class ToolExecutor:
    """Executes one session's tool calls. Not shared across sessions.

    Owns the per-call sequence counter, the log directory, and the audit
    trail of every path the native tools resolved.
    """

    def __init__(
        self,
        sandbox: SandboxConfig,
        log_dir: Path,
        per_result_cap: int | None = None,
        default_timeout_ms: int = DEFAULT_BASH_TIMEOUT_MS,
    ):
        self.sandbox = sandbox
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.per_result_cap = per_result_cap
        self.default_timeout_ms = default_timeout_ms
        self.seq = 0
        self.audit_log: list[AuditRecord] = []
        self._registered: dict[str, object] = {}

    def register_tool(self, name: str, runner) -> None:
        """Attach an extension tool; ``runner(args) -> (raw_text, exit_status)``."""
        self._registered[name] = runner

    def deny(self, tool_name: str, reason: str) -> ToolResult:
        self.seq += 1
        return self._denial(tool_name, reason, time.monotonic())

    # -- result assembly ---------------------------------------------------

    def _finish(
        self,
        tool: str,
        raw: str,
        exit_status: int,
        started: float,
        force_log: bool = False,
    ) -> ToolResult:
        inline = raw
        if self.per_result_cap is not None:
            inline = truncate_result(raw, self.per_result_cap)
        omitted = omitted_chars_of(inline, len(raw))
        log_ref = None
        if force_log or omitted > 0:
            log_name = f"{tool}-{self.seq}.log"
            (self.log_dir / log_name).write_text(raw, encoding="utf-8")
            log_ref = log_name
        return ToolResult(
            inline_text=inline,
            full_length=len(raw),
            omitted_chars=omitted,
            log_ref=log_ref,
            exit_status=exit_status,
            wall_time=time.monotonic() - started,
        )

    def _denial(self, tool: str, reason: str, started: float) -> ToolResult:
        return self._finish(tool, f"Denied: {reason}", EXIT_DENIED, started)

    def _audit(self, tool: str, path: Path, allowed: bool) -> None:
        self.audit_log.append(AuditRecord(tool=tool, path=path, allowed=allowed))

    # -- dispatch ----------------------------------------------------------

    def execute(self, tool_name: str, args: dict) -> ToolResult:
        if tool_name in self._registered:
            self.seq += 1
            started = time.monotonic()
            raw, exit_status = self._registered[tool_name](args)
            return self._finish(tool_name, raw, exit_status, started)
        if tool_name == "bash":
            return self.exec_bash(
                args.get("command", ""),
                timeout_ms=int(args.get("timeout") or self.default_timeout_ms),
            )
        if tool_name == "read":
            return self.exec_read(
                args.get("path") or args.get("file_path", ""),
                offset=int(args.get("offset", 1)),
                limit=int(args.get("limit", DEFAULT_READ_LIMIT)),
            )
        if tool_name == "grep":
            return self.exec_grep(
                args.get("pattern", ""),
                args.get("path", "."),
                output_mode=args.get("output_mode", "content"),
                head_limit=args.get("head_limit"),
                ignore_case=bool(args.get("ignore_case", args.get("-i", False))),
                context_lines=int(args.get("context_lines", args.get("-C", 0))),
            )
        self.seq += 1
        started = time.monotonic()
        return self._finish(tool_name, f"Unknown tool: {tool_name}", EXIT_ERROR, started)

    # -- bash ----------------------------------------------------------------

    def exec_bash(self, command: str, timeout_ms: int | None = None) -> ToolResult:
        self.seq += 1
        started = time.monotonic()
        timeout_ms = timeout_ms or self.default_timeout_ms
        decision = check_command(command, self.sandbox)
        if not decision.allowed:
            return self._denial("bash", decision.reason or "denied", started)
        for token in _command_tokens(command):
            if token.startswith("-") or "$" in token or "`" in token:
                continue
            if "/" in token or token.startswith(".."):
                resolved = _resolve_under_root(token, self.sandbox.corpus_root)
                if resolved is not None:
                    self._audit("bash", resolved, allowed=True)
        proc = subprocess.Popen(
            ["bash", "-c", command],
            cwd=self.sandbox.corpus_root,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        timed_out = False
        try:
            out_bytes, _ = proc.communicate(timeout=timeout_ms / 1000.0)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out_bytes, _ = proc.communicate()
        raw = out_bytes.decode("utf-8", errors="replace") if out_bytes else ""
        if timed_out:
            raw += f"\n[command timed out after {timeout_ms} ms]"
            return self._finish("bash", raw, EXIT_TIMEOUT, started, force_log=True)
        return self._finish("bash", raw, proc.returncode, started, force_log=True)

    # -- read ----------------------------------------------------------------

    def exec_read(self, path: str, offset: int = 1, limit: int = DEFAULT_READ_LIMIT) -> ToolResult:
        self.seq += 1
        started = time.monotonic()
        decision = check_path(path, self.sandbox)
        if not decision.allowed:
            return self._denial("read", decision.reason or "denied", started)
        resolved = _resolve_under_root(path, self.sandbox.corpus_root)
        assert resolved is not None
        self._audit("read", resolved, allowed=True)
        if not resolved.is_file():
            return self._finish("read", f"File not found: {path}", EXIT_ERROR, started)
        text = resolved.read_bytes().decode("utf-8", errors="replace")
        lines = text.splitlines()
        offset = max(1, offset)
        window = lines[offset - 1 : offset - 1 + max(0, limit)]
        rendered = "\n".join(
            f"{offset + i:>{_LINE_PREFIX_WIDTH}}->{line}" for i, line in enumerate(window)
        )
        return self._finish("read", rendered, EXIT_OK, started)

    # -- grep ----------------------------------------------------------------

    def exec_grep(
        self,
        pattern: str,
        path: str = ".",
        output_mode: str = "content",
        head_limit: int | None = None,
        ignore_case: bool = False,
        context_lines: int = 0,
    ) -> ToolResult:
        self.seq += 1
        started = time.monotonic()
        decision = check_path(path, self.sandbox)
        if not decision.allowed:
            return self._denial("grep", decision.reason or "denied", started)
        try:
            regex = re.compile(pattern, re.IGNORECASE if ignore_case else 0)
        except re.error as exc:
            return self._finish("grep", f"regex parse error: {exc}", EXIT_ERROR, started)
        resolved = _resolve_under_root(path, self.sandbox.corpus_root)
        assert resolved is not None
        if not resolved.exists():
            return self._finish("grep", f"Path not found: {path}", EXIT_ERROR, started)
        files = self._grep_targets(resolved)
        root = self.sandbox.corpus_root.resolve()

        if output_mode == "files_with_matches":
            hits: list[str] = []
            for file_path in files:
                self._audit("grep", file_path, allowed=True)
                text = file_path.read_bytes().decode("utf-8", errors="replace")
                if any(regex.search(line) for line in text.splitlines()):
                    hits.append(file_path.relative_to(root).as_posix())
                    if head_limit is not None and len(hits) >= head_limit:
                        break
            if not hits:
                return self._finish("grep", "No matches found", EXIT_NO_MATCH, started)
            return self._finish("grep", "\n".join(hits), EXIT_OK, started)

        if output_mode != "content":
            return self._finish(
                "grep", f"unknown output_mode: {output_mode}", EXIT_ERROR, started
            )

        blocks: list[str] = []
        matches = 0
        capped = False
        for file_path in files:
            self._audit("grep", file_path, allowed=True)
            rel = file_path.relative_to(root).as_posix()
            lines = file_path.read_bytes().decode("utf-8", errors="replace").splitlines()
            for lineno, line in enumerate(lines, start=1):
                if not regex.search(line):
                    continue
                entry: list[str] = []
                if context_lines > 0:
                    lo = max(1, lineno - context_lines)
                    hi = min(len(lines), lineno + context_lines)
                    for n in range(lo, hi + 1):
                        sep = ":" if n == lineno else "-"
                        entry.append(f"{rel}{sep}{n}{sep}{lines[n - 1]}")
                else:
                    entry.append(f"{rel}:{lineno}:{line}")
                blocks.append("\n".join(entry))
                matches += 1
                if head_limit is not None and matches >= head_limit:
                    capped = True
                    break
            if capped:
                break
        if not blocks:
            return self._finish("grep", "No matches found", EXIT_NO_MATCH, started)
        joiner = "\n--\n" if context_lines > 0 else "\n"
        return self._finish("grep", joiner.join(blocks), EXIT_OK, started)

    def _grep_targets(self, resolved: Path) -> list[Path]:
        if resolved.is_file():
            return [resolved]
        files = []
        for p in sorted(resolved.rglob("*")):
            if not p.is_file() or p.is_symlink():
                continue
            if _in_blocked_dir(p, self.sandbox):
                continue
            with open(p, "rb") as fh:
                if b"\x00" in fh.read(BINARY_SNIFF_BYTES):
                    continue
            files.append(p)
        return files


def strip_read_prefixes(inline_text: str) -> str:
    """Recover the raw span text from a read result's numbered lines."""
    out = []
    for line in inline_text.splitlines():
        m = re.match(r"^\s*\d+->(.*)$", line)
        out.append(m.group(1) if m else line)
    return "\n".join(out)
