"""Isolated execution workspaces with string-based session tracking.

Each rollout owns a private directory seeded with the task's files. Session
state is tracked as the ordered list of previously successful cell sources:
every execution replays those cells in a fresh interpreter, then runs the new
cell and captures only its output. That makes branching trivial (fork the
cell list) and guarantees failed cells leave no state behind, at the cost of
re-running prior work.

Two backends implement the cell contract: an in-process interpreter for the
deterministic mini language (hermetic tests, no subprocesses) and a process
backend that launches an external interpreter shim per cell and speaks
newline-delimited JSON over stdio, with an inherited socket for tool calls.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import socket
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from . import minilang
from .model import Task

logger = logging.getLogger(__name__)

ToolDispatcher = Callable[[str, dict[str, Any]], dict[str, Any]]

TRUNCATION_MARKER = "...[truncated]"
REPLAY_PREFIX = "ReplayDivergence:"


class SandboxError(Exception):
    """Base class for workspace and execution failures."""


class MissingSourceFile(SandboxError):
    pass


class WorkspaceDestroyed(SandboxError):
    pass


class SpawnFailure(SandboxError):
    pass


class ShimProtocolError(SandboxError):
    pass


class ReplayDivergence(SandboxError):
    """A previously successful cell raised during replay."""


@dataclass(frozen=True)
class SandboxLimits:
    timeout_seconds: float = 120.0
    output_cap: int = 8192

    def __post_init__(self) -> None:
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if self.output_cap < 1:
            raise ValueError("output_cap must be >= 1")


@dataclass(frozen=True)
class Workspace:
    """Handle to one private execution directory."""

    id: str
    root: str
    manifest: tuple[str, ...]


@dataclass(frozen=True)
class ExecutionContext:
    """Ordered sources of the successful cells run so far in this session."""

    cells: tuple[str, ...] = ()

    def with_cell(self, code: str) -> "ExecutionContext":
        return ExecutionContext(self.cells + (code,))

    def __len__(self) -> int:
        return len(self.cells)


def fork_context(context: ExecutionContext) -> ExecutionContext:
    """Branch a session: the copy and the original evolve independently."""
    return ExecutionContext(context.cells)


@dataclass(frozen=True)
class ExecutionResult:
    stdout: str
    stderr: str
    exception: str | None
    duration: float
    truncated: bool
    ok: bool
    tool_calls: int = 0


@dataclass
class RawExecution:
    stdout: str = ""
    stderr: str = ""
    exception: str | None = None
    tool_calls: int = 0


class CellBackend(Protocol):
    def run(
        self,
        cells: tuple[str, ...],
        code: str,
        cwd: str,
        timeout: float,
        cancel: threading.Event,
        tool_dispatcher: ToolDispatcher | None,
    ) -> RawExecution: ...


class MiniLangBackend:
    """In-process backend running the deterministic mini language."""

    def run(
        self,
        cells: tuple[str, ...],
        code: str,
        cwd: str,
        timeout: float,
        cancel: threading.Event,
        tool_dispatcher: ToolDispatcher | None,
    ) -> RawExecution:
        deadline = time.monotonic() + timeout
        stdout, exception, tool_calls = minilang.run_cells(
            list(cells),
            code,
            cwd,
            deadline=deadline,
            cancel=cancel,
            tool_dispatcher=tool_dispatcher,
        )
        return RawExecution(stdout=stdout, exception=exception, tool_calls=tool_calls)


class ShimProcessBackend:
    """Backend that runs every cell in a freshly spawned interpreter shim.

    The shim is handed one JSON request on stdin ({"cells", "run", "cwd",
    "tool_port"}) and must answer one JSON response on stdout ({"stdout",
    "stderr", "exception"}), exiting 0 whenever the protocol was honored.
    ``tool_port`` is the file descriptor of an inherited socket over which the
    shim may send newline-delimited {"tool", "args"} requests.
    """

    def __init__(self, command: list[str] | None = None):
        if command is None:
            env_cmd = os.environ.get("STEPSCORE_SHIM_CMD")
            if env_cmd:
                command = env_cmd.split()
            else:
                command = [sys.executable, "-m", "cellshim"]
        self.command = list(command)

    def run(
        self,
        cells: tuple[str, ...],
        code: str,
        cwd: str,
        timeout: float,
        cancel: threading.Event,
        tool_dispatcher: ToolDispatcher | None,
    ) -> RawExecution:
        raw = RawExecution()
        parent_sock: socket.socket | None = None
        child_sock: socket.socket | None = None
        pass_fds: tuple[int, ...] = ()
        tool_port = None
        if tool_dispatcher is not None:
            parent_sock, child_sock = socket.socketpair()
            tool_port = child_sock.fileno()
            pass_fds = (tool_port,)

        request = {"cells": list(cells), "run": code, "cwd": cwd, "tool_port": tool_port}
        try:
            proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=cwd,
                pass_fds=pass_fds,
                text=True,
            )
        except OSError as exc:
            if parent_sock is not None:
                parent_sock.close()
            if child_sock is not None:
                child_sock.close()
            raise SpawnFailure(f"cannot launch shim {self.command!r}: {exc}") from exc

        server_thread = None
        if parent_sock is not None and child_sock is not None:
            child_sock.close()
            server_thread = threading.Thread(
                target=self._serve_tools,
                args=(parent_sock, tool_dispatcher, raw),
                daemon=True,
            )
            server_thread.start()

        watcher = threading.Thread(target=self._watch_cancel, args=(proc, cancel), daemon=True)
        watcher.start()
        killed_for_timeout = False
        try:
            out, err = proc.communicate(json.dumps(request), timeout=timeout)
        except subprocess.TimeoutExpired:
            killed_for_timeout = True
            proc.kill()
            out, err = proc.communicate()
        finally:
            if parent_sock is not None:
                parent_sock.close()
            if server_thread is not None:
                server_thread.join(timeout=1.0)

        if cancel.is_set():
            raw.exception = "CancelledError: workspace destroyed during execution"
            return raw
        if killed_for_timeout:
            raw.exception = f"TimeoutError: cell execution exceeded {timeout} seconds"
            raw.stderr = err or ""
            return raw
        if proc.returncode != 0:
            raise ShimProtocolError(
                f"shim exited with code {proc.returncode}: {(err or out or '').strip()[:500]}"
            )
        try:
            payload = json.loads(out)
            raw.stdout = payload["stdout"]
            raw.stderr = payload["stderr"]
            raw.exception = payload["exception"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ShimProtocolError(f"malformed shim response: {exc}") from exc
        return raw

    @staticmethod
    def _watch_cancel(proc: subprocess.Popen, cancel: threading.Event) -> None:
        while proc.poll() is None:
            if cancel.wait(timeout=0.05):
                proc.kill()
                return

    @staticmethod
    def _serve_tools(sock: socket.socket, dispatcher: ToolDispatcher, raw: RawExecution) -> None:
        try:
            reader = sock.makefile("r", encoding="utf-8")
            writer = sock.makefile("w", encoding="utf-8")
            for line in reader:
                line = line.strip()
                if not line:
                    continue
                try:
                    message = json.loads(line)
                    reply = dispatcher(message["tool"], message.get("args", {}))
                except Exception as exc:
                    reply = {"ok": False, "error": f"ToolError: {exc}"}
                raw.tool_calls += 1
                writer.write(json.dumps(reply) + "\n")
                writer.flush()
        except (OSError, ValueError):
            pass


@dataclass
class _WorkspaceState:
    cancel: threading.Event = field(default_factory=threading.Event)
    active: int = 0


class SandboxService:
    """Bounded pool of sandboxed executions over private workspaces."""

    def __init__(
        self,
        backend: CellBackend | None = None,
        limits: SandboxLimits | None = None,
        base_dir: str | None = None,
        pool_size: int = 8,
    ):
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.backend = backend if backend is not None else MiniLangBackend()
        self.limits = limits if limits is not None else SandboxLimits()
        self.base_dir = base_dir or os.path.join(os.getcwd(), ".stepscore-workspaces")
        self._slots = threading.Semaphore(pool_size)
        self._registry: dict[str, _WorkspaceState] = {}
        self._lock = threading.Lock()

    def create_workspace(self, task: Task, source_dir: str) -> Workspace:
        """Make a private directory seeded with the task's input files."""
        safe_id = re.sub(r"[^A-Za-z0-9_.-]", "_", task.id)
        ws_id = f"{safe_id}-{uuid.uuid4().hex[:8]}"
        root = os.path.join(self.base_dir, ws_id)
        os.makedirs(root, exist_ok=False)
        try:
            for entry in task.files:
                src = os.path.join(source_dir, entry.path)
                if not os.path.isfile(src):
                    raise MissingSourceFile(f"task file not found: {src}")
                dst = os.path.join(root, entry.path)
                os.makedirs(os.path.dirname(dst) or root, exist_ok=True)
                shutil.copyfile(src, dst)
        except Exception:
            shutil.rmtree(root, ignore_errors=True)
            raise
        with self._lock:
            self._registry[root] = _WorkspaceState()
        logger.debug("created workspace %s with %d files", ws_id, len(task.files))
        return Workspace(id=ws_id, root=root, manifest=tuple(e.path for e in task.files))

    def execute_cell(
        self,
        workspace: Workspace,
        context: ExecutionContext,
        code: str,
        tool_dispatcher: ToolDispatcher | None = None,
    ) -> ExecutionResult:
        """Replay the context, run ``code``, and capture only the new output."""
        with self._lock:
            state = self._registry.get(workspace.root)
            if state is None:
                raise WorkspaceDestroyed(f"workspace {workspace.id} is gone")
            state.active += 1
        start = time.perf_counter()
        try:
            with self._slots:
                raw = self.backend.run(
                    context.cells,
                    code,
                    workspace.root,
                    self.limits.timeout_seconds,
                    state.cancel,
                    tool_dispatcher,
                )
        finally:
            with self._lock:
                state.active -= 1
        duration = time.perf_counter() - start

        if raw.exception and raw.exception.startswith(REPLAY_PREFIX):
            raise ReplayDivergence(raw.exception)

        stdout, cut_out = self._truncate(raw.stdout)
        stderr, cut_err = self._truncate(raw.stderr)
        return ExecutionResult(
            stdout=stdout,
            stderr=stderr,
            exception=raw.exception,
            duration=duration,
            truncated=cut_out or cut_err,
            ok=raw.exception is None,
            tool_calls=raw.tool_calls,
        )

    def destroy_workspace(self, workspace: Workspace) -> None:
        """Tear a workspace down; safe to call twice, cancels in-flight cells."""
        with self._lock:
            state = self._registry.pop(workspace.root, None)
        if state is None:
            return
        state.cancel.set()
        deadline = time.monotonic() + 2.0
        while state.active > 0 and time.monotonic() < deadline:
            time.sleep(0.01)
        shutil.rmtree(workspace.root, ignore_errors=True)
        logger.debug("destroyed workspace %s", workspace.id)

    def list_files(self, workspace: Workspace) -> list[str]:
        """Sorted relative paths currently present in the workspace."""
        found: list[str] = []
        for dirpath, _dirnames, filenames in os.walk(workspace.root):
            for name in filenames:
                full = os.path.join(dirpath, name)
                found.append(os.path.relpath(full, workspace.root))
        return sorted(found)

    def _truncate(self, text: str) -> tuple[str, bool]:
        cap = self.limits.output_cap
        if len(text) > cap:
            return text[:cap] + TRUNCATION_MARKER, True
        return text, False
