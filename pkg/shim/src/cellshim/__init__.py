"""One-shot Python interpreter for sandboxed cell execution over stdio.

The parent process writes a single JSON request to stdin:

    {"cells": [...], "run": "...", "cwd": "...", "tool_port": 7 | null}

The shim changes into ``cwd``, replays ``cells`` in order inside one shared
namespace with their output suppressed, executes ``run`` while capturing its
stdout and stderr, and answers with exactly one line of JSON on stdout:

    {"stdout": "...", "stderr": "...", "exception": "..." | null}

Exit code 0 means the protocol was honored, including the case where user
code raised; a nonzero exit with a diagnostic on stderr means the request
itself was unusable. ``tool_port`` is an inherited socket descriptor carrying
newline-delimited JSON tool calls ({"tool", "args"} out, {"ok", "result"} or
{"ok", "error"} back); when present, ``query_document`` and ``query_image``
are injected into the namespace and bridge over it. Every request gets a
fresh process, so nothing survives between requests except what the replayed
cells rebuild.
"""

import io
import json
import os
import socket
import sys
import traceback
from contextlib import redirect_stderr, redirect_stdout

__all__ = ["ProtocolViolation", "main", "serve_once"]

REPLAY_PREFIX = "ReplayDivergence:"

_NO_CHANNEL = "ToolError: no tool channel available"


class ProtocolViolation(Exception):
    """The request cannot be served; the process must exit nonzero."""


class _ToolChannel:
    """Blocking JSON-lines client over the inherited tool descriptor."""

    def __init__(self, fd: int):
        try:
            self._sock = socket.socket(fileno=fd)
        except OSError as exc:
            raise ProtocolViolation(f"tool_port {fd} is not a usable socket: {exc}") from exc
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._writer = self._sock.makefile("w", encoding="utf-8")

    def call(self, tool: str, args: dict) -> str:
        try:
            self._writer.write(json.dumps({"tool": tool, "args": args}) + "\n")
            self._writer.flush()
            line = self._reader.readline()
        except OSError:
            return "ToolError: tool channel broke mid-call"
        if not line:
            return "ToolError: tool channel closed"
        try:
            reply = json.loads(line)
        except json.JSONDecodeError:
            return "ToolError: malformed tool reply"
        if isinstance(reply, dict) and reply.get("ok"):
            return str(reply.get("result", ""))
        if isinstance(reply, dict):
            return str(reply.get("error", "ToolError: unknown failure"))
        return "ToolError: malformed tool reply"

    def close(self) -> None:
        for part in (self._reader, self._writer, self._sock):
            try:
                part.close()
            except OSError:
                pass


def _make_tools(channel):
    """Build the injectable tool functions; without a channel they refuse."""

    def _bridge(tool: str, args: dict) -> str:
        if channel is None:
            return _NO_CHANNEL
        return channel.call(tool, args)

    def query_document(query: str, file_path: str) -> str:
        """
        Ask a question about the document

        Parameters:
          - query: The question to ask (string)
          - file_path: The path to the document file (supports .txt, .md, etc.)

        Returns: The query result as a string

        Example:
          result = query_document("What is the calculation formula for the cost?", "manual.md")
        """
        return _bridge("query_document", {"query": query, "file_path": file_path})

    def query_image(query: str, image_path: str) -> str:
        """
        Ask a question about the image

        Parameters:
          - query: The question to ask (string)
          - image_path: The path to the image file (supports .png, .jpg, etc.)

        Returns: The query result as a string

        Example:
          result = query_image("Describe the image in detail.", "diagram.png")
        """
        return _bridge("query_image", {"query": query, "image_path": image_path})

    return {"query_document": query_document, "query_image": query_image}


def _validate(request):
    if not isinstance(request, dict):
        raise ProtocolViolation("request must be a JSON object")
    cells = request.get("cells")
    if not isinstance(cells, list) or not all(isinstance(c, str) for c in cells):
        raise ProtocolViolation("cells must be a list of strings")
    run = request.get("run")
    if not isinstance(run, str):
        raise ProtocolViolation("run must be a string")
    cwd = request.get("cwd")
    if not isinstance(cwd, str) or not cwd:
        raise ProtocolViolation("cwd must be a non-empty string")
    tool_port = request.get("tool_port")
    if tool_port is not None and (isinstance(tool_port, bool) or not isinstance(tool_port, int)):
        raise ProtocolViolation("tool_port must be an integer descriptor or null")
    return cells, run, cwd, tool_port


def _exception_head(exc: BaseException) -> str:
    head = type(exc).__name__
    message = str(exc)
    if message:
        head = f"{head}: {message}"
    return head


def _serialize_exception(exc: BaseException) -> str:
    """Type and message first, then only the frames that ran user cells."""
    lines = [_exception_head(exc)]
    trace = traceback.TracebackException.from_exception(exc)
    frames = [f for f in trace.stack if f.filename.startswith("<cell")]
    if frames:
        lines.append("Traceback (most recent call last):")
        for frame in frames:
            lines.append(f'  File "{frame.filename}", line {frame.lineno}, in {frame.name}')
    return "\n".join(lines)


def serve_once(request) -> dict:
    """Serve one request dict and return the response dict.

    Raises ProtocolViolation when the request itself cannot be served; user
    code failures are reported inside the response, never raised.
    """
    cells, run, cwd, tool_port = _validate(request)
    try:
        os.chdir(cwd)
    except OSError as exc:
        raise ProtocolViolation(f"cannot enter cwd {cwd!r}: {exc}") from exc

    channel = _ToolChannel(tool_port) if tool_port is not None else None
    namespace = {"__name__": "__main__"}
    namespace.update(_make_tools(channel))

    try:
        sink = io.StringIO()
        for index, cell in enumerate(cells):
            try:
                compiled = compile(cell, f"<cell {index}>", "exec")
                with redirect_stdout(sink), redirect_stderr(sink):
                    exec(compiled, namespace)
            except BaseException as exc:
                return {
                    "stdout": "",
                    "stderr": "",
                    "exception": f"{REPLAY_PREFIX} cell {index}: {_exception_head(exc)}",
                }

        out = io.StringIO()
        err = io.StringIO()
        exception_text = None
        try:
            compiled = compile(run, "<cell>", "exec")
            with redirect_stdout(out), redirect_stderr(err):
                exec(compiled, namespace)
        except BaseException as exc:
            exception_text = _serialize_exception(exc)
        return {"stdout": out.getvalue(), "stderr": err.getvalue(), "exception": exception_text}
    finally:
        if channel is not None:
            channel.close()


def main() -> int:
    raw = sys.stdin.read()
    try:
        request = json.loads(raw)
    except json.JSONDecodeError as exc:
        print(f"cellshim: request is not valid JSON: {exc}", file=sys.stderr)
        return 1
    try:
        response = serve_once(request)
    except ProtocolViolation as exc:
        print(f"cellshim: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(json.dumps(response) + "\n")
    sys.stdout.flush()
    return 0
