"""A tiny deterministic cell language for the in-process sandbox backend.

Cells are line-oriented: assignments, ``print``, ``write``, ``sleep`` and
``fail`` statements over a small expression grammar (numbers, strings,
booleans, names, arithmetic, comparisons, and a handful of builtin calls
including ``tool(...)`` for the side-channel bridge). It exists so the full
engine can be exercised hermetically: scripts behave the same way every run,
honor deadlines cooperatively, and reproduce the shared-session semantics of
a real interpreter (variables persist across cells, failed cells leave
nothing behind because only successful cells are replayed).
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field
from threading import Event
from typing import Any, Callable

ToolDispatcher = Callable[[str, dict[str, Any]], dict[str, Any]]

_SLEEP_SLICE = 0.01

_TOKEN_RE = re.compile(
    r"""
    (?P<number>\d+\.\d+|\d+)
  | (?P<string>"(?:\\.|[^"\\])*"|'(?:\\.|[^'\\])*')
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|[-+*/(),<>=])
  | (?P<ws>[ \t]+)
""",
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", '"': '"', "'": "'"}


class MiniLangExit(Exception):
    """Internal control-flow escapes; carries the formatted exception text."""

    def __init__(self, text: str):
        self.text = text
        super().__init__(text)


class MiniTimeout(MiniLangExit):
    pass


class MiniCancelled(MiniLangExit):
    pass


class _CellFailure(Exception):
    """A script-level error; formatted as 'Type: message' like a traceback head."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        self.message = message
        super().__init__(f"{kind}: {message}")


def _unescape(raw: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "\\" and i + 1 < len(raw):
            out.append(_ESCAPES.get(raw[i + 1], raw[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _tokenize(line: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(line):
        match = _TOKEN_RE.match(line, pos)
        if match is None:
            raise _CellFailure("SyntaxError", f"unexpected character {line[pos]!r}")
        kind = match.lastgroup or ""
        if kind != "ws":
            tokens.append((kind, match.group()))
        pos = match.end()
    return tokens


@dataclass
class MiniIo:
    """Collects output and mediates filesystem and tool access for one run."""

    cwd: str
    stdout: list[str] = field(default_factory=list)
    tool_dispatcher: ToolDispatcher | None = None
    tool_calls: int = 0

    def emit(self, text: str) -> None:
        self.stdout.append(text)


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise _CellFailure("SyntaxError", "unexpected end of line")
        self.pos += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.next()
        if tok != ("op", op):
            raise _CellFailure("SyntaxError", f"expected {op!r}, got {tok[1]!r}")

    def done(self) -> bool:
        return self.pos >= len(self.tokens)


class MiniInterpreter:
    """Evaluates cells against a shared environment with cooperative deadlines."""

    def __init__(
        self,
        io: MiniIo,
        deadline: float | None = None,
        cancel: Event | None = None,
    ):
        self.io = io
        self.deadline = deadline
        self.cancel = cancel
        self.env: dict[str, Any] = {}

    def run_cell(self, code: str) -> None:
        for raw_line in code.splitlines():
            self._checkpoint()
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                self._run_line(line)
            except _CellFailure as exc:
                raise MiniLangExit(str(exc)) from None

    def _checkpoint(self) -> None:
        if self.cancel is not None and self.cancel.is_set():
            raise MiniCancelled("CancelledError: execution cancelled")
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise MiniTimeout("TimeoutError: cell execution exceeded the time limit")

    def _run_line(self, line: str) -> None:
        tokens = _tokenize(line)
        if not tokens:
            return
        kind, text = tokens[0]
        if kind == "name" and text == "print":
            parser = _Parser(tokens[1:])
            value = self._expr(parser)
            self._expect_consumed(parser)
            self.io.emit(self._to_text(value) + "\n")
        elif kind == "name" and text == "write":
            parser = _Parser(tokens[1:])
            path = self._expr(parser)
            parser.expect_op(",")
            value = self._expr(parser)
            self._expect_consumed(parser)
            self._write_file(path, self._to_text(value))
        elif kind == "name" and text == "sleep":
            parser = _Parser(tokens[1:])
            seconds = self._expr(parser)
            self._expect_consumed(parser)
            self._sleep(float(seconds))
        elif kind == "name" and text == "fail":
            parser = _Parser(tokens[1:])
            message = self._expr(parser)
            self._expect_consumed(parser)
            raise _CellFailure("CellError", self._to_text(message))
        elif kind == "name" and len(tokens) >= 2 and tokens[1] == ("op", "="):
            parser = _Parser(tokens[2:])
            value = self._expr(parser)
            self._expect_consumed(parser)
            self.env[text] = value
        else:
            raise _CellFailure("SyntaxError", f"cannot parse statement: {line!r}")

    @staticmethod
    def _expect_consumed(parser: _Parser) -> None:
        if not parser.done():
            raise _CellFailure("SyntaxError", f"trailing tokens after expression: {parser.peek()!r}")

    @staticmethod
    def _to_text(value: Any) -> str:
        if isinstance(value, bool):
            return "True" if value else "False"
        if isinstance(value, float) and value.is_integer():
            return str(value)
        return str(value)

    def _sleep(self, seconds: float) -> None:
        end = time.monotonic() + seconds
        while True:
            self._checkpoint()
            remaining = end - time.monotonic()
            if remaining <= 0:
                return
            time.sleep(min(_SLEEP_SLICE, remaining))

    def _contained_path(self, rel: str) -> str:
        target = os.path.normpath(os.path.join(self.io.cwd, rel))
        base = os.path.normpath(self.io.cwd)
        if not (target == base or target.startswith(base + os.sep)):
            raise _CellFailure("PermissionError", f"path escapes workspace: {rel!r}")
        return target

    def _write_file(self, path: Any, content: str) -> None:
        if not isinstance(path, str):
            raise _CellFailure("TypeError", "write path must be a string")
        with open(self._contained_path(path), "w", encoding="utf-8") as fh:
            fh.write(content)

    def _read_file(self, path: Any) -> str:
        if not isinstance(path, str):
            raise _CellFailure("TypeError", "file path must be a string")
        target = self._contained_path(path)
        if not os.path.exists(target):
            raise _CellFailure("FileNotFoundError", f"no such file: {path!r}")
        with open(target, "r", encoding="utf-8") as fh:
            return fh.read()

    def _call_tool(self, args: list[Any]) -> str:
        if not args or not isinstance(args[0], str):
            raise _CellFailure("TypeError", "tool() needs a tool name string first")
        name = args[0]
        payload: dict[str, Any] = {}
        if len(args) > 1:
            payload["query"] = args[1]
        if len(args) > 2:
            path_key = "image_path" if name == "query_image" else "file_path"
            payload[path_key] = args[2]
        if self.io.tool_dispatcher is None:
            return "ToolError: no tool channel available"
        self.io.tool_calls += 1
        reply = self.io.tool_dispatcher(name, payload)
        if reply.get("ok"):
            return str(reply.get("result", ""))
        return str(reply.get("error", "ToolError: unknown failure"))

    def _call_builtin(self, name: str, args: list[Any]) -> Any:
        def arity(n: int) -> None:
            if len(args) != n:
                raise _CellFailure("TypeError", f"{name}() takes {n} argument(s), got {len(args)}")

        if name == "file":
            arity(1)
            return self._read_file(args[0])
        if name == "exists":
            arity(1)
            return os.path.exists(self._contained_path(str(args[0])))
        if name == "defined":
            arity(1)
            return str(args[0]) in self.env
        if name == "len":
            arity(1)
            try:
                return len(args[0])
            except TypeError as exc:
                raise _CellFailure("TypeError", str(exc)) from None
        if name == "str":
            arity(1)
            return self._to_text(args[0])
        if name == "int":
            arity(1)
            try:
                return int(args[0])
            except (TypeError, ValueError) as exc:
                raise _CellFailure("ValueError", str(exc)) from None
        if name == "float":
            arity(1)
            try:
                return float(args[0])
            except (TypeError, ValueError) as exc:
                raise _CellFailure("ValueError", str(exc)) from None
        if name == "tool":
            return self._call_tool(args)
        raise _CellFailure("NameError", f"unknown function {name!r}")

    def _expr(self, parser: _Parser) -> Any:
        left = self._additive(parser)
        tok = parser.peek()
        if tok is not None and tok[0] == "op" and tok[1] in ("==", "!=", "<=", ">=", "<", ">"):
            parser.next()
            right = self._additive(parser)
            try:
                if tok[1] == "==":
                    return left == right
                if tok[1] == "!=":
                    return left != right
                if tok[1] == "<=":
                    return left <= right
                if tok[1] == ">=":
                    return left >= right
                if tok[1] == "<":
                    return left < right
                return left > right
            except TypeError as exc:
                raise _CellFailure("TypeError", str(exc)) from None
        return left

    def _additive(self, parser: _Parser) -> Any:
        value = self._term(parser)
        while True:
            tok = parser.peek()
            if tok is None or tok[0] != "op" or tok[1] not in ("+", "-"):
                return value
            parser.next()
            right = self._term(parser)
            try:
                value = value + right if tok[1] == "+" else value - right
            except TypeError as exc:
                raise _CellFailure("TypeError", str(exc)) from None

    def _term(self, parser: _Parser) -> Any:
        value = self._factor(parser)
        while True:
            tok = parser.peek()
            if tok is None or tok[0] != "op" or tok[1] not in ("*", "/"):
                return value
            parser.next()
            right = self._factor(parser)
            try:
                if tok[1] == "*":
                    value = value * right
                else:
                    value = value / right
            except ZeroDivisionError:
                raise _CellFailure("ZeroDivisionError", "division by zero") from None
            except TypeError as exc:
                raise _CellFailure("TypeError", str(exc)) from None

    def _factor(self, parser: _Parser) -> Any:
        kind, text = parser.next()
        if kind == "number":
            return float(text) if "." in text else int(text)
        if kind == "string":
            return _unescape(text[1:-1])
        if kind == "op" and text == "-":
            value = self._factor(parser)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise _CellFailure("TypeError", "unary minus needs a number")
            return -value
        if kind == "op" and text == "(":
            value = self._expr(parser)
            parser.expect_op(")")
            return value
        if kind == "name":
            if text == "True":
                return True
            if text == "False":
                return False
            nxt = parser.peek()
            if nxt == ("op", "("):
                parser.next()
                args: list[Any] = []
                if parser.peek() != ("op", ")"):
                    args.append(self._expr(parser))
                    while parser.peek() == ("op", ","):
                        parser.next()
                        args.append(self._expr(parser))
                parser.expect_op(")")
                return self._call_builtin(text, args)
            if text not in self.env:
                raise _CellFailure("NameError", f"name {text!r} is not defined")
            return self.env[text]
        raise _CellFailure("SyntaxError", f"unexpected token {text!r}")


def run_cells(
    cells: list[str],
    run: str,
    cwd: str,
    deadline: float | None = None,
    cancel: Event | None = None,
    tool_dispatcher: ToolDispatcher | None = None,
) -> tuple[str, str | None, int]:
    """Replay ``cells`` then execute ``run``; return (stdout, exception, tool_calls).

    Replay output is swallowed; only the new cell's output is surfaced. A
    replayed cell that raises reports a ReplayDivergence-prefixed exception
    so callers can tell the phases apart.
    """
    io = MiniIo(cwd=cwd, tool_dispatcher=tool_dispatcher)
    interp = MiniInterpreter(io, deadline=deadline, cancel=cancel)
    for idx, cell in enumerate(cells):
        try:
            interp.run_cell(cell)
        except (MiniTimeout, MiniCancelled) as exc:
            return "".join(io.stdout), exc.text, io.tool_calls
        except MiniLangExit as exc:
            return "", f"ReplayDivergence: cell {idx}: {exc.text}", io.tool_calls
        io.stdout.clear()
    try:
        interp.run_cell(run)
    except MiniLangExit as exc:
        return "".join(io.stdout), exc.text, io.tool_calls
    return "".join(io.stdout), None, io.tool_calls
