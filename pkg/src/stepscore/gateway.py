"""Chat backends and the tool registry.

One protocol serves every model role (policy, verifier, judge, annotator,
experts): give it a message list and a completion config, get text back.
The HTTP backend talks to any chat-completions endpoint with retries; the
scripted backend replays canned responses for hermetic tests. Tool handlers
are registered here and exposed to sandboxed code through a dispatcher.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

import requests

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.9
DEFAULT_TOP_K = 20
DEFAULT_MAX_TOKENS = 8192

REQUIRED_TOOL_ARGS = {
    "query_document": ("query", "file_path"),
    "query_image": ("query", "image_path"),
}

QUERY_DOCUMENT_DOC = '''def query_document(query: str, file_path: str) -> str:
    \'\'\'
    Ask a question about the document

    Parameters:
      - query: The question to ask (string)
      - file_path: The path to the document file (supports .txt, .md, etc.)

    Returns: The query result as a string

    Example:
      result = query_document("What is the calculation formula for the cost?", "manual.md")
    \'\'\''''

QUERY_IMAGE_DOC = '''def query_image(query: str, image_path: str) -> str:
    \'\'\'
    Ask a question about the image

    Parameters:
      - query: The question to ask (string)
      - image_path: The path to the image file (supports .png, .jpg, etc.)

    Returns: The query result as a string

    Example:
      result = query_image("Describe the image in detail.", "diagram.png")
    \'\'\''''


class GatewayError(Exception):
    pass


class TransportFailure(GatewayError):
    pass


class BackendRejected(GatewayError):
    pass


class ContextOverflow(GatewayError):
    pass


class ScriptExhausted(GatewayError):
    pass


class BackendConfigError(GatewayError):
    pass


class ToolError(GatewayError):
    pass


class UnknownTool(ToolError):
    pass


class MissingArgument(ToolError):
    pass


class HandlerFailure(ToolError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class CompletionConfig:
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    top_k: int = DEFAULT_TOP_K
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


class UsageCounter:
    """Thread-safe call and token accounting for one backend."""

    def __init__(self) -> None:
        self.calls = 0
        self.tokens = 0
        self._lock = threading.Lock()

    def record(self, prompt_chars: int, completion_chars: int, reported: int | None = None) -> None:
        with self._lock:
            self.calls += 1
            if reported is not None:
                self.tokens += reported
            else:
                self.tokens += (prompt_chars + completion_chars) // 4

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {"calls": self.calls, "tokens": self.tokens}


class ChatBackend(Protocol):
    usage: UsageCounter

    def complete(self, messages: Sequence[ChatMessage], config: CompletionConfig | None = None) -> str: ...


class ScriptedBackend:
    """Deterministic stand-in: canned responses, then pattern matchers, then a default.

    ``responses`` are consumed in order (wrapping when ``loop`` is set);
    ``matchers`` are (regex, response) pairs searched against the rendered
    conversation. The full transcript of message lists is kept for tests.
    """

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        matchers: Sequence[tuple[str, str]] | None = None,
        default: str | None = None,
        loop: bool = False,
    ):
        self.responses = list(responses or [])
        self.matchers = [(re.compile(p, re.DOTALL), r) for p, r in (matchers or [])]
        self.default = default
        self.loop = loop
        self.usage = UsageCounter()
        self.transcript: list[list[ChatMessage]] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], config: CompletionConfig | None = None) -> str:
        with self._lock:
            self.transcript.append(list(messages))
            response = self._pick(messages)
        prompt_chars = sum(len(m.content) for m in messages)
        self.usage.record(prompt_chars, len(response))
        return response

    def _pick(self, messages: Sequence[ChatMessage]) -> str:
        if self._cursor < len(self.responses):
            response = self.responses[self._cursor]
            self._cursor += 1
            return response
        if self.loop and self.responses:
            response = self.responses[self._cursor % len(self.responses)]
            self._cursor += 1
            return response
        text = "\n".join(f"{m.role}: {m.content}" for m in messages)
        for pattern, response in self.matchers:
            if pattern.search(text):
                return response
        if self.default is not None:
            return self.default
        raise ScriptExhausted(f"no scripted response left after {self._cursor} calls")


class HttpChatBackend:
    """Client for an OpenAI-style chat-completions endpoint."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        model: str = "default",
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff: float = 0.5,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.usage = UsageCounter()

    def complete(self, messages: Sequence[ChatMessage], config: CompletionConfig | None = None) -> str:
        config = config if config is not None else CompletionConfig()
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": config.temperature,
            "top_p": config.top_p,
            "top_k": config.top_k,
            "max_tokens": config.max_tokens,
        }
        if config.seed is not None:
            payload["seed"] = config.seed
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport error talking to %s (attempt %d): %s", url, attempt + 1, exc)
                continue
            if response.status_code >= 500:
                last_error = TransportFailure(f"server error {response.status_code}")
                logger.warning("server error %d from %s (attempt %d)", response.status_code, url, attempt + 1)
                continue
            if response.status_code >= 400:
                body = response.text[:2000]
                if "context" in body.lower() and ("length" in body.lower() or "token" in body.lower()):
                    raise ContextOverflow(f"{response.status_code}: {body}")
                raise BackendRejected(f"{response.status_code}: {body}")
            try:
                data = response.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = exc
                logger.warning("malformed completion body from %s: %s", url, exc)
                continue
            reported = None
            usage = data.get("usage")
            if isinstance(usage, dict) and isinstance(usage.get("total_tokens"), int):
                reported = usage["total_tokens"]
            prompt_chars = sum(len(m.content) for m in messages)
            self.usage.record(prompt_chars, len(content), reported)
            return content
        raise TransportFailure(f"giving up on {url} after {self.max_retries} attempts: {last_error}")


def build_backend_from_env(prefix: str, timeout: float = 120.0) -> HttpChatBackend:
    """Wire an HTTP backend from {PREFIX}_BASE_URL / _API_KEY / _MODEL variables."""
    base_url = os.environ.get(f"{prefix}_BASE_URL")
    if not base_url:
        raise BackendConfigError(f"environment variable {prefix}_BASE_URL is not set")
    return HttpChatBackend(
        base_url=base_url,
        api_key=os.environ.get(f"{prefix}_API_KEY"),
        model=os.environ.get(f"{prefix}_MODEL", "default"),
        timeout=timeout,
    )


ToolHandler = Callable[[dict[str, Any], str], str]


@dataclass(frozen=True)
class ToolSpec:
    """A callable exposed to sandboxed code: name, prompt doc, args, handler."""

    name: str
    doc: str
    required_args: tuple[str, ...]
    handler: ToolHandler


class ToolRegistry:
    """Named tool handlers plus the prompt documentation block they render to."""

    def __init__(self) -> None:
        self._specs: dict[str, ToolSpec] = {}
        self._order: list[str] = []

    def register(self, spec: ToolSpec) -> None:
        if spec.name not in self._specs:
            self._order.append(spec.name)
        self._specs[spec.name] = spec

    def names(self) -> list[str]:
        return list(self._order)

    def render_docs(self) -> str:
        if not self._order:
            return "(no tools available)"
        return "\n\n".join(self._specs[name].doc for name in self._order)

    def handle_tool_call(self, name: str, args: dict[str, Any], workspace_root: str = ".") -> str:
        spec = self._specs.get(name)
        if spec is None:
            raise UnknownTool(f"no tool named {name!r}")
        for required in spec.required_args:
            if required not in args:
                raise MissingArgument(f"{name} requires argument {required!r}")
        try:
            return spec.handler(args, workspace_root)
        except ToolError:
            raise
        except Exception as exc:
            raise HandlerFailure(f"{name} handler failed: {exc}") from exc

    def dispatcher_for(self, workspace_root: str) -> Callable[[str, dict[str, Any]], dict[str, Any]]:
        """Adapter used by the sandbox: tool errors become strings, not raises."""

        def dispatch(name: str, args: dict[str, Any]) -> dict[str, Any]:
            try:
                result = self.handle_tool_call(name, args, workspace_root)
                return {"ok": True, "result": result}
            except ToolError as exc:
                return {"ok": False, "error": f"ToolError: {exc}"}

        return dispatch


def _read_workspace_file(workspace_root: str, rel_path: str) -> str:
    full = os.path.normpath(os.path.join(workspace_root, rel_path))
    base = os.path.normpath(workspace_root)
    if not (full == base or full.startswith(base + os.sep)):
        raise HandlerFailure(f"path escapes workspace: {rel_path!r}")
    with open(full, "r", encoding="utf-8", errors="replace") as fh:
        return fh.read()


def make_document_handler(expert: ChatBackend, config: CompletionConfig | None = None) -> ToolHandler:
    def handler(args: dict[str, Any], workspace_root: str) -> str:
        content = _read_workspace_file(workspace_root, str(args["file_path"]))
        messages = [
            ChatMessage("system", "You answer questions about the provided document, concisely and factually."),
            ChatMessage("user", f"Document ({args['file_path']}):\n{content}\n\nQuestion: {args['query']}"),
        ]
        return expert.complete(messages, config)

    return handler


def make_image_handler(expert: ChatBackend, config: CompletionConfig | None = None) -> ToolHandler:
    def handler(args: dict[str, Any], workspace_root: str) -> str:
        full = os.path.normpath(os.path.join(workspace_root, str(args["image_path"])))
        base = os.path.normpath(workspace_root)
        if not (full == base or full.startswith(base + os.sep)):
            raise HandlerFailure(f"path escapes workspace: {args['image_path']!r}")
        if not os.path.exists(full):
            raise HandlerFailure(f"image not found: {args['image_path']!r}")
        messages = [
            ChatMessage("system", "You answer questions about the referenced image, concisely and factually."),
            ChatMessage("user", f"Image path: {args['image_path']}\n\nQuestion: {args['query']}"),
        ]
        return expert.complete(messages, config)

    return handler


def build_default_registry(
    doc_expert: ChatBackend | None = None,
    img_expert: ChatBackend | None = None,
) -> ToolRegistry:
    """Registry with the two standard tools for whichever experts are wired."""
    registry = ToolRegistry()
    if doc_expert is not None:
        registry.register(
            ToolSpec(
                name="query_document",
                doc=QUERY_DOCUMENT_DOC,
                required_args=REQUIRED_TOOL_ARGS["query_document"],
                handler=make_document_handler(doc_expert),
            )
        )
    if img_expert is not None:
        registry.register(
            ToolSpec(
                name="query_image",
                doc=QUERY_IMAGE_DOC,
                required_args=REQUIRED_TOOL_ARGS["query_image"],
                handler=make_image_handler(img_expert),
            )
        )
    return registry
