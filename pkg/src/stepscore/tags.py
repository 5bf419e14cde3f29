"""Tag grammar for model I/O.

Two vocabularies live here: the verifier's (<reasoning>, <code>, <score>,
<summary>, plus <interpreter> for execution feedback) and the agent's
(<Analyze>, <Code>, <Execute>, <Answer>). Parsing is strict and first-match
non-greedy; nesting a tag inside itself is unsupported. Paragraph rendering is
the only place 0-based step indices become the 1-based numbers prompts use.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .model import ActionKind, FeedbackHistory, RewardValue, Step, StepAction


class TagError(ValueError):
    """Base class for malformed model output."""


class MissingTag(TagError):
    def __init__(self, tag: str, detail: str = ""):
        self.tag = tag
        message = f"missing required tag <{tag}>"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class UnterminatedTag(TagError):
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"tag <{tag}> is never closed")


class ConflictingTags(TagError):
    pass


class BothCodeAndAnswer(TagError):
    def __init__(self) -> None:
        super().__init__("a turn may carry <Code> or <Answer>, not both")


class InvalidScore(TagError):
    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"score must be one of {{0, 0.5, 1}}, got {raw!r}")


_FENCE_RE = re.compile(r"```python[ \t]*\r?\n(.*?)\r?\n?[ \t]*```", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class VerifierTurn:
    """One parsed verifier completion: reasoning plus either a probe or a verdict."""

    reasoning: str
    code: str | None = None
    score: RewardValue | None = None
    summary: str | None = None

    @property
    def is_final(self) -> bool:
        return self.score is not None


@dataclass(frozen=True)
class AgentTurn:
    """One parsed agent completion: reasoning plus either code or an answer."""

    reasoning: str
    code: str | None = None
    answer: str | None = None

    def to_action(self) -> StepAction:
        if self.code is not None:
            return StepAction(kind=ActionKind.CODE, body=self.code)
        return StepAction(kind=ActionKind.FINAL_ANSWER, body=self.answer or "")


def _extract_all(text: str, tag: str) -> list[str]:
    """Every <tag>...</tag> body, first-match non-greedy; raises if unterminated."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    bodies: list[str] = []
    cursor = text.find(open_tag)
    while cursor != -1:
        end = text.find(close_tag, cursor + len(open_tag))
        if end == -1:
            raise UnterminatedTag(tag)
        bodies.append(text[cursor + len(open_tag) : end])
        cursor = text.find(open_tag, end + len(close_tag))
    return bodies


def _extract_one(text: str, tag: str) -> str | None:
    bodies = _extract_all(text, tag)
    if not bodies:
        return None
    if len(bodies) > 1:
        raise ConflictingTags(f"tag <{tag}> appears {len(bodies)} times, expected at most one")
    return bodies[0]


def _strip_fence(raw: str, tag: str) -> str:
    match = _FENCE_RE.search(raw)
    if match is None:
        raise MissingTag(tag, "body must contain a ```python fenced block")
    code = match.group(1).strip("\r\n")
    if not code.strip():
        raise MissingTag(tag, "fenced code block is empty")
    return code


def parse_verifier_output(text: str) -> VerifierTurn:
    """Parse one verifier completion, rejecting anything structurally off."""
    reasoning_bodies = _extract_all(text, "reasoning")
    if not reasoning_bodies:
        raise MissingTag("reasoning")
    reasoning = reasoning_bodies[0].strip()

    code_body = _extract_one(text, "code")
    score_body = _extract_one(text, "score")
    summary_body = _extract_one(text, "summary")

    if code_body is not None and score_body is not None:
        raise ConflictingTags("a verifier turn may carry <code> or <score>, not both")
    if code_body is not None:
        return VerifierTurn(reasoning=reasoning, code=_strip_fence(code_body, "code"))
    if score_body is None:
        raise MissingTag("score", "no <code> block either; every turn needs one of the two")
    if summary_body is None:
        raise MissingTag("summary")

    raw_score = score_body.strip()
    try:
        score = RewardValue(float(raw_score))
    except ValueError:
        raise InvalidScore(raw_score) from None
    return VerifierTurn(reasoning=reasoning, score=score, summary=summary_body.strip())


def parse_agent_output(text: str) -> AgentTurn:
    """Parse one agent completion into reasoning plus code xor answer."""
    analyze_bodies = _extract_all(text, "Analyze")
    if not analyze_bodies:
        raise MissingTag("Analyze")
    reasoning = analyze_bodies[0].strip()

    code_body = _extract_one(text, "Code")
    answer_body = _extract_one(text, "Answer")
    if code_body is not None and answer_body is not None:
        raise BothCodeAndAnswer()
    if code_body is not None:
        return AgentTurn(reasoning=reasoning, code=_strip_fence(code_body, "Code"))
    if answer_body is None:
        raise MissingTag("Answer", "no <Code> block either; every turn needs one of the two")
    answer = answer_body.strip()
    if not answer:
        raise MissingTag("Answer", "answer body is empty")
    return AgentTurn(reasoning=reasoning, answer=answer)


def render_verifier_turn(turn: VerifierTurn) -> str:
    parts = [f"<reasoning>\n{turn.reasoning}\n</reasoning>"]
    if turn.code is not None:
        parts.append(f"<code>\n```python\n{turn.code}\n```\n</code>")
    else:
        assert turn.score is not None
        parts.append(f"<score>\n{turn.score.as_token()}\n</score>")
        parts.append(f"<summary>\n{turn.summary}\n</summary>")
    return "\n\n".join(parts)


def render_agent_turn(turn: AgentTurn) -> str:
    parts = [f"<Analyze>\n{turn.reasoning}\n</Analyze>"]
    if turn.code is not None:
        parts.append(f"<Code>\n```python\n{turn.code}\n```\n</Code>")
    else:
        parts.append(f"<Answer>\n{turn.answer}\n</Answer>")
    return "\n\n".join(parts)


def wrap_interpreter(output: str) -> str:
    """Wrap execution output the way the verifier conversation expects it."""
    return f"<interpreter>\n{output}\n</interpreter>"


def render_step(step: Step, index: int) -> str:
    """Render one step as a 1-based [Paragraph] block."""
    lines = [f"[Paragraph {index + 1}]", f"<Analyze>\n{step.reasoning}\n</Analyze>"]
    if step.action.kind is ActionKind.CODE:
        lines.append(f"<Code>\n```python\n{step.action.body}\n```\n</Code>")
        lines.append(f"<Execute>\n{step.observation}\n</Execute>")
    else:
        lines.append(f"<Answer>\n{step.action.body}\n</Answer>")
    return "\n".join(lines)


@dataclass(frozen=True)
class ParagraphRendering:
    history: str
    current: str


def render_paragraphs(
    steps: tuple[Step, ...] | list[Step],
    current_step: Step,
    feedback: FeedbackHistory | None = None,
) -> ParagraphRendering:
    """Render prior steps (with any verification feedback) and the step under review.

    ``steps`` are the already-taken steps before the current one; the current
    paragraph's number continues the sequence. An empty prefix yields an empty
    history section.
    """
    blocks: list[str] = []
    pairs = list(feedback) if feedback is not None else []
    for i, step in enumerate(steps):
        block = render_step(step, i)
        if i < len(pairs):
            reward, rationale = pairs[i]
            block += f"\n[Verification {i + 1}] Score: {reward.as_token()} | Rationale: {rationale}"
        blocks.append(block)
    history = "\n\n".join(blocks)
    current = render_step(current_step, len(steps))
    return ParagraphRendering(history=history, current=current)
