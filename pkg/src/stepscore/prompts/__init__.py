"""Prompt templates, stored as text assets and rendered with str.format.

The verifier templates are load-bearing: their wording (including the odd
typo) is part of the behavioral contract of the trained verifier, so they are
kept byte-for-byte stable. Double braces are format escapes; the only live
placeholders are {tools}, {problem}, {file_list}, {paragraph_list},
{current_paragraph} and {max_turns}.
"""

from __future__ import annotations

from importlib import resources

from ..model import FileStat

_KNOWLEDGE_ANCHOR = "# Verification Format"


def load_template(name: str) -> str:
    return resources.files(__package__).joinpath(name).read_text(encoding="utf-8")


VERIFIER_SYSTEM_INFERENCE = load_template("verifier_system_inference.txt")
VERIFIER_SYSTEM_TRAINING = load_template("verifier_system_training.txt")
VERIFIER_USER = load_template("verifier_user.txt")
AGENT_SYSTEM = load_template("agent_system.txt")
AGENT_USER = load_template("agent_user.txt")


def render_file_list(files: tuple[FileStat, ...] | list[FileStat]) -> str:
    if not files:
        return "(no files)"
    return "\n".join(f"- {f.path} ({f.size} bytes)" for f in files)


def render_verifier_system(
    tools_text: str,
    variant: str = "inference",
    knowledge_text: str | None = None,
) -> str:
    """Render the verifier system prompt.

    ``variant`` picks the inference or training wording; ``knowledge_text``
    (already formatted error-pattern guidance) is spliced in just before the
    verification-format section so it reads as extra scoring examples.
    """
    if variant == "inference":
        base = VERIFIER_SYSTEM_INFERENCE
    elif variant == "training":
        base = VERIFIER_SYSTEM_TRAINING
    else:
        raise ValueError(f"unknown verifier prompt variant: {variant!r}")
    rendered = base.format(tools=tools_text)
    if knowledge_text:
        anchor = rendered.index(_KNOWLEDGE_ANCHOR)
        rendered = rendered[:anchor] + knowledge_text.rstrip() + "\n\n" + rendered[anchor:]
    return rendered


def render_verifier_user(
    problem: str,
    file_list: str,
    paragraph_list: str,
    current_paragraph: str,
) -> str:
    return VERIFIER_USER.format(
        problem=problem,
        file_list=file_list,
        paragraph_list=paragraph_list,
        current_paragraph=current_paragraph,
    )


def render_agent_system(max_turns: int) -> str:
    return AGENT_SYSTEM.format(max_turns=max_turns)


def render_agent_user(problem: str, file_list: str) -> str:
    return AGENT_USER.format(problem=problem, file_list=file_list)
