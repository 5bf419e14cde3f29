"""Environment-interacting step verification.

The verifier is itself an agent: shown the task, the trajectory so far (with
any earlier verification feedback) and the step under review, it may run its
own probe cells in the same workspace before committing to a ternary score
plus a one-or-two-sentence rationale. Two guards keep every session total:
the final permitted step must carry an answer (else the score is 0 with no
model call at all), and a session that keeps probing past its turn allowance
is nudged once and then closed as inconclusive at 0.5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import prompts
from .gateway import ChatBackend, ChatMessage, CompletionConfig, ToolRegistry
from .model import (
    ActionKind,
    FeedbackHistory,
    RewardValue,
    Step,
    StepVerdict,
    Task,
    Trajectory,
    VerdictSource,
)
from .sandbox import ExecutionContext, ExecutionResult, SandboxError, SandboxService, Workspace, fork_context
from .tags import TagError, VerifierTurn, parse_verifier_output, render_paragraphs, wrap_interpreter

logger = logging.getLogger(__name__)

DEFAULT_K_MAX = 6

INCONCLUSIVE_RATIONALE = "verification inconclusive"
GUARD_NO_ANSWER_RATIONALE = "no final answer at the last permitted step"

NUDGE_MESSAGE = (
    "You have used all of your verification turns. You must provide the final verification now: "
    "respond with <reasoning>, then <score> (one of {1, 0.5, 0}) and <summary>. Do not write any more code."
)


def correction_message(error: TagError) -> str:
    return (
        f"Your previous response could not be parsed ({error}). Follow the required format exactly: "
        "<reasoning>...</reasoning> followed by either <code>```python\\n{CODE}\\n```</code> or "
        "<score>...</score> with <summary>...</summary>."
    )


class FeedbackLengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SessionTurn:
    """One well-formed internal verifier turn and, for probes, its observation."""

    turn: VerifierTurn
    observation: str | None = None


@dataclass
class VerifierSession:
    """Record of one step's verification: turns taken, calls spent, transcript."""

    step_index: int
    turns: list[SessionTurn] = field(default_factory=list)
    llm_calls: int = 0
    messages: list[ChatMessage] = field(default_factory=list)
    nudged: bool = False


@dataclass(frozen=True)
class VerifierOutcome:
    verdict: StepVerdict
    session: VerifierSession


@dataclass(frozen=True)
class _ProbeResult:
    text: str
    advanced_context: ExecutionContext | None


def observation_text(result: ExecutionResult) -> str:
    parts: list[str] = []
    if result.stdout:
        parts.append(result.stdout.rstrip("\n"))
    if result.stderr:
        parts.append(result.stderr.rstrip("\n"))
    if result.exception:
        parts.append(result.exception)
    return "\n".join(parts) if parts else "(no output)"


class StepVerifier:
    """Runs verification sessions against one backend, sandbox, and prompt variant."""

    def __init__(
        self,
        backend: ChatBackend,
        service: SandboxService,
        registry: ToolRegistry | None = None,
        config: CompletionConfig | None = None,
        k_max: int = DEFAULT_K_MAX,
        variant: str = "inference",
        knowledge_text: str | None = None,
    ):
        if k_max < 1:
            raise ValueError("k_max must be >= 1")
        self.backend = backend
        self.service = service
        self.registry = registry
        self.config = config if config is not None else CompletionConfig()
        self.k_max = k_max
        self.variant = variant
        self.knowledge_text = knowledge_text

    def build_context(
        self,
        task: Task,
        prefix_steps: tuple[Step, ...] | list[Step],
        feedback: FeedbackHistory,
        current_step: Step,
    ) -> list[ChatMessage]:
        """Initial conversation for verifying ``current_step`` after ``prefix_steps``."""
        if len(feedback) != len(prefix_steps):
            raise FeedbackLengthMismatch(
                f"{len(prefix_steps)} prior steps but {len(feedback)} feedback pairs"
            )
        tools_text = self.registry.render_docs() if self.registry else "(no tools available)"
        system = prompts.render_verifier_system(tools_text, self.variant, self.knowledge_text)
        rendering = render_paragraphs(prefix_steps, current_step, feedback)
        user = prompts.render_verifier_user(
            problem=task.query,
            file_list=prompts.render_file_list(task.files),
            paragraph_list=rendering.history,
            current_paragraph=rendering.current,
        )
        return [ChatMessage("system", system), ChatMessage("user", user)]

    def verify_step(
        self,
        task: Task,
        trajectory: Trajectory,
        t: int,
        feedback: FeedbackHistory,
        workspace: Workspace,
        context: ExecutionContext,
    ) -> VerifierOutcome:
        """Judge step ``t``; ``context`` must already include that step's cell if it ran.

        Probe cells the verifier writes run against a fork of ``context``, so
        the agent's session is never disturbed.
        """
        step = trajectory.steps[t]
        session = VerifierSession(step_index=t)

        if t == task.max_turns - 1 and step.action.kind is not ActionKind.FINAL_ANSWER:
            verdict = StepVerdict(
                step_index=t,
                reward=RewardValue(0.0),
                rationale=GUARD_NO_ANSWER_RATIONALE,
                source=VerdictSource.GUARD,
            )
            return VerifierOutcome(verdict=verdict, session=session)

        messages = self.build_context(task, trajectory.steps[:t], feedback, step)
        session.messages = messages
        probe_ctx = fork_context(context)
        dispatcher = self.registry.dispatcher_for(workspace.root) if self.registry else None
        call_budget = 2 * self.k_max + 1

        while True:
            if session.llm_calls >= call_budget:
                return self._close_inconclusive(session)
            raw = self.backend.complete(messages, self.config)
            session.llm_calls += 1
            messages.append(ChatMessage("assistant", raw))
            try:
                parsed = parse_verifier_output(raw)
            except TagError as exc:
                if session.nudged or session.llm_calls >= call_budget:
                    return self._close_inconclusive(session)
                messages.append(ChatMessage("user", correction_message(exc)))
                continue

            if parsed.is_final:
                session.turns.append(SessionTurn(turn=parsed))
                verdict = StepVerdict(
                    step_index=t,
                    reward=parsed.score,
                    rationale=parsed.summary or "",
                    source=VerdictSource.VERIFIER,
                )
                return VerifierOutcome(verdict=verdict, session=session)

            if session.nudged:
                return self._close_inconclusive(session)

            assert parsed.code is not None
            observation = self._run_probe(workspace, probe_ctx, parsed.code, dispatcher)
            if observation.advanced_context is not None:
                probe_ctx = observation.advanced_context
            session.turns.append(SessionTurn(turn=parsed, observation=observation.text))
            reply = wrap_interpreter(observation.text)
            if len(session.turns) >= self.k_max:
                reply += "\n\n" + NUDGE_MESSAGE
                session.nudged = True
            messages.append(ChatMessage("user", reply))

    def verify_trajectory(self, task: Task, trajectory: Trajectory, workspace: Workspace) -> list[StepVerdict]:
        """Verify every step in order, threading feedback and the agent's context."""
        verdicts: list[StepVerdict] = []
        feedback = FeedbackHistory()
        agent_ctx = ExecutionContext()
        for t, step in enumerate(trajectory.steps):
            if step.action.kind is ActionKind.CODE and step.execution_ok:
                agent_ctx = agent_ctx.with_cell(step.action.body)
            outcome = self.verify_step(task, trajectory, t, feedback, workspace, agent_ctx)
            verdicts.append(outcome.verdict)
            feedback = feedback.extended(outcome.verdict.reward, outcome.verdict.rationale)
        return verdicts

    def _run_probe(
        self,
        workspace: Workspace,
        probe_ctx: ExecutionContext,
        code: str,
        dispatcher,
    ) -> "_ProbeResult":
        try:
            result = self.service.execute_cell(workspace, probe_ctx, code, dispatcher)
        except SandboxError as exc:
            logger.warning("verifier probe failed outside the cell: %s", exc)
            return _ProbeResult(text=f"SandboxError: {exc}", advanced_context=None)
        advanced = probe_ctx.with_cell(code) if result.ok else None
        return _ProbeResult(text=observation_text(result), advanced_context=advanced)

    def _close_inconclusive(self, session: VerifierSession) -> VerifierOutcome:
        verdict = StepVerdict(
            step_index=session.step_index,
            reward=RewardValue(0.5),
            rationale=INCONCLUSIVE_RATIONALE,
            source=VerdictSource.GUARD,
        )
        return VerifierOutcome(verdict=verdict, session=session)
