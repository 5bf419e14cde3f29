"""Test-time scaling strategies guided by step verification.

A rollout drives the policy model through the ReAct loop inside one
workspace. On top of that sit the selection strategies: best-of-n over
independent rollouts, majority voting by judged answer equivalence,
depth-synchronous beam search over partial trajectories, and a
divided-budget variant running independent subtrees.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from . import prompts
from .gateway import ChatBackend, ChatMessage, CompletionConfig, ToolRegistry
from .model import (
    ActionKind,
    FeedbackHistory,
    RewardValue,
    Step,
    StepVerdict,
    Task,
    TerminationReason,
    Trajectory,
)
from .sandbox import ExecutionContext, SandboxError, SandboxService, Workspace
from .tags import TagError, parse_agent_output
from .verifier import StepVerifier, observation_text

logger = logging.getLogger(__name__)


class SearchError(Exception):
    pass


class AllRolloutsFailed(SearchError):
    pass


class AllBeamsFailed(SearchError):
    pass


class NoAnswers(SearchError):
    pass


class JudgeFailure(SearchError):
    pass


class EmptyRewardList(ValueError):
    pass


class AggregationMethod(str, Enum):
    MEAN = "mean"
    SUM = "sum"
    PRODUCT = "product"
    LAST_STEP = "last_step"


class VoteMode(str, Enum):
    ANSWER = "answer"
    VISUALIZATION_CODE = "visualization_code"


@dataclass(frozen=True)
class SearchBudget:
    """Knobs for every strategy: candidate count n, beam width, branch factor."""

    n: int = 4
    beam_width: int = 2
    branch: int = 2

    def __post_init__(self) -> None:
        if self.n < 1 or self.beam_width < 1 or self.branch < 1:
            raise ValueError("budget values must be >= 1")


@dataclass(frozen=True)
class ScoredTrajectory:
    trajectory: Trajectory
    verdicts: tuple[StepVerdict, ...]
    score: float
    index: int = 0


@dataclass(frozen=True)
class SearchReport:
    """Everything a run manifest needs: the winner plus all scored candidates."""

    strategy: str
    winner: ScoredTrajectory
    candidates: tuple[ScoredTrajectory, ...]
    expansions: int


def aggregate(rewards: Sequence[RewardValue], method: AggregationMethod) -> float:
    """Collapse per-step rewards into one trajectory score."""
    if not rewards:
        raise EmptyRewardList("cannot aggregate an empty reward list")
    values = [float(r) for r in rewards]
    if method is AggregationMethod.MEAN:
        return math.fsum(values) / len(values)
    if method is AggregationMethod.SUM:
        return math.fsum(values)
    if method is AggregationMethod.PRODUCT:
        return math.prod(values)
    if method is AggregationMethod.LAST_STEP:
        return values[-1]
    raise ValueError(f"unknown aggregation method: {method!r}")


AGENT_CORRECTION = (
    "Your previous response could not be parsed. Respond with <Analyze>...</Analyze> followed by "
    "either <Code>```python\\n{CODE}\\n```</Code> or <Answer>...</Answer>."
)


def rollout(
    task: Task,
    policy: ChatBackend,
    service: SandboxService,
    workspace: Workspace,
    config: CompletionConfig | None = None,
    tool_registry: ToolRegistry | None = None,
) -> Trajectory:
    """Drive the policy through the ReAct loop until it answers or runs out of turns.

    Every policy completion consumes one turn, including unparseable ones
    (those get a correction re-prompt and append no step).
    """
    config = config if config is not None else CompletionConfig()
    dispatcher = tool_registry.dispatcher_for(workspace.root) if tool_registry else None
    messages = [
        ChatMessage("system", prompts.render_agent_system(task.max_turns)),
        ChatMessage("user", prompts.render_agent_user(task.query, prompts.render_file_list(task.files))),
    ]
    steps: list[Step] = []
    ctx = ExecutionContext()

    for _turn in range(task.max_turns):
        raw = policy.complete(messages, config)
        messages.append(ChatMessage("assistant", raw))
        try:
            turn = parse_agent_output(raw)
        except TagError as exc:
            logger.debug("unparseable agent output on task %s: %s", task.id, exc)
            messages.append(ChatMessage("user", AGENT_CORRECTION))
            continue

        if turn.answer is not None:
            steps.append(
                Step(
                    index=len(steps),
                    reasoning=turn.reasoning,
                    action=turn.to_action(),
                    observation="",
                    execution_ok=True,
                )
            )
            return Trajectory(
                task_id=task.id,
                steps=tuple(steps),
                final_answer=turn.answer,
                terminated_reason=TerminationReason.ANSWERED,
            )

        assert turn.code is not None
        try:
            result = service.execute_cell(workspace, ctx, turn.code, dispatcher)
        except SandboxError as exc:
            logger.warning("sandbox failure mid-rollout on task %s: %s", task.id, exc)
            steps.append(
                Step(
                    index=len(steps),
                    reasoning=turn.reasoning,
                    action=turn.to_action(),
                    observation=f"SandboxError: {exc}",
                    execution_ok=False,
                )
            )
            return Trajectory(
                task_id=task.id,
                steps=tuple(steps),
                terminated_reason=TerminationReason.ERROR,
            )
        obs = observation_text(result)
        if result.ok:
            ctx = ctx.with_cell(turn.code)
        steps.append(
            Step(
                index=len(steps),
                reasoning=turn.reasoning,
                action=turn.to_action(),
                observation=obs,
                execution_ok=result.ok,
            )
        )
        messages.append(ChatMessage("user", f"<Execute>\n{obs}\n</Execute>"))

    return Trajectory(
        task_id=task.id,
        steps=tuple(steps),
        terminated_reason=TerminationReason.TURN_CAP_REACHED,
    )


EQUIVALENCE_SYSTEM = (
    "You compare two candidate answers to the same data analysis problem and decide whether they are "
    "equivalent in content. Ignore formatting, wording, units spelled differently, and trailing zeros. "
    "Reply with exactly YES or NO."
)

VIZ_EQUIVALENCE_SYSTEM = (
    "You compare two plotting code snippets and decide whether they would produce logically consistent "
    "visualizations of the same underlying result (same data, same relationship shown). "
    "Reply with exactly YES or NO."
)

VIZ_EXTRACT_SYSTEM = (
    "Extract the final visualization code from the analysis transcript below: return only the code that "
    "produces the plot the analyst ended with, nothing else."
)


def _yes_no(text: str, context: str) -> bool:
    token = text.strip().split()[0].upper().strip(".,:;!") if text.strip() else ""
    if token.startswith("YES"):
        return True
    if token.startswith("NO"):
        return False
    raise JudgeFailure(f"{context}: expected YES or NO, got {text[:80]!r}")


def judge_equivalent(judge: ChatBackend, a: str, b: str, system: str = EQUIVALENCE_SYSTEM) -> bool:
    reply = judge.complete(
        [
            ChatMessage("system", system),
            ChatMessage("user", f"Answer A:\n{a}\n\nAnswer B:\n{b}\n\nEquivalent?"),
        ]
    )
    return _yes_no(reply, "equivalence judge")


def cluster_by_equivalence(
    items: Sequence[str],
    judge: ChatBackend | None,
    system: str = EQUIVALENCE_SYSTEM,
) -> list[list[int]]:
    """Group item indices into equivalence clusters.

    Exact string matches join without any judge call; only textually distinct
    pairs are sent to the judge, one (item, representative) question at a time.
    """
    clusters: list[tuple[str, list[int]]] = []
    for i, item in enumerate(items):
        joined = False
        for rep, members in clusters:
            if item == rep:
                members.append(i)
                joined = True
                break
        if joined:
            continue
        if judge is not None:
            for rep, members in clusters:
                if judge_equivalent(judge, item, rep, system):
                    members.append(i)
                    joined = True
                    break
        if not joined:
            clusters.append((item, [i]))
    return [members for _rep, members in clusters]


def _extract_viz_code(judge: ChatBackend, trajectory: Trajectory) -> str:
    cells = [s.action.body for s in trajectory.steps if s.action.kind is ActionKind.CODE]
    transcript = "\n\n".join(f"# cell {i + 1}\n{c}" for i, c in enumerate(cells)) or "(no code)"
    return judge.complete(
        [ChatMessage("system", VIZ_EXTRACT_SYSTEM), ChatMessage("user", transcript)]
    ).strip()


def majority_vote(
    trajectories: Sequence[Trajectory],
    judge: ChatBackend,
    mode: VoteMode = VoteMode.ANSWER,
) -> Trajectory:
    """Return a representative of the largest answer-equivalence cluster.

    Ties go to the cluster whose first member appeared earliest; unanswered
    trajectories never vote.
    """
    voters = [(i, t) for i, t in enumerate(trajectories) if t.final_answer is not None]
    if not voters:
        raise NoAnswers("no trajectory produced a final answer")
    if mode is VoteMode.ANSWER:
        items = [t.final_answer or "" for _i, t in voters]
        system = EQUIVALENCE_SYSTEM
    else:
        items = [_extract_viz_code(judge, t) for _i, t in voters]
        system = VIZ_EQUIVALENCE_SYSTEM
    clusters = cluster_by_equivalence(items, judge, system)
    best = max(clusters, key=lambda members: (len(members), -members[0]))
    winner_index = voters[best[0]][0]
    return trajectories[winner_index]


@dataclass
class _Beam:
    steps: list[Step]
    verdicts: list[StepVerdict]
    messages: list[ChatMessage]
    workspace: Workspace | None
    ctx: ExecutionContext
    feedback: FeedbackHistory
    created: int
    score: float


@dataclass
class _Retired:
    trajectory: Trajectory
    verdicts: tuple[StepVerdict, ...]
    score: float
    created: int


class SearchRunner:
    """Owns the moving parts (policy, verifier, sandbox) and runs strategies."""

    def __init__(
        self,
        policy: ChatBackend,
        verifier: StepVerifier,
        service: SandboxService,
        source_dir: str,
        config: CompletionConfig | None = None,
        method: AggregationMethod = AggregationMethod.MEAN,
        parallelism: int = 1,
        tool_registry: ToolRegistry | None = None,
    ):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.policy = policy
        self.verifier = verifier
        self.service = service
        self.source_dir = source_dir
        self.config = config if config is not None else CompletionConfig()
        self.method = method
        self.parallelism = parallelism
        self.tool_registry = tool_registry

    def _config_for(self, offset: int) -> CompletionConfig:
        if self.config.seed is None:
            return self.config
        return replace(self.config, seed=self.config.seed + offset)

    def _score(self, verdicts: Sequence[StepVerdict]) -> float:
        if not verdicts:
            return 0.0
        return aggregate([v.reward for v in verdicts], self.method)

    def _run_candidate(self, task: Task, index: int) -> ScoredTrajectory:
        workspace = self.service.create_workspace(task, self.source_dir)
        try:
            trajectory = rollout(
                task,
                self.policy,
                self.service,
                workspace,
                self._config_for(index),
                self.tool_registry,
            )
            verdicts = self.verifier.verify_trajectory(task, trajectory, workspace)
        finally:
            self.service.destroy_workspace(workspace)
        return ScoredTrajectory(
            trajectory=trajectory,
            verdicts=tuple(verdicts),
            score=self._score(verdicts),
            index=index,
        )

    def best_of_n(self, task: Task, budget: SearchBudget) -> ScoredTrajectory:
        return self.best_of_n_report(task, budget).winner

    def best_of_n_report(self, task: Task, budget: SearchBudget) -> SearchReport:
        """Sample n independent rollouts, verify each, return the argmax by score."""
        n = budget.n
        results: list[ScoredTrajectory | None] = [None] * n
        errors: list[Exception] = []
        if self.parallelism > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=min(self.parallelism, n)) as pool:
                futures = [pool.submit(self._run_candidate, task, i) for i in range(n)]
                for i, future in enumerate(futures):
                    try:
                        results[i] = future.result()
                    except Exception as exc:
                        logger.warning("candidate %d failed on task %s: %s", i, task.id, exc)
                        errors.append(exc)
        else:
            for i in range(n):
                try:
                    results[i] = self._run_candidate(task, i)
                except Exception as exc:
                    logger.warning("candidate %d failed on task %s: %s", i, task.id, exc)
                    errors.append(exc)
        candidates = [r for r in results if r is not None]
        if not candidates:
            raise AllRolloutsFailed(f"all {n} rollouts failed on task {task.id}: {errors[-1] if errors else 'unknown'}")
        winner = candidates[0]
        for cand in candidates[1:]:
            if cand.score > winner.score:
                winner = cand
        return SearchReport(
            strategy="bon",
            winner=winner,
            candidates=tuple(candidates),
            expansions=sum(len(c.trajectory.steps) for c in candidates),
        )

    def beam_search(
        self,
        task: Task,
        budget: SearchBudget,
        config: CompletionConfig | None = None,
    ) -> ScoredTrajectory:
        return self.beam_search_report(task, budget, config).winner

    def beam_search_report(
        self,
        task: Task,
        budget: SearchBudget,
        config: CompletionConfig | None = None,
    ) -> SearchReport:
        """Depth-synchronous search: branch each live partial, verify, keep the top beams.

        Completed children (answered, or out of turns) retire into the pool;
        the winner is the retired trajectory with the highest aggregated score,
        ties toward the earliest-created.
        """
        config = config if config is not None else self.config
        width, branch = budget.beam_width, budget.branch
        root = _Beam(
            steps=[],
            verdicts=[],
            messages=[
                ChatMessage("system", prompts.render_agent_system(task.max_turns)),
                ChatMessage(
                    "user", prompts.render_agent_user(task.query, prompts.render_file_list(task.files))
                ),
            ],
            workspace=None,
            ctx=ExecutionContext(),
            feedback=FeedbackHistory(),
            created=0,
            score=0.0,
        )
        live = [root]
        retired: list[_Retired] = []
        created = 1
        expansions = 0
        try:
            for depth in range(task.max_turns):
                children: list[_Beam] = []
                for beam in live:
                    for _b in range(branch):
                        expansions += 1
                        child = self._expand(task, beam, created, config)
                        created += 1
                        if child is None:
                            continue
                        children.append(child)
                    if beam.workspace is not None:
                        self.service.destroy_workspace(beam.workspace)
                        beam.workspace = None
                live = []
                for child in children:
                    last = child.steps[-1]
                    done = last.action.kind is ActionKind.FINAL_ANSWER
                    out_of_turns = depth + 1 >= task.max_turns
                    if done or out_of_turns:
                        retired.append(self._retire(task, child, done))
                        if child.workspace is not None:
                            self.service.destroy_workspace(child.workspace)
                            child.workspace = None
                    else:
                        live.append(child)
                live.sort(key=lambda b: (-b.score, b.created))
                for pruned in live[width:]:
                    if pruned.workspace is not None:
                        self.service.destroy_workspace(pruned.workspace)
                        pruned.workspace = None
                live = live[:width]
                if not live:
                    break
        finally:
            for beam in live:
                if beam.workspace is not None:
                    self.service.destroy_workspace(beam.workspace)
        if not retired:
            raise AllBeamsFailed(f"no beam terminated on task {task.id}")
        winner = retired[0]
        for cand in retired[1:]:
            if cand.score > winner.score:
                winner = cand
        candidates = tuple(
            ScoredTrajectory(trajectory=r.trajectory, verdicts=r.verdicts, score=r.score, index=pos)
            for pos, r in enumerate(retired)
        )
        winner_scored = next(c for c in candidates if retired[c.index] is winner)
        return SearchReport(
            strategy="beam",
            winner=winner_scored,
            candidates=candidates,
            expansions=expansions,
        )

    def _expand(
        self,
        task: Task,
        beam: _Beam,
        created: int,
        config: CompletionConfig,
    ) -> _Beam | None:
        """Sample one child continuation of a beam; None if unparseable."""
        raw = self.policy.complete(beam.messages, config)
        try:
            turn = parse_agent_output(raw)
        except TagError as exc:
            logger.debug("dropping unparseable beam child on task %s: %s", task.id, exc)
            return None

        t = len(beam.steps)
        workspace = self.service.create_workspace(task, self.source_dir)
        ctx = beam.ctx
        dispatcher = self.tool_registry.dispatcher_for(workspace.root) if self.tool_registry else None

        if turn.answer is not None:
            step = Step(index=t, reasoning=turn.reasoning, action=turn.to_action(), observation="")
            obs_message = None
        else:
            assert turn.code is not None
            try:
                result = self.service.execute_cell(workspace, ctx, turn.code, dispatcher)
            except SandboxError as exc:
                logger.warning("sandbox failure expanding beam on task %s: %s", task.id, exc)
                self.service.destroy_workspace(workspace)
                return None
            obs = observation_text(result)
            if result.ok:
                ctx = ctx.with_cell(turn.code)
            step = Step(
                index=t,
                reasoning=turn.reasoning,
                action=turn.to_action(),
                observation=obs,
                execution_ok=result.ok,
            )
            obs_message = ChatMessage("user", f"<Execute>\n{obs}\n</Execute>")

        steps = beam.steps + [step]
        partial = Trajectory(
            task_id=task.id,
            steps=tuple(steps),
            final_answer=turn.answer,
            terminated_reason=TerminationReason.ANSWERED if turn.answer is not None else None,
        )
        outcome = self.verifier.verify_step(task, partial, t, beam.feedback, workspace, ctx)
        verdicts = beam.verdicts + [outcome.verdict]
        messages = beam.messages + [ChatMessage("assistant", raw)]
        if obs_message is not None:
            messages.append(obs_message)
        return _Beam(
            steps=steps,
            verdicts=verdicts,
            messages=messages,
            workspace=workspace,
            ctx=ctx,
            feedback=beam.feedback.extended(outcome.verdict.reward, outcome.verdict.rationale),
            created=created,
            score=self._score(verdicts),
        )

    def _retire(self, task: Task, beam: _Beam, answered: bool) -> _Retired:
        if answered:
            trajectory = Trajectory(
                task_id=task.id,
                steps=tuple(beam.steps),
                final_answer=beam.steps[-1].action.body,
                terminated_reason=TerminationReason.ANSWERED,
            )
        else:
            trajectory = Trajectory(
                task_id=task.id,
                steps=tuple(beam.steps),
                terminated_reason=TerminationReason.TURN_CAP_REACHED,
            )
        return _Retired(
            trajectory=trajectory,
            verdicts=tuple(beam.verdicts),
            score=beam.score,
            created=beam.created,
        )

    def dvts(self, task: Task, budget: SearchBudget) -> ScoredTrajectory:
        return self.dvts_report(task, budget).winner

    def dvts_report(self, task: Task, budget: SearchBudget) -> SearchReport:
        """Split the budget into n/width independent subtrees; argmax of their winners."""
        subtrees = budget.n // budget.beam_width
        if subtrees < 1:
            raise ValueError(
                f"budget n={budget.n} is smaller than beam width {budget.beam_width}"
            )
        winners: list[ScoredTrajectory] = []
        expansions = 0
        failures: list[Exception] = []
        for s in range(subtrees):
            try:
                report = self.beam_search_report(task, budget, self._config_for(s * 9973))
            except (AllBeamsFailed, AllRolloutsFailed) as exc:
                logger.warning("subtree %d failed on task %s: %s", s, task.id, exc)
                failures.append(exc)
                continue
            expansions += report.expansions
            winners.append(replace(report.winner, index=s))
        if not winners:
            raise AllBeamsFailed(f"every subtree failed on task {task.id}: {failures[-1] if failures else 'unknown'}")
        best = winners[0]
        for cand in winners[1:]:
            if cand.score > best.score:
                best = cand
        return SearchReport(strategy="dvts", winner=best, candidates=tuple(winners), expansions=expansions)

    def run(self, task: Task, strategy: str, budget: SearchBudget) -> SearchReport:
        """Dispatch by strategy name: bon, beam, or dvts."""
        if strategy == "bon":
            return self.best_of_n_report(task, budget)
        if strategy == "beam":
            return self.beam_search_report(task, budget)
        if strategy == "dvts":
            return self.dvts_report(task, budget)
        raise ValueError(f"unknown strategy: {strategy!r}")
