"""Step-level supervision data construction.

K-way sampling of trajectories per task, a diversity filter that keeps only
groups with disagreeing answers, knowledge-augmented step annotation with the
training prompt, optional trajectory filters, JSONL import/export, and
spot-check sampling with agreement statistics.
"""

from __future__ import annotations

import json
import logging
import random
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any

from .gateway import ChatBackend, ChatMessage, CompletionConfig, ToolRegistry
from .model import (
    ActionKind,
    FeedbackHistory,
    RewardValue,
    Task,
    TerminationReason,
    Trajectory,
)
from .sandbox import ExecutionContext, SandboxService
from .search import JudgeFailure, cluster_by_equivalence, rollout
from .verifier import DEFAULT_K_MAX, StepVerifier, VerifierSession

logger = logging.getLogger(__name__)

NO_ANSWER = "<|NO_ANSWER|>"

SKIPPED_STEP_RATIONALE = "skipped: non-analytical execution failure"

# Observation markers that mark a failure as environmental rather than
# analytical: such steps carry no signal about the analysis itself and are
# excluded from annotation output.
NON_ANALYTICAL_MARKERS = (
    "TimeoutError",
    "SandboxError",
    "FileNotFoundError",
    "PermissionError",
    "IsADirectoryError",
    "UnicodeDecodeError",
    "MemoryError",
)


class PipelineError(Exception):
    pass


class MergerFailure(PipelineError):
    pass


class IoFailure(PipelineError):
    pass


class SchemaViolation(PipelineError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
        self.detail = detail


@dataclass(frozen=True)
class StepRef:
    """Pointer to one step of one trajectory in a corpus."""

    task_id: str
    trajectory_index: int
    step_index: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "trajectory_index": self.trajectory_index,
            "step_index": self.step_index,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepRef":
        return cls(
            task_id=data["task_id"],
            trajectory_index=data["trajectory_index"],
            step_index=data["step_index"],
        )


@dataclass(frozen=True)
class TrajectoryGroup:
    """K trajectories sampled for one task, with their final answers."""

    task_id: str
    trajectories: tuple[Trajectory, ...]
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("a trajectory group cannot be empty")
        if len(self.trajectories) != len(self.answers):
            raise ValueError("answers must align one-to-one with trajectories")
        for trajectory in self.trajectories:
            if trajectory.task_id != self.task_id:
                raise ValueError(
                    f"trajectory for task {trajectory.task_id!r} in group for {self.task_id!r}"
                )

    @property
    def k(self) -> int:
        return len(self.trajectories)

    @classmethod
    def from_trajectories(cls, task_id: str, trajectories: Sequence[Trajectory]) -> "TrajectoryGroup":
        answers = tuple(
            t.final_answer if t.final_answer is not None else NO_ANSWER for t in trajectories
        )
        return cls(task_id=task_id, trajectories=tuple(trajectories), answers=answers)


@dataclass(frozen=True)
class AnnotatedStep:
    """One ternary step label produced by the annotator."""

    task_id: str
    trajectory_index: int
    step_index: int
    label: RewardValue
    rationale: str
    annotator_trace: VerifierSession | None = None

    @property
    def ref(self) -> StepRef:
        return StepRef(self.task_id, self.trajectory_index, self.step_index)

    def to_record(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "trajectory_index": self.trajectory_index,
            "step_index": self.step_index,
            "label": float(self.label),
            "rationale": self.rationale,
        }

    @classmethod
    def from_record(cls, data: dict[str, Any]) -> "AnnotatedStep":
        return cls(
            task_id=data["task_id"],
            trajectory_index=data["trajectory_index"],
            step_index=data["step_index"],
            label=RewardValue(float(data["label"])),
            rationale=data["rationale"],
        )


@dataclass(frozen=True)
class ErrorCategory:
    """A recurring failure mode distilled from annotated steps."""

    name: str
    description: str
    exemplars: tuple[StepRef, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("error category name must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "exemplars": [ref.to_dict() for ref in self.exemplars],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ErrorCategory":
        return cls(
            name=data["name"],
            description=data["description"],
            exemplars=tuple(StepRef.from_dict(d) for d in data.get("exemplars", [])),
        )


def sample_k(
    task: Task,
    policy: ChatBackend,
    service: SandboxService,
    source_dir: str,
    k: int = 4,
    config: CompletionConfig | None = None,
    tool_registry: ToolRegistry | None = None,
) -> TrajectoryGroup | None:
    """Sample k independent rollouts for one task.

    Any rollout failure discards the whole group (logged, returns None) so a
    partial group never reaches annotation.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    config = config if config is not None else CompletionConfig()
    trajectories: list[Trajectory] = []
    for i in range(k):
        run_config = config if config.seed is None else replace(config, seed=config.seed + i)
        workspace = service.create_workspace(task, source_dir)
        try:
            trajectories.append(
                rollout(task, policy, service, workspace, run_config, tool_registry)
            )
        except Exception as exc:
            logger.warning(
                "discarding group for task %s: rollout %d failed: %s", task.id, i, exc
            )
            return None
        finally:
            service.destroy_workspace(workspace)
    return TrajectoryGroup.from_trajectories(task.id, trajectories)


def diversity_filter(group: TrajectoryGroup, judge: ChatBackend | None) -> bool:
    """Keep a group only when its final answers are not all equivalent.

    Exact string comparison runs first: a unanimous group is dropped without
    any judge call. The NO_ANSWER sentinel never equals a real answer.
    """
    first = group.answers[0]
    if all(a == first for a in group.answers):
        return False
    clusters = _cluster_answers(group.answers, judge)
    return len(clusters) > 1


def _cluster_answers(answers: Sequence[str], judge: ChatBackend | None) -> list[list[int]]:
    """Cluster answers by judged equivalence; NO_ANSWER only matches itself."""
    real_positions = [i for i, a in enumerate(answers) if a != NO_ANSWER]
    missing = [i for i, a in enumerate(answers) if a == NO_ANSWER]
    clusters = cluster_by_equivalence([answers[i] for i in real_positions], judge)
    mapped = [[real_positions[i] for i in members] for members in clusters]
    if missing:
        mapped.append(missing)
    return mapped


def is_non_analytical_failure(observation: str, execution_ok: bool) -> bool:
    if execution_ok:
        return False
    return any(marker in observation for marker in NON_ANALYTICAL_MARKERS)


def format_error_knowledge(categories: Sequence[ErrorCategory]) -> str:
    """Render merged error categories as a knowledge block for the training prompt."""
    if not categories:
        return ""
    lines = [
        "# Error Knowledge",
        "The following recurring error categories were distilled from earlier annotations.",
        "Use them as reference patterns when scoring the current paragraph.",
        "",
    ]
    for i, cat in enumerate(categories, start=1):
        suffix = f" (seen in {len(cat.exemplars)} annotated steps)" if cat.exemplars else ""
        lines.append(f"{i}. {cat.name}: {cat.description}{suffix}")
    return "\n".join(lines) + "\n"


def annotate_group(
    task: Task,
    group: TrajectoryGroup,
    annotator: ChatBackend,
    service: SandboxService,
    source_dir: str,
    knowledge: Sequence[ErrorCategory] = (),
    k_max: int = DEFAULT_K_MAX,
    config: CompletionConfig | None = None,
    tool_registry: ToolRegistry | None = None,
) -> list[AnnotatedStep]:
    """Label every analytical step of every trajectory in the group.

    Runs the verification loop with the training prompt variant, injecting the
    merged error knowledge as few-shot reference material. Steps that failed
    for non-analytical reasons (timeouts, broken files) are excluded from the
    output; their feedback slot is filled with a synthetic pair so later steps
    still see a complete history.
    """
    knowledge_text = format_error_knowledge(knowledge) or None
    verifier = StepVerifier(
        backend=annotator,
        service=service,
        registry=tool_registry,
        config=config,
        k_max=k_max,
        variant="training",
        knowledge_text=knowledge_text,
    )
    annotated: list[AnnotatedStep] = []
    for j, trajectory in enumerate(group.trajectories):
        workspace = service.create_workspace(task, source_dir)
        try:
            feedback = FeedbackHistory()
            agent_ctx = ExecutionContext()
            for t, step in enumerate(trajectory.steps):
                if step.action.kind is ActionKind.CODE and step.execution_ok:
                    agent_ctx = agent_ctx.with_cell(step.action.body)
                if is_non_analytical_failure(step.observation, step.execution_ok):
                    logger.info(
                        "skipping non-analytical step %d of trajectory %d on task %s",
                        t, j, task.id,
                    )
                    feedback = feedback.extended(RewardValue(0.5), SKIPPED_STEP_RATIONALE)
                    continue
                outcome = verifier.verify_step(task, trajectory, t, feedback, workspace, agent_ctx)
                annotated.append(
                    AnnotatedStep(
                        task_id=task.id,
                        trajectory_index=j,
                        step_index=t,
                        label=outcome.verdict.reward,
                        rationale=outcome.verdict.rationale,
                        annotator_trace=outcome.session,
                    )
                )
                feedback = feedback.extended(outcome.verdict.reward, outcome.verdict.rationale)
        finally:
            service.destroy_workspace(workspace)
    return annotated


MERGER_SYSTEM = (
    "You decide whether two error categories describe the same underlying failure mode. "
    "Reply with exactly YES or NO."
)


def _same_failure_mode(merger: ChatBackend, a: ErrorCategory, b: ErrorCategory) -> bool:
    reply = merger.complete(
        [
            ChatMessage("system", MERGER_SYSTEM),
            ChatMessage(
                "user",
                f"Category A: {a.name} - {a.description}\n"
                f"Category B: {b.name} - {b.description}\n\nSame failure mode?",
            ),
        ]
    )
    token = reply.strip().split()[0].upper().strip(".,:;!") if reply.strip() else ""
    if token.startswith("YES"):
        return True
    if token.startswith("NO"):
        return False
    raise MergerFailure(f"merger backend returned {reply[:80]!r}, expected YES or NO")


def merge_error_categories(
    raw: Sequence[ErrorCategory], merger: ChatBackend
) -> list[ErrorCategory]:
    """Greedy single-pass merge: each category joins the first accepted match.

    Identical names merge without a backend call; otherwise the merger backend
    is asked pairwise. The accepted category keeps its name and description
    and absorbs the newcomer's exemplars.
    """
    if not raw:
        raise ValueError("cannot merge an empty category list")
    merged: list[ErrorCategory] = []
    for cat in raw:
        target = None
        for i, existing in enumerate(merged):
            if existing.name == cat.name or _same_failure_mode(merger, existing, cat):
                target = i
                break
        if target is None:
            merged.append(cat)
        else:
            existing = merged[target]
            merged[target] = ErrorCategory(
                name=existing.name,
                description=existing.description,
                exemplars=existing.exemplars + cat.exemplars,
            )
    return merged


class FilterStrategy(str, Enum):
    UNFILTERED = "unfiltered"
    OUTCOME_CONSISTENCY = "outcome_consistency"
    PROCESS_CONSISTENCY = "process_consistency"
    META_CRITIC = "meta_critic"


@dataclass
class FilterBackends:
    """What each filter strategy needs; unused fields may stay None."""

    judge: ChatBackend | None = None
    critic: ChatBackend | None = None
    annotate_fn: Callable[[TrajectoryGroup], list[AnnotatedStep]] | None = None


CRITIC_SYSTEM = (
    "You review a data analysis trajectory and decide whether its reasoning and final answer "
    "are sound enough to train on. Reply with exactly YES or NO."
)


def _render_trajectory_for_critic(trajectory: Trajectory) -> str:
    lines = []
    for step in trajectory.steps:
        lines.append(f"[Step {step.index + 1}] {step.reasoning}")
        if step.action.kind is ActionKind.CODE:
            lines.append(f"Code:\n{step.action.body}")
            lines.append(f"Output:\n{step.observation}")
        else:
            lines.append(f"Final Answer: {step.action.body}")
    if trajectory.final_answer is None:
        lines.append("(no final answer)")
    return "\n".join(lines)


def _critic_approves(critic: ChatBackend, trajectory: Trajectory) -> bool:
    reply = critic.complete(
        [
            ChatMessage("system", CRITIC_SYSTEM),
            ChatMessage("user", _render_trajectory_for_critic(trajectory)),
        ]
    )
    token = reply.strip().split()[0].upper().strip(".,:;!") if reply.strip() else ""
    if token.startswith("YES"):
        return True
    if token.startswith("NO"):
        return False
    raise JudgeFailure(f"critic returned {reply[:80]!r}, expected YES or NO")


def _labels_by_trajectory(annotations: Sequence[AnnotatedStep]) -> dict[int, dict[int, float]]:
    table: dict[int, dict[int, float]] = {}
    for a in annotations:
        table.setdefault(a.trajectory_index, {})[a.step_index] = float(a.label)
    return table


def _filter_group(
    group: TrajectoryGroup,
    strategy: FilterStrategy,
    backends: FilterBackends,
) -> TrajectoryGroup | None:
    if strategy is FilterStrategy.UNFILTERED:
        return group

    keep: list[int]
    if strategy is FilterStrategy.OUTCOME_CONSISTENCY:
        clusters = _cluster_answers(group.answers, backends.judge)
        best = max(clusters, key=lambda members: (len(members), -members[0]))
        keep = sorted(best)
    elif strategy is FilterStrategy.PROCESS_CONSISTENCY:
        if backends.annotate_fn is None:
            raise ValueError("process consistency filtering needs an annotate_fn backend")
        first = _labels_by_trajectory(backends.annotate_fn(group))
        second = _labels_by_trajectory(backends.annotate_fn(group))
        keep = [
            j
            for j in range(group.k)
            if first.get(j, {}) == second.get(j, {})
        ]
    elif strategy is FilterStrategy.META_CRITIC:
        if backends.critic is None:
            raise ValueError("meta-critic filtering needs a critic backend")
        keep = [j for j in range(group.k) if _critic_approves(backends.critic, group.trajectories[j])]
    else:
        raise ValueError(f"unknown filter strategy: {strategy!r}")

    if not keep:
        return None
    return TrajectoryGroup(
        task_id=group.task_id,
        trajectories=tuple(group.trajectories[j] for j in keep),
        answers=tuple(group.answers[j] for j in keep),
    )


def apply_trajectory_filter(
    groups: Sequence[TrajectoryGroup],
    strategy: FilterStrategy,
    backends: FilterBackends | None = None,
) -> list[TrajectoryGroup]:
    """Apply one filtering strategy group by group; output is a subset of input."""
    backends = backends if backends is not None else FilterBackends()
    if strategy is FilterStrategy.UNFILTERED:
        return list(groups)
    out: list[TrajectoryGroup] = []
    for group in groups:
        filtered = _filter_group(group, strategy, backends)
        if filtered is not None:
            out.append(filtered)
    return out


_TERMINATION_TOKENS = {reason.value: reason for reason in TerminationReason}


def trajectory_to_record(task: Task, trajectory: Trajectory) -> dict[str, Any]:
    task_block: dict[str, Any] = {
        "id": task.id,
        "query": task.query,
        "files": [f.to_dict() for f in task.files],
        "max_turns": task.max_turns,
    }
    if task.ground_truth_answer is not None:
        task_block["ground_truth"] = task.ground_truth_answer
    record: dict[str, Any] = {
        "task": task_block,
        "steps": [
            {
                "reasoning": s.reasoning,
                "action": {"kind": s.action.kind.value, "body": s.action.body},
                "observation": s.observation,
                "execution_ok": s.execution_ok,
            }
            for s in trajectory.steps
        ],
        "terminated_reason": trajectory.terminated_reason.value
        if trajectory.terminated_reason is not None
        else None,
    }
    if trajectory.final_answer is not None:
        record["final_answer"] = trajectory.final_answer
    return record


def trajectory_from_record(record: dict[str, Any]) -> tuple[Task, Trajectory]:
    from .model import FileStat, Step, StepAction

    task_block = record["task"]
    task = Task(
        id=task_block["id"],
        query=task_block["query"],
        files=tuple(FileStat.from_dict(d) for d in task_block.get("files", [])),
        ground_truth_answer=task_block.get("ground_truth"),
        max_turns=task_block["max_turns"],
    )
    steps = tuple(
        Step(
            index=i,
            reasoning=s["reasoning"],
            action=StepAction(kind=ActionKind(s["action"]["kind"]), body=s["action"]["body"]),
            observation=s["observation"],
            execution_ok=s["execution_ok"],
        )
        for i, s in enumerate(record["steps"])
    )
    reason_token = record["terminated_reason"]
    reason = _TERMINATION_TOKENS[reason_token] if reason_token is not None else None
    trajectory = Trajectory(
        task_id=task.id,
        steps=steps,
        final_answer=record.get("final_answer"),
        terminated_reason=reason,
    )
    return task, trajectory


def export_jsonl(records: Iterable[dict[str, Any]], path: str) -> int:
    """Write one JSON object per line; returns the record count."""
    count = 0
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
                fh.write("\n")
                count += 1
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return count


def import_jsonl(path: str, kind: str = "trajectory") -> list[dict[str, Any]]:
    """Read and validate a JSONL corpus; malformed lines fail with their line number."""
    if kind not in ("trajectory", "annotation"):
        raise ValueError(f"unknown corpus kind: {kind!r}")
    records: list[dict[str, Any]] = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(lineno, f"invalid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise SchemaViolation(lineno, "record must be a JSON object")
        try:
            if kind == "trajectory":
                trajectory_from_record(record)
            else:
                AnnotatedStep.from_record(record)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(lineno, f"invalid {kind} record: {exc}") from exc
        records.append(record)
    return records


def spotcheck_sample(
    annotations: Sequence[AnnotatedStep],
    rng: random.Random,
    size: int = 100,
) -> list[AnnotatedStep]:
    """Draw a label-stratified sample for human spot-checking.

    Strata are the three reward values; allocation is proportional with
    largest-remainder rounding, sampling without replacement inside a stratum.
    """
    if size < 1:
        raise ValueError("sample size must be >= 1")
    if len(annotations) <= size:
        return list(annotations)
    strata: dict[float, list[AnnotatedStep]] = {}
    for a in annotations:
        strata.setdefault(float(a.label), []).append(a)
    labels = sorted(strata)
    total = len(annotations)
    quotas: dict[float, int] = {}
    remainders: list[tuple[float, float]] = []
    for label in labels:
        exact = size * len(strata[label]) / total
        quotas[label] = min(int(exact), len(strata[label]))
        remainders.append((exact - int(exact), label))
    assigned = sum(quotas.values())
    remainders.sort(key=lambda pair: (-pair[0], pair[1]))
    while assigned < size:
        progressed = False
        for _frac, label in remainders:
            if assigned >= size:
                break
            if quotas[label] < len(strata[label]):
                quotas[label] += 1
                assigned += 1
                progressed = True
        if not progressed:
            break
    sample: list[AnnotatedStep] = []
    for label in labels:
        sample.extend(rng.sample(strata[label], quotas[label]))
    return sample


@dataclass(frozen=True)
class AgreementStats:
    raw_accuracy: float
    quadratic_weighted_kappa: float
    n: int


def agreement_stats(
    labels_a: Sequence[RewardValue | float],
    labels_b: Sequence[RewardValue | float],
) -> AgreementStats:
    """Raw accuracy and quadratic-weighted kappa between two ternary label lists."""
    if len(labels_a) != len(labels_b):
        raise ValueError("label lists must have equal length")
    if not labels_a:
        raise ValueError("label lists must be non-empty")
    order = [0.0, 0.5, 1.0]
    index = {v: i for i, v in enumerate(order)}
    a_idx = [index[float(v)] for v in labels_a]
    b_idx = [index[float(v)] for v in labels_b]
    n = len(a_idx)
    k = len(order)

    agree = sum(1 for x, y in zip(a_idx, b_idx) if x == y)
    raw = agree / n

    observed = [[0.0] * k for _ in range(k)]
    for x, y in zip(a_idx, b_idx):
        observed[x][y] += 1.0
    marg_a = [sum(observed[i][j] for j in range(k)) for i in range(k)]
    marg_b = [sum(observed[i][j] for i in range(k)) for j in range(k)]

    denom_scale = (k - 1) ** 2
    num = 0.0
    den = 0.0
    for i in range(k):
        for j in range(k):
            w = (i - j) ** 2 / denom_scale
            expected = marg_a[i] * marg_b[j] / n
            num += w * observed[i][j]
            den += w * expected
    if den == 0.0:
        kappa = 1.0 if num == 0.0 else 0.0
    else:
        kappa = 1.0 - num / den
    return AgreementStats(raw_accuracy=raw, quadratic_weighted_kappa=kappa, n=n)


def group_to_records(task: Task, group: TrajectoryGroup) -> list[dict[str, Any]]:
    return [trajectory_to_record(task, t) for t in group.trajectories]


def groups_from_records(records: Sequence[dict[str, Any]]) -> tuple[dict[str, Task], dict[str, TrajectoryGroup]]:
    """Rebuild per-task groups from a flat trajectory corpus, preserving order."""
    tasks: dict[str, Task] = {}
    buckets: dict[str, list[Trajectory]] = {}
    for record in records:
        task, trajectory = trajectory_from_record(record)
        tasks.setdefault(task.id, task)
        buckets.setdefault(task.id, []).append(trajectory)
    groups = {
        task_id: TrajectoryGroup.from_trajectories(task_id, trajectories)
        for task_id, trajectories in buckets.items()
    }
    return tasks, groups
