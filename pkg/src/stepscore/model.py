"""Core value types shared by every other module.

Everything here is an immutable value object: trajectories and their steps,
ternary reward values, per-step verdicts, and the feedback history that gets
threaded through successive verifications. Indices are 0-based in memory;
rendering to 1-based paragraph numbers happens in the tag protocol, not here.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterator

REWARD_VALUES = (0.0, 0.5, 1.0)


class ActionKind(str, Enum):
    CODE = "code"
    FINAL_ANSWER = "final_answer"


class TerminationReason(str, Enum):
    ANSWERED = "answered"
    TURN_CAP_REACHED = "turn_cap_reached"
    ERROR = "error"


class VerdictSource(str, Enum):
    VERIFIER = "verifier"
    GUARD = "guard"
    OVERRIDE = "override"


@dataclass(frozen=True)
class FileStat:
    """A task input file: workspace-relative path plus size in bytes."""

    path: str
    size: int

    def __post_init__(self) -> None:
        if not self.path or self.path.startswith("/") or ".." in self.path.split("/"):
            raise ValueError(f"file path must be relative and contained: {self.path!r}")
        if self.size < 0:
            raise ValueError("file size must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "size": self.size}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FileStat":
        return cls(path=data["path"], size=int(data["size"]))


@dataclass(frozen=True)
class Task:
    """One analysis problem: a natural-language query over a set of data files."""

    id: str
    query: str
    files: tuple[FileStat, ...] = ()
    ground_truth_answer: str | None = None
    max_turns: int = 10

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be non-empty")
        if not self.query:
            raise ValueError("task query must be non-empty")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        object.__setattr__(self, "files", tuple(self.files))

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "id": self.id,
            "query": self.query,
            "files": [f.to_dict() for f in self.files],
            "max_turns": self.max_turns,
        }
        if self.ground_truth_answer is not None:
            data["ground_truth_answer"] = self.ground_truth_answer
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Task":
        return cls(
            id=data["id"],
            query=data["query"],
            files=tuple(FileStat.from_dict(f) for f in data.get("files", [])),
            ground_truth_answer=data.get("ground_truth_answer"),
            max_turns=int(data.get("max_turns", 10)),
        )


@dataclass(frozen=True)
class RewardValue:
    """A ternary step reward: 1 correct, 0.5 recoverable, 0 irrecoverable."""

    value: float

    def __post_init__(self) -> None:
        v = float(self.value)
        if v not in REWARD_VALUES:
            raise ValueError(f"reward value must be one of {{0, 0.5, 1}}, got {self.value!r}")
        object.__setattr__(self, "value", v)

    def __float__(self) -> float:
        return self.value

    def as_token(self) -> str:
        """Canonical textual form used inside prompts: '0', '0.5' or '1'."""
        if self.value == 0.5:
            return "0.5"
        return str(int(self.value))


@dataclass(frozen=True)
class StepAction:
    """What the agent did in one step: ran a code cell or gave a final answer."""

    kind: ActionKind
    body: str

    def __post_init__(self) -> None:
        if not isinstance(self.kind, ActionKind):
            object.__setattr__(self, "kind", ActionKind(self.kind))
        if not self.body.strip():
            raise ValueError("action body must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "body": self.body}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepAction":
        return cls(kind=ActionKind(data["kind"]), body=data["body"])


@dataclass(frozen=True)
class Step:
    """One unified trajectory step: reasoning, action, and its observation."""

    index: int
    reasoning: str
    action: StepAction
    observation: str = ""
    execution_ok: bool = True

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("step index must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "reasoning": self.reasoning,
            "action": self.action.to_dict(),
            "observation": self.observation,
            "execution_ok": self.execution_ok,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Step":
        return cls(
            index=int(data["index"]),
            reasoning=data["reasoning"],
            action=StepAction.from_dict(data["action"]),
            observation=data.get("observation", ""),
            execution_ok=bool(data.get("execution_ok", True)),
        )


@dataclass(frozen=True)
class Trajectory:
    """An ordered run of steps for one task.

    ``terminated_reason`` is None for in-progress prefixes (partial beams,
    history slices); completed rollouts always set it. A final answer may only
    appear as the last step, and ``final_answer`` mirrors that step's body.
    """

    task_id: str
    steps: tuple[Step, ...] = ()
    final_answer: str | None = None
    terminated_reason: TerminationReason | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.terminated_reason is not None and not isinstance(self.terminated_reason, TerminationReason):
            object.__setattr__(self, "terminated_reason", TerminationReason(self.terminated_reason))
        for pos, step in enumerate(self.steps):
            if step.index != pos:
                raise ValueError(f"step at position {pos} carries index {step.index}")
        answer_positions = [s.index for s in self.steps if s.action.kind is ActionKind.FINAL_ANSWER]
        if len(answer_positions) > 1:
            raise ValueError("a trajectory may contain at most one final answer step")
        if answer_positions and answer_positions[0] != len(self.steps) - 1:
            raise ValueError("a final answer may only be the last step")
        if answer_positions:
            if self.final_answer != self.steps[-1].action.body:
                raise ValueError("final_answer must mirror the last step's body")
        elif self.final_answer is not None:
            raise ValueError("final_answer set but the last step is not a final answer")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def answered(self) -> bool:
        return self.final_answer is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "terminated_reason": self.terminated_reason.value if self.terminated_reason else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Trajectory":
        reason = data.get("terminated_reason")
        return cls(
            task_id=data["task_id"],
            steps=tuple(Step.from_dict(s) for s in data.get("steps", [])),
            final_answer=data.get("final_answer"),
            terminated_reason=TerminationReason(reason) if reason else None,
        )


@dataclass(frozen=True)
class StepVerdict:
    """The verifier's judgment of one step."""

    step_index: int
    reward: RewardValue
    rationale: str
    source: VerdictSource = VerdictSource.VERIFIER

    def __post_init__(self) -> None:
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if not isinstance(self.source, VerdictSource):
            object.__setattr__(self, "source", VerdictSource(self.source))
        if self.source is VerdictSource.VERIFIER and not self.rationale.strip():
            raise ValueError("verifier verdicts must carry a rationale")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "reward": self.reward.value,
            "rationale": self.rationale,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepVerdict":
        return cls(
            step_index=int(data["step_index"]),
            reward=RewardValue(float(data["reward"])),
            rationale=data["rationale"],
            source=VerdictSource(data.get("source", "verifier")),
        )


@dataclass(frozen=True)
class FeedbackHistory:
    """Ordered (reward, rationale) pairs from already-verified steps."""

    pairs: tuple[tuple[RewardValue, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple((r, c) for r, c in self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[RewardValue, str]]:
        return iter(self.pairs)

    def extended(self, reward: RewardValue, rationale: str) -> "FeedbackHistory":
        """Return a new history with one more pair appended; self is unchanged."""
        return FeedbackHistory(self.pairs + ((reward, rationale),))

    @classmethod
    def from_verdicts(cls, verdicts: list[StepVerdict] | tuple[StepVerdict, ...]) -> "FeedbackHistory":
        return cls(tuple((v.reward, v.rationale) for v in verdicts))


def history_prefix(trajectory: Trajectory, t: int) -> Trajectory:
    """Return the prefix holding the first ``t`` steps, leaving the input unmodified.

    The result is an in-progress trajectory (``terminated_reason`` None) unless
    it covers the whole input, in which case the original termination and
    answer are preserved.
    """
    if not 0 <= t <= len(trajectory.steps):
        raise IndexError(f"prefix length {t} out of range for {len(trajectory.steps)} steps")
    if t == len(trajectory.steps):
        return Trajectory(
            task_id=trajectory.task_id,
            steps=trajectory.steps,
            final_answer=trajectory.final_answer,
            terminated_reason=trajectory.terminated_reason,
        )
    return Trajectory(task_id=trajectory.task_id, steps=trajectory.steps[:t])
