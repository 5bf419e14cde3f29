"""Shared builders for the test suite: tasks on disk, formatted model outputs."""

import os

from stepscore.model import FileStat, Step, StepAction, ActionKind, Task, Trajectory, TerminationReason


def write_task_dir(root, files):
    """Create a task source directory with the given {name: content} files."""
    os.makedirs(root, exist_ok=True)
    stats = []
    for name, content in files.items():
        path = os.path.join(root, name)
        os.makedirs(os.path.dirname(path), exist_ok=True) if os.path.dirname(name) else None
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(content)
        stats.append(FileStat(path=name, size=os.path.getsize(path)))
    return tuple(stats)


def make_task(tmp_path, files=None, query="What is the answer?", max_turns=10, task_id="t1",
              ground_truth=None):
    """Build a Task plus its on-disk source directory under tmp_path."""
    src = os.path.join(str(tmp_path), f"src-{task_id}")
    stats = write_task_dir(src, files or {})
    task = Task(
        id=task_id,
        query=query,
        files=stats,
        ground_truth_answer=ground_truth,
        max_turns=max_turns,
    )
    return task, src


def agent_code(reasoning, code):
    return f"<Analyze>{reasoning}</Analyze>\n<Code>```python\n{code}\n```</Code>"


def agent_answer(reasoning, answer):
    return f"<Analyze>{reasoning}</Analyze>\n<Answer>{answer}</Answer>"


def ver_probe(reasoning, code):
    return f"<reasoning>{reasoning}</reasoning>\n<code>```python\n{code}\n```</code>"


def ver_score(reasoning, score, summary):
    return f"<reasoning>{reasoning}</reasoning>\n<score>{score}</score>\n<summary>{summary}</summary>"


def code_step(index, code, observation="", ok=True, reasoning="think"):
    return Step(
        index=index,
        reasoning=reasoning,
        action=StepAction(kind=ActionKind.CODE, body=code),
        observation=observation,
        execution_ok=ok,
    )


def answer_step(index, answer, reasoning="conclude"):
    return Step(
        index=index,
        reasoning=reasoning,
        action=StepAction(kind=ActionKind.FINAL_ANSWER, body=answer),
    )


def answered_trajectory(task_id, codes_and_obs, answer):
    """Trajectory of code steps (code, observation, ok) capped with a final answer."""
    steps = []
    for i, (code, obs, ok) in enumerate(codes_and_obs):
        steps.append(code_step(i, code, obs, ok))
    steps.append(answer_step(len(steps), answer))
    return Trajectory(
        task_id=task_id,
        steps=tuple(steps),
        final_answer=answer,
        terminated_reason=TerminationReason.ANSWERED,
    )


def unanswered_trajectory(task_id, codes_and_obs):
    """Trajectory of code steps that ran out of turns without answering."""
    steps = tuple(code_step(i, c, obs, ok) for i, (c, obs, ok) in enumerate(codes_and_obs))
    return Trajectory(
        task_id=task_id,
        steps=steps,
        terminated_reason=TerminationReason.TURN_CAP_REACHED,
    )
