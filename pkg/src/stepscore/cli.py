"""Operator entry point: configuration, experiment runs, reports.

Commands cover the full workflow: solve tasks, verify trajectories, run
test-time search, shape rewards for training, and drive the supervision-data
pipeline. Every run writes a self-describing directory: the config snapshot,
a deterministic manifest.json, wall-clock timings.json, and JSONL outputs.

Exit codes: 0 success, 1 workflow failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import re
import shutil
import sys
import time
from typing import Any, Sequence

import yaml

from . import pipeline as pl
from . import shaping
from .gateway import (
    BackendConfigError,
    ChatBackend,
    CompletionConfig,
    HttpChatBackend,
    ScriptedBackend,
    ToolRegistry,
    build_backend_from_env,
    build_default_registry,
)
from .model import FileStat, StepVerdict, Task, Trajectory, VerdictSource
from .sandbox import SandboxLimits, SandboxService
from .search import AggregationMethod, SearchBudget, SearchRunner, rollout
from .verifier import DEFAULT_K_MAX, StepVerifier

logger = logging.getLogger(__name__)

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(Exception):
    """Configuration problem; the message names the offending key."""

    def __init__(self, key: str, detail: str):
        super().__init__(f"config error at {key}: {detail}")
        self.key = key
        self.detail = detail


class WorkflowError(Exception):
    pass


def _interpolate(value: Any, key: str) -> Any:
    if isinstance(value, str):
        def sub(match: "re.Match[str]") -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(key, f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{key}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, f"{key}[{i}]") for i, v in enumerate(value)]
    return value


def load_config(path: str | None) -> dict[str, Any]:
    """Parse a YAML or JSON config file and interpolate ${VAR} references."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        if path.endswith((".yaml", ".yml")):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return {k: _interpolate(v, k) for k, v in data.items()}


def build_backend(name: str, spec: dict[str, Any] | None) -> ChatBackend:
    """Construct one named backend from its config block."""
    key = f"backends.{name}"
    if spec is None:
        raise ConfigError(key, "backend block is missing")
    kind = spec.get("kind")
    if kind == "scripted":
        matchers = spec.get("matchers", [])
        if not isinstance(matchers, list):
            raise ConfigError(f"{key}.matchers", "must be a list of [pattern, response] pairs")
        pairs = []
        for i, entry in enumerate(matchers):
            if not isinstance(entry, (list, tuple)) or len(entry) != 2:
                raise ConfigError(f"{key}.matchers[{i}]", "must be a [pattern, response] pair")
            pairs.append((entry[0], entry[1]))
        return ScriptedBackend(
            responses=spec.get("responses", []),
            matchers=pairs,
            default=spec.get("default"),
            loop=bool(spec.get("loop", False)),
        )
    if kind == "http":
        base_url = spec.get("base_url")
        if not base_url:
            raise ConfigError(f"{key}.base_url", "required for kind http")
        return HttpChatBackend(
            base_url=base_url,
            api_key=spec.get("api_key"),
            model=spec.get("model", "default"),
            timeout=float(spec.get("timeout", 120.0)),
        )
    if kind == "env":
        prefix = spec.get("prefix", name.upper())
        try:
            return build_backend_from_env(prefix)
        except BackendConfigError as exc:
            raise ConfigError(key, str(exc)) from exc
    raise ConfigError(f"{key}.kind", f"unknown backend kind {kind!r}")


class Runtime:
    """Everything a command needs, resolved from config plus flag overrides."""

    def __init__(self, config: dict[str, Any], args: argparse.Namespace):
        self.config = config
        self.args = args
        self._backends: dict[str, ChatBackend] = {}

    def backend(self, name: str) -> ChatBackend:
        if name not in self._backends:
            blocks = self.config.get("backends", {})
            if not isinstance(blocks, dict):
                raise ConfigError("backends", "must be a mapping")
            self._backends[name] = build_backend(name, blocks.get(name))
        return self._backends[name]

    def has_backend(self, name: str) -> bool:
        blocks = self.config.get("backends", {})
        return isinstance(blocks, dict) and name in blocks

    def completion_config(self) -> CompletionConfig:
        block = self.config.get("sampling", {})
        if not isinstance(block, dict):
            raise ConfigError("sampling", "must be a mapping")
        try:
            cfg = CompletionConfig(
                temperature=float(block.get("temperature", 0.7)),
                top_p=float(block.get("top_p", 0.9)),
                top_k=int(block.get("top_k", 20)),
                max_tokens=int(block.get("max_tokens", 8192)),
                seed=self.seed(),
            )
        except ValueError as exc:
            raise ConfigError("sampling", str(exc)) from exc
        return cfg

    def seed(self) -> int | None:
        if getattr(self.args, "seed", None) is not None:
            return self.args.seed
        value = self.config.get("seed")
        return int(value) if value is not None else None

    def parallelism(self) -> int:
        if getattr(self.args, "parallelism", None) is not None:
            value = self.args.parallelism
        else:
            value = self.config.get("parallelism", 1)
        value = int(value)
        if value < 1:
            raise ConfigError("parallelism", "must be >= 1")
        return value

    def beta(self) -> float:
        if getattr(self.args, "beta", None) is not None:
            value = self.args.beta
        else:
            value = self.config.get("beta", shaping.DEFAULT_BETA)
        return float(value)

    def k_max(self) -> int:
        value = int(self.config.get("k_max", DEFAULT_K_MAX))
        if value < 1:
            raise ConfigError("k_max", "must be >= 1")
        return value

    def aggregation(self) -> AggregationMethod:
        raw = getattr(self.args, "aggregation", None) or self.config.get("aggregation", "mean")
        try:
            return AggregationMethod(raw)
        except ValueError as exc:
            raise ConfigError("aggregation", f"unknown method {raw!r}") from exc

    def budget(self) -> SearchBudget:
        block = self.config.get("search", {})
        if not isinstance(block, dict):
            raise ConfigError("search", "must be a mapping")
        n = getattr(self.args, "n", None)
        width = getattr(self.args, "beam_width", None)
        branch = getattr(self.args, "branch", None)
        try:
            return SearchBudget(
                n=int(n if n is not None else block.get("n", 4)),
                beam_width=int(width if width is not None else block.get("beam_width", 2)),
                branch=int(branch if branch is not None else block.get("branch", 2)),
            )
        except ValueError as exc:
            raise ConfigError("search", str(exc)) from exc

    def strategy(self) -> str:
        raw = getattr(self.args, "strategy", None) or self.config.get("search", {}).get("strategy", "bon")
        if raw not in ("bon", "beam", "dvts"):
            raise ConfigError("search.strategy", f"unknown strategy {raw!r}")
        return raw

    def tasks_dir(self) -> str:
        path = getattr(self.args, "tasks_dir", None) or self.config.get("tasks_dir")
        if not path:
            raise ConfigError("tasks_dir", "no task directory given (flag --tasks-dir or config key)")
        if not os.path.isdir(path):
            raise ConfigError("tasks_dir", f"not a directory: {path}")
        return path

    def sandbox_service(self) -> SandboxService:
        block = self.config.get("sandbox", {})
        if not isinstance(block, dict):
            raise ConfigError("sandbox", "must be a mapping")
        limits = SandboxLimits(
            timeout_seconds=float(block.get("timeout_seconds", 120.0)),
            output_cap=int(block.get("output_cap", 8192)),
        )
        base = self.config.get("workspace_base")
        return SandboxService(limits=limits, base_dir=base, pool_size=max(8, self.parallelism()))

    def tool_registry(self) -> ToolRegistry | None:
        if not (self.has_backend("doc_expert") or self.has_backend("img_expert")):
            return None
        doc = self.backend("doc_expert") if self.has_backend("doc_expert") else None
        img = self.backend("img_expert") if self.has_backend("img_expert") else None
        return build_default_registry(doc, img)

    def verifier(self, service: SandboxService) -> StepVerifier:
        return StepVerifier(
            backend=self.backend("verifier"),
            service=service,
            registry=self.tool_registry(),
            config=self.completion_config(),
            k_max=self.k_max(),
        )

    def usage_snapshot(self) -> dict[str, dict[str, int]]:
        return {name: backend.usage.snapshot() for name, backend in sorted(self._backends.items())}


def load_task(task_dir: str) -> Task:
    """Read one task directory: task.json plus the data files it names."""
    meta_path = os.path.join(task_dir, "task.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise WorkflowError(f"cannot read {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise WorkflowError(f"cannot parse {meta_path}: {exc}") from exc
    query = meta.get("query")
    if not query:
        raise WorkflowError(f"{meta_path}: missing query")
    names = meta.get("files", [])
    stats = []
    for name in names:
        full = os.path.join(task_dir, name)
        if not os.path.isfile(full):
            raise WorkflowError(f"{meta_path}: data file {name} not found in task directory")
        stats.append(FileStat(path=name, size=os.path.getsize(full)))
    return Task(
        id=meta.get("id", os.path.basename(os.path.normpath(task_dir))),
        query=query,
        files=tuple(stats),
        ground_truth_answer=meta.get("ground_truth"),
        max_turns=int(meta.get("max_turns", 10)),
    )


def load_tasks(tasks_dir: str) -> list[tuple[Task, str]]:
    """Load every task under tasks_dir; a dir holding task.json is itself a task."""
    if os.path.isfile(os.path.join(tasks_dir, "task.json")):
        return [(load_task(tasks_dir), tasks_dir)]
    out: list[tuple[Task, str]] = []
    for entry in sorted(os.listdir(tasks_dir)):
        sub = os.path.join(tasks_dir, entry)
        if os.path.isdir(sub) and os.path.isfile(os.path.join(sub, "task.json")):
            out.append((load_task(sub), sub))
    if not out:
        raise WorkflowError(f"no task directories under {tasks_dir}")
    return out


class RunDir:
    """A self-describing output directory for one command invocation."""

    def __init__(self, path: str, config_path: str | None, config: dict[str, Any]):
        self.path = path
        os.makedirs(path, exist_ok=True)
        if config_path is not None:
            dest = os.path.join(path, "config" + os.path.splitext(config_path)[1])
            shutil.copyfile(config_path, dest)
        else:
            with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
                json.dump(config, fh, indent=2, sort_keys=True)
                fh.write("\n")
        self._timings: dict[str, float] = {}
        self._t0 = time.monotonic()

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def time_task(self, task_id: str, seconds: float) -> None:
        self._timings[task_id] = seconds

    def write_manifest(self, manifest: dict[str, Any]) -> None:
        with open(self.file("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_timings(self) -> None:
        data = {"tasks": self._timings, "total_seconds": time.monotonic() - self._t0}
        with open(self.file("timings.json"), "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _usage_delta(
    before: dict[str, dict[str, int]], after: dict[str, dict[str, int]]
) -> dict[str, dict[str, int]]:
    delta: dict[str, dict[str, int]] = {}
    for name, counts in after.items():
        prior = before.get(name, {"calls": 0, "tokens": 0})
        delta[name] = {
            "calls": counts["calls"] - prior["calls"],
            "tokens": counts["tokens"] - prior["tokens"],
        }
    return delta


def _trajectory_summary(traj: Trajectory, score: float | None = None, index: int | None = None) -> dict[str, Any]:
    data: dict[str, Any] = {
        "steps": len(traj.steps),
        "final_answer": traj.final_answer,
        "terminated_reason": traj.terminated_reason.value if traj.terminated_reason else None,
    }
    if score is not None:
        data["score"] = score
    if index is not None:
        data["index"] = index
    return data


def cmd_solve(rt: Runtime, run_dir: RunDir) -> int:
    policy = rt.backend("policy")
    service = rt.sandbox_service()
    registry = rt.tool_registry()
    config = rt.completion_config()
    records = []
    manifest_tasks = []
    for task, src in load_tasks(rt.tasks_dir()):
        before = rt.usage_snapshot()
        started = time.monotonic()
        workspace = service.create_workspace(task, src)
        try:
            trajectory = rollout(task, policy, service, workspace, config, registry)
        finally:
            service.destroy_workspace(workspace)
        run_dir.time_task(task.id, time.monotonic() - started)
        records.append(pl.trajectory_to_record(task, trajectory))
        manifest_tasks.append(
            {
                "task_id": task.id,
                "trajectory": _trajectory_summary(trajectory),
                "usage": _usage_delta(before, rt.usage_snapshot()),
            }
        )
    count = pl.export_jsonl(records, run_dir.file("trajectories.jsonl"))
    run_dir.write_manifest(
        {
            "command": "solve",
            "sampling": _sampling_block(rt),
            "tasks": manifest_tasks,
            "totals": {"tasks": len(manifest_tasks), "trajectories": count},
        }
    )
    run_dir.write_timings()
    return 0


def _sampling_block(rt: Runtime) -> dict[str, Any]:
    cfg = rt.completion_config()
    return {
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "top_k": cfg.top_k,
        "max_tokens": cfg.max_tokens,
        "seed": cfg.seed,
    }


def _tasks_by_id(rt: Runtime) -> dict[str, tuple[Task, str]]:
    return {task.id: (task, src) for task, src in load_tasks(rt.tasks_dir())}


def cmd_verify(rt: Runtime, run_dir: RunDir) -> int:
    input_path = rt.args.input
    records = pl.import_jsonl(input_path, kind="trajectory")
    service = rt.sandbox_service()
    verifier = rt.verifier(service)
    sources = _tasks_by_id(rt)
    annotations = []
    manifest_tasks = []
    for i, record in enumerate(records):
        task, trajectory = pl.trajectory_from_record(record)
        if task.id not in sources:
            raise WorkflowError(f"trajectory {i}: task {task.id} not found under tasks dir")
        src = sources[task.id][1]
        before = rt.usage_snapshot()
        started = time.monotonic()
        workspace = service.create_workspace(task, src)
        try:
            verdicts = verifier.verify_trajectory(task, trajectory, workspace)
        finally:
            service.destroy_workspace(workspace)
        run_dir.time_task(f"{task.id}/{i}", time.monotonic() - started)
        for verdict in verdicts:
            annotations.append(
                {
                    "task_id": task.id,
                    "trajectory_index": i,
                    "step_index": verdict.step_index,
                    "label": float(verdict.reward),
                    "rationale": verdict.rationale,
                }
            )
        manifest_tasks.append(
            {
                "task_id": task.id,
                "trajectory_index": i,
                "verdicts": [
                    {
                        "step_index": v.step_index,
                        "reward": float(v.reward),
                        "source": v.source.value,
                    }
                    for v in verdicts
                ],
                "usage": _usage_delta(before, rt.usage_snapshot()),
            }
        )
    count = pl.export_jsonl(annotations, run_dir.file("annotations.jsonl"))
    run_dir.write_manifest(
        {
            "command": "verify",
            "k_max": rt.k_max(),
            "tasks": manifest_tasks,
            "totals": {"trajectories": len(manifest_tasks), "annotations": count},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_search(rt: Runtime, run_dir: RunDir) -> int:
    service = rt.sandbox_service()
    budget = rt.budget()
    strategy = rt.strategy()
    runner = SearchRunner(
        policy=rt.backend("policy"),
        verifier=rt.verifier(service),
        service=service,
        source_dir="",
        config=rt.completion_config(),
        method=rt.aggregation(),
        parallelism=rt.parallelism(),
        tool_registry=rt.tool_registry(),
    )
    winners = []
    candidates = []
    manifest_tasks = []
    for task, src in load_tasks(rt.tasks_dir()):
        runner.source_dir = src
        before = rt.usage_snapshot()
        started = time.monotonic()
        report = runner.run(task, strategy, budget)
        run_dir.time_task(task.id, time.monotonic() - started)
        winners.append(pl.trajectory_to_record(task, report.winner.trajectory))
        for cand in report.candidates:
            record = pl.trajectory_to_record(task, cand.trajectory)
            record["candidate_index"] = cand.index
            record["score"] = cand.score
            candidates.append(record)
        manifest_tasks.append(
            {
                "task_id": task.id,
                "selection": {
                    "winner_index": report.winner.index,
                    "score": report.winner.score,
                    "final_answer": report.winner.trajectory.final_answer,
                },
                "candidates": [
                    {
                        "index": c.index,
                        "score": c.score,
                        "steps": len(c.trajectory.steps),
                        "final_answer": c.trajectory.final_answer,
                        "terminated_reason": c.trajectory.terminated_reason.value
                        if c.trajectory.terminated_reason
                        else None,
                        "verdicts": [float(v.reward) for v in c.verdicts],
                    }
                    for c in report.candidates
                ],
                "expansions": report.expansions,
                "usage": _usage_delta(before, rt.usage_snapshot()),
            }
        )
    pl.export_jsonl(winners, run_dir.file("trajectories.jsonl"))
    pl.export_jsonl(candidates, run_dir.file("candidates.jsonl"))
    run_dir.write_manifest(
        {
            "command": "search",
            "strategy": strategy,
            "budget": {"n": budget.n, "beam_width": budget.beam_width, "branch": budget.branch},
            "aggregation": rt.aggregation().value,
            "sampling": _sampling_block(rt),
            "tasks": manifest_tasks,
            "totals": {"tasks": len(manifest_tasks)},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_shape(rt: Runtime, run_dir: RunDir) -> int:
    trajectories = pl.import_jsonl(rt.args.input, kind="trajectory")
    annotations = [pl.AnnotatedStep.from_record(r) for r in pl.import_jsonl(rt.args.annotations, kind="annotation")]
    beta = rt.beta()

    labels: dict[tuple[str, int], dict[int, pl.AnnotatedStep]] = {}
    for a in annotations:
        labels.setdefault((a.task_id, a.trajectory_index), {})[a.step_index] = a

    by_task: dict[str, list[tuple[int, Task, Trajectory]]] = {}
    order: dict[str, int] = {}
    for record in trajectories:
        task, trajectory = pl.trajectory_from_record(record)
        index = order.get(task.id, 0)
        order[task.id] = index + 1
        by_task.setdefault(task.id, []).append((index, task, trajectory))

    shaped_records = []
    manifest_groups = []
    for task_id in sorted(by_task):
        members = by_task[task_id]
        if len(members) < 2:
            logger.warning("task %s has %d trajectories; shaping needs a group of >= 2, skipped", task_id, len(members))
            continue
        items = []
        for i, task, trajectory in members:
            annotated = labels.get((task_id, i), {})
            verdicts = [
                StepVerdict(
                    step_index=t,
                    reward=annotated[t].label,
                    rationale=annotated[t].rationale,
                    source=VerdictSource.VERIFIER,
                )
                for t in sorted(annotated)
            ]
            if not verdicts:
                raise WorkflowError(f"task {task_id} trajectory {i}: no step labels")
            gt = task.ground_truth_answer
            outcome = 1.0 if gt is not None and trajectory.final_answer == gt else 0.0
            items.append((verdicts, outcome))
        bundles, advantages = shaping.shape_group(items, beta=beta)
        for (i, task, trajectory), bundle, advantage in zip(members, bundles, advantages.advantages):
            shaped_records.append(
                {
                    "task_id": task_id,
                    "trajectory_index": i,
                    "outcome": bundle.outcome,
                    "prm_rewards": [float(r) for r in bundle.prm_rewards],
                    "beta": bundle.beta,
                    "total": bundle.total,
                    "advantage": advantage,
                }
            )
        manifest_groups.append(
            {
                "task_id": task_id,
                "size": len(members),
                "totals": [b.total for b in bundles],
                "advantages": list(advantages.advantages),
            }
        )
    count = pl.export_jsonl(shaped_records, run_dir.file("shaped.jsonl"))
    run_dir.write_manifest(
        {
            "command": "shape",
            "beta": beta,
            "groups": manifest_groups,
            "totals": {"groups": len(manifest_groups), "records": count},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_pipeline_sample(rt: Runtime, run_dir: RunDir) -> int:
    policy = rt.backend("policy")
    service = rt.sandbox_service()
    registry = rt.tool_registry()
    config = rt.completion_config()
    k = rt.args.k if rt.args.k is not None else int(rt.config.get("pipeline", {}).get("k", 4))
    records = []
    manifest_tasks = []
    discarded = 0
    for task, src in load_tasks(rt.tasks_dir()):
        before = rt.usage_snapshot()
        started = time.monotonic()
        group = pl.sample_k(task, policy, service, src, k=k, config=config, tool_registry=registry)
        run_dir.time_task(task.id, time.monotonic() - started)
        if group is None:
            discarded += 1
            manifest_tasks.append({"task_id": task.id, "discarded": True})
            continue
        records.extend(pl.group_to_records(task, group))
        manifest_tasks.append(
            {
                "task_id": task.id,
                "discarded": False,
                "answers": list(group.answers),
                "usage": _usage_delta(before, rt.usage_snapshot()),
            }
        )
    count = pl.export_jsonl(records, run_dir.file("trajectories.jsonl"))
    run_dir.write_manifest(
        {
            "command": "pipeline-sample",
            "k": k,
            "tasks": manifest_tasks,
            "totals": {"tasks": len(manifest_tasks), "discarded": discarded, "trajectories": count},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_pipeline_filter(rt: Runtime, run_dir: RunDir) -> int:
    records = pl.import_jsonl(rt.args.input, kind="trajectory")
    tasks, groups = pl.groups_from_records(records)
    mode = rt.args.strategy
    judge = rt.backend("judge") if rt.has_backend("judge") else None
    kept_records = []
    manifest_groups = []
    if mode == "diversity":
        for task_id in sorted(groups):
            group = groups[task_id]
            keep = pl.diversity_filter(group, judge)
            manifest_groups.append({"task_id": task_id, "kept": keep, "answers": list(group.answers)})
            if keep:
                kept_records.extend(pl.group_to_records(tasks[task_id], group))
    else:
        strategy = pl.FilterStrategy(mode)
        backends = pl.FilterBackends(judge=judge, critic=rt.backend("critic") if rt.has_backend("critic") else None)
        if strategy is pl.FilterStrategy.META_CRITIC and backends.critic is None:
            backends = pl.FilterBackends(judge=judge, critic=rt.backend("annotator") if rt.has_backend("annotator") else None)
        ordered = [groups[task_id] for task_id in sorted(groups)]
        filtered = pl.apply_trajectory_filter(ordered, strategy, backends)
        kept_ids = {g.task_id: g for g in filtered}
        for task_id in sorted(groups):
            kept_group = kept_ids.get(task_id)
            manifest_groups.append(
                {
                    "task_id": task_id,
                    "kept": kept_group is not None,
                    "trajectories": kept_group.k if kept_group else 0,
                }
            )
            if kept_group is not None:
                kept_records.extend(pl.group_to_records(tasks[task_id], kept_group))
    count = pl.export_jsonl(kept_records, run_dir.file("trajectories.jsonl"))
    run_dir.write_manifest(
        {
            "command": "pipeline-filter",
            "strategy": mode,
            "groups": manifest_groups,
            "totals": {"groups": len(manifest_groups), "kept_trajectories": count},
        }
    )
    run_dir.write_timings()
    return 0


def _load_knowledge(path: str | None) -> list[pl.ErrorCategory]:
    if path is None:
        return []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise WorkflowError(f"cannot read knowledge file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise WorkflowError(f"cannot parse knowledge file {path}: {exc}") from exc
    if not isinstance(data, list):
        raise WorkflowError(f"knowledge file {path} must hold a JSON list")
    return [pl.ErrorCategory.from_dict(d) for d in data]


def cmd_pipeline_annotate(rt: Runtime, run_dir: RunDir) -> int:
    records = pl.import_jsonl(rt.args.input, kind="trajectory")
    tasks, groups = pl.groups_from_records(records)
    sources = _tasks_by_id(rt)
    service = rt.sandbox_service()
    annotator = rt.backend("annotator")
    knowledge = _load_knowledge(rt.args.knowledge)
    config = rt.completion_config()
    all_annotations: list[pl.AnnotatedStep] = []
    manifest_tasks = []
    for task_id in sorted(groups):
        if task_id not in sources:
            raise WorkflowError(f"task {task_id} not found under tasks dir")
        task = tasks[task_id]
        src = sources[task_id][1]
        before = rt.usage_snapshot()
        started = time.monotonic()
        annotated = pl.annotate_group(
            task,
            groups[task_id],
            annotator,
            service,
            src,
            knowledge=knowledge,
            k_max=rt.k_max(),
            config=config,
            tool_registry=rt.tool_registry(),
        )
        run_dir.time_task(task_id, time.monotonic() - started)
        all_annotations.extend(annotated)
        manifest_tasks.append(
            {
                "task_id": task_id,
                "annotated_steps": len(annotated),
                "labels": [float(a.label) for a in annotated],
                "usage": _usage_delta(before, rt.usage_snapshot()),
            }
        )
    count = pl.export_jsonl([a.to_record() for a in all_annotations], run_dir.file("annotations.jsonl"))
    run_dir.write_manifest(
        {
            "command": "pipeline-annotate",
            "k_max": rt.k_max(),
            "knowledge_categories": [c.name for c in knowledge],
            "tasks": manifest_tasks,
            "totals": {"tasks": len(manifest_tasks), "annotations": count},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_pipeline_export(rt: Runtime, run_dir: RunDir) -> int:
    trajectory_records = pl.import_jsonl(rt.args.input, kind="trajectory")
    annotations = [pl.AnnotatedStep.from_record(r) for r in pl.import_jsonl(rt.args.annotations, kind="annotation")]
    by_key: dict[tuple[str, int], tuple[Task, Trajectory]] = {}
    order: dict[str, int] = {}
    for record in trajectory_records:
        task, trajectory = pl.trajectory_from_record(record)
        index = order.get(task.id, 0)
        order[task.id] = index + 1
        by_key[(task.id, index)] = (task, trajectory)
    corpus = []
    for a in annotations:
        key = (a.task_id, a.trajectory_index)
        if key not in by_key:
            raise WorkflowError(
                f"annotation references unknown trajectory {a.task_id}/{a.trajectory_index}"
            )
        task, trajectory = by_key[key]
        if not 0 <= a.step_index < len(trajectory.steps):
            raise WorkflowError(
                f"annotation references missing step {a.step_index} of {a.task_id}/{a.trajectory_index}"
            )
        step = trajectory.steps[a.step_index]
        corpus.append(
            {
                "task_id": a.task_id,
                "trajectory_index": a.trajectory_index,
                "step_index": a.step_index,
                "query": task.query,
                "reasoning": step.reasoning,
                "action": {"kind": step.action.kind.value, "body": step.action.body},
                "observation": step.observation,
                "label": float(a.label),
                "rationale": a.rationale,
            }
        )
    count = pl.export_jsonl(corpus, run_dir.file("corpus.jsonl"))
    run_dir.write_manifest(
        {
            "command": "pipeline-export",
            "totals": {"records": count},
        }
    )
    run_dir.write_timings()
    return 0


def cmd_pipeline_spotcheck(rt: Runtime, run_dir: RunDir) -> int:
    annotations = [pl.AnnotatedStep.from_record(r) for r in pl.import_jsonl(rt.args.input, kind="annotation")]
    seed = rt.seed()
    rng = random.Random(seed if seed is not None else 0)
    sample = pl.spotcheck_sample(annotations, rng, size=rt.args.size)
    pl.export_jsonl([a.to_record() for a in sample], run_dir.file("spotcheck.jsonl"))
    manifest: dict[str, Any] = {
        "command": "pipeline-spotcheck",
        "sample_size": len(sample),
        "seed": seed,
        "label_counts": {
            str(v): sum(1 for a in sample if float(a.label) == v) for v in (0.0, 0.5, 1.0)
        },
    }
    if rt.args.reference is not None:
        reference = [pl.AnnotatedStep.from_record(r) for r in pl.import_jsonl(rt.args.reference, kind="annotation")]
        ref_by_key = {(a.task_id, a.trajectory_index, a.step_index): a.label for a in reference}
        pairs = [
            (a.label, ref_by_key[(a.task_id, a.trajectory_index, a.step_index)])
            for a in sample
            if (a.task_id, a.trajectory_index, a.step_index) in ref_by_key
        ]
        if pairs:
            stats = pl.agreement_stats([p[0] for p in pairs], [p[1] for p in pairs])
            manifest["agreement"] = {
                "raw_accuracy": stats.raw_accuracy,
                "quadratic_weighted_kappa": stats.quadratic_weighted_kappa,
                "n": stats.n,
            }
            print(
                f"agreement over {stats.n} steps: raw accuracy {stats.raw_accuracy:.3f}, "
                f"quadratic-weighted kappa {stats.quadratic_weighted_kappa:.3f}"
            )
        else:
            manifest["agreement"] = None
    run_dir.write_manifest(manifest)
    run_dir.write_timings()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    manifest_path = os.path.join(args.run_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise WorkflowError(f"cannot read {manifest_path}: {exc}") from exc
    command = manifest.get("command", "?")
    print(f"run: {args.run_dir}")
    print(f"command: {command}")
    if command == "search":
        print(f"strategy: {manifest['strategy']}  aggregation: {manifest['aggregation']}")
        budget = manifest["budget"]
        print(f"budget: n={budget['n']} beam_width={budget['beam_width']} branch={budget['branch']}")
        header = f"{'task':<24} {'winner':>6} {'score':>8} {'calls':>6} {'tokens':>8}  answer"
        print(header)
        print("-" * len(header))
        for entry in manifest["tasks"]:
            usage = entry.get("usage", {})
            calls = sum(c.get("calls", 0) for c in usage.values())
            tokens = sum(c.get("tokens", 0) for c in usage.values())
            selection = entry["selection"]
            answer = selection.get("final_answer")
            shown = (answer[:40] + "...") if answer and len(answer) > 43 else (answer or "(none)")
            print(
                f"{entry['task_id']:<24} {selection['winner_index']:>6} "
                f"{selection['score']:>8.4f} {calls:>6} {tokens:>8}  {shown}"
            )
    elif command in ("solve", "verify", "pipeline-sample", "pipeline-annotate"):
        for entry in manifest.get("tasks", []):
            print(json.dumps(entry, sort_keys=True))
    else:
        print(json.dumps(manifest, indent=2, sort_keys=True))
    totals = manifest.get("totals")
    if totals:
        print(f"totals: {json.dumps(totals, sort_keys=True)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepscore", description=__doc__)
    parser.add_argument("--config", help="YAML or JSON config file")
    parser.add_argument("--run-dir", help="output directory for this run")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--tasks-dir", help="directory of task directories")
        p.add_argument("--seed", type=int, help="base sampling seed")
        p.add_argument("--parallelism", type=int, help="parallel rollout cap")

    p_solve = sub.add_parser("solve", help="one policy rollout per task")
    add_common(p_solve)

    p_verify = sub.add_parser("verify", help="verify a trajectory corpus step by step")
    add_common(p_verify)
    p_verify.add_argument("--input", required=True, help="trajectory JSONL to verify")

    p_search = sub.add_parser("search", help="test-time scaling search over tasks")
    add_common(p_search)
    p_search.add_argument("--strategy", choices=["bon", "beam", "dvts"])
    p_search.add_argument("--n", type=int, help="candidate budget")
    p_search.add_argument("--beam-width", type=int)
    p_search.add_argument("--branch", type=int)
    p_search.add_argument("--aggregation", choices=[m.value for m in AggregationMethod])

    p_shape = sub.add_parser("shape", help="mix rewards and compute group advantages")
    add_common(p_shape)
    p_shape.add_argument("--input", required=True, help="trajectory JSONL")
    p_shape.add_argument("--annotations", required=True, help="annotation JSONL")
    p_shape.add_argument("--beta", type=float, help="process-reward mixing weight")

    p_pipe = sub.add_parser("pipeline", help="supervision data pipeline")
    pipe_sub = p_pipe.add_subparsers(dest="pipeline_command", required=True)

    pp_sample = pipe_sub.add_parser("sample", help="k rollouts per task")
    add_common(pp_sample)
    pp_sample.add_argument("--k", type=int, help="rollouts per task")

    pp_filter = pipe_sub.add_parser("filter", help="filter a trajectory corpus")
    add_common(pp_filter)
    pp_filter.add_argument("--input", required=True)
    pp_filter.add_argument(
        "--strategy",
        default="diversity",
        choices=["diversity", "unfiltered", "outcome_consistency", "process_consistency", "meta_critic"],
    )

    pp_annotate = pipe_sub.add_parser("annotate", help="label steps with the training prompt")
    add_common(pp_annotate)
    pp_annotate.add_argument("--input", required=True)
    pp_annotate.add_argument("--knowledge", help="JSON file of merged error categories")

    pp_export = pipe_sub.add_parser("export", help="join trajectories and labels into a corpus")
    add_common(pp_export)
    pp_export.add_argument("--input", required=True, help="trajectory JSONL")
    pp_export.add_argument("--annotations", required=True, help="annotation JSONL")

    pp_spot = pipe_sub.add_parser("spotcheck", help="stratified sample for human review")
    add_common(pp_spot)
    pp_spot.add_argument("--input", required=True, help="annotation JSONL")
    pp_spot.add_argument("--size", type=int, default=100)
    pp_spot.add_argument("--reference", help="human-labeled annotation JSONL for agreement stats")

    p_report = sub.add_parser("report", help="print a table from a finished run")
    p_report.add_argument("run_dir", help="run directory holding manifest.json")

    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        return cmd_report(args)
    config = load_config(args.config)
    rt = Runtime(config, args)
    command = args.command
    if command == "pipeline":
        command = f"pipeline-{args.pipeline_command}"
    run_path = args.run_dir or config.get("run_dir") or os.path.join("runs", command)
    run_dir = RunDir(run_path, args.config, config)
    handlers = {
        "solve": cmd_solve,
        "verify": cmd_verify,
        "search": cmd_search,
        "shape": cmd_shape,
        "pipeline-sample": cmd_pipeline_sample,
        "pipeline-filter": cmd_pipeline_filter,
        "pipeline-annotate": cmd_pipeline_annotate,
        "pipeline-export": cmd_pipeline_export,
        "pipeline-spotcheck": cmd_pipeline_spotcheck,
    }
    return handlers[command](rt, run_dir)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except WorkflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("workflow failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
