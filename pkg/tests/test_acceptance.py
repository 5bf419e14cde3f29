"""Acceptance gate: the guarantees this engine is sold on, one verdict line each.

Every test here exercises one headline guarantee end to end against scripted
backends and an independent oracle, then prints a single PASS or FAIL line so
the gate can be read off the terminal without digging through pytest output.
Nothing in this file talks to a network.
"""

import itertools
import json
import math
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from stepscore.cli import main as cli_main
from stepscore.gateway import CompletionConfig, ScriptedBackend, UsageCounter
from stepscore.model import (
    FeedbackHistory,
    FileStat,
    RewardValue,
    Task,
    TerminationReason,
    Trajectory,
    VerdictSource,
)
from stepscore.pipeline import (
    FilterStrategy,
    TrajectoryGroup,
    apply_trajectory_filter,
    diversity_filter,
    export_jsonl,
    import_jsonl,
    trajectory_from_record,
    trajectory_to_record,
)
from stepscore.sandbox import ExecutionContext, SandboxLimits, SandboxService
from stepscore.search import AggregationMethod, SearchBudget, SearchRunner, aggregate
from stepscore.shaping import (
    bayes_cell_label,
    bayes_reward,
    clipped_objective,
    consistency_override,
    group_advantage,
    mix_rewards,
)
from stepscore.verifier import INCONCLUSIVE_RATIONALE, StepVerifier
from helpers import (
    agent_answer,
    agent_code,
    answer_step,
    answered_trajectory,
    code_step,
    make_task,
    unanswered_trajectory,
    ver_probe,
    ver_score,
)


@contextmanager
def _gate(capsys, label):
    """Print exactly one PASS/FAIL line for the wrapped block."""
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"[FAIL] {label}", flush=True)
        raise
    with capsys.disabled():
        print(f"[PASS] {label}", flush=True)


def _sign_test_p(wins, losses):
    """One-sided exact binomial tail: P(X >= wins) for X ~ Binomial(n, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(wins, n + 1))
    return tail / 2.0 ** n


def test_reward_formulas_match_independent_oracles(capsys):
    with _gate(capsys, "reward formulas agree with independent oracles"):
        started = time.monotonic()
        rng = random.Random(101)

        # mixing: default weighting splits outcome and mean step reward evenly
        for _ in range(1000):
            outcome = float(rng.randint(0, 1))
            prm = [rng.choice((0.0, 0.5, 1.0)) for _ in range(rng.randint(1, 12))]
            bundle = mix_rewards(outcome, [RewardValue(v) for v in prm])
            want = 0.5 * outcome + 0.5 * (sum(prm) / len(prm))
            assert abs(bundle.total - want) <= 1e-12
            assert bundle.beta == 0.5

        # final-step override truth table
        table = [
            (1.0, 1.0, 1.0),
            (0.5, 1.0, 1.0),
            (0.0, 1.0, 1.0),
            (1.0, 0.0, 0.0),
            (0.5, 0.0, 0.0),
            (0.0, 0.0, 0.0),
        ]
        for prm_final, outcome, want in table:
            assert float(consistency_override(RewardValue(prm_final), outcome)) == want

        # group normalization against plain population statistics
        for _ in range(1000):
            totals = [rng.uniform(0.0, 1.0) for _ in range(rng.randint(2, 9))]
            got = group_advantage(totals)
            mean = math.fsum(totals) / len(totals)
            std = math.sqrt(math.fsum((t - mean) ** 2 for t in totals) / len(totals))
            if std < 1e-8:
                want = [0.0] * len(totals)
            else:
                want = [(t - mean) / std for t in totals]
            assert got.totals == tuple(totals)
            for g, w in zip(got.advantages, want):
                assert abs(g - w) <= 1e-9
        alternating = group_advantage([1.0, 0.0, 1.0, 0.0])
        for g, w in zip(alternating.advantages, (1.0, -1.0, 1.0, -1.0)):
            assert abs(g - w) <= 1e-9

        # token-level clipped surrogate against per-token brute force
        for _ in range(1000):
            width = rng.randint(1, 5)
            ratios = [
                [rng.uniform(0.0, 2.5) for _ in range(rng.randint(1, 6))]
                for _ in range(width)
            ]
            advantages = [rng.uniform(-2.0, 2.0) for _ in range(width)]
            got = clipped_objective(ratios, advantages)
            total = 0.0
            count = 0
            for row, adv in zip(ratios, advantages):
                for rho in row:
                    limited = min(max(rho, 1.0 - 0.2), 1.0 + 0.28)
                    total += min(rho * adv, limited * adv)
                    count += 1
            assert abs(got - total / count) <= 1e-9

        # two-factor reward cells at the balanced weighting
        assert float(bayes_reward(1, 1)) == 1.0
        assert float(bayes_reward(0, 1)) == 0.5
        assert float(bayes_reward(0, 0)) == 0.0
        assert bayes_cell_label(1, 1) == "strictly_correct"
        assert bayes_cell_label(0, 1) == "correctable"
        assert bayes_cell_label(0, 0) == "irrecoverable"

        assert time.monotonic() - started < 5.0


def _fuzz_response(rng):
    kind = rng.randrange(12)
    if kind == 0:
        return ""
    if kind == 1:
        return "let me think about this without any structure at all"
    if kind == 2:
        return "<reasoning>half open"
    if kind == 3:
        return "<reasoning>r</reasoning>"
    if kind == 4:
        return "<reasoning>r</reasoning><summary>s</summary>"
    if kind == 5:
        bad = rng.choice(("2", "-1", "0.75", "1.00001", "", "high", "0,5"))
        return f"<reasoning>r</reasoning>\n<score>{bad}</score>\n<summary>s</summary>"
    if kind == 6:
        return "<reasoning>r</reasoning>\n<score>1</score>"
    if kind == 7:
        return "<score>0.5</score>\n<summary>s</summary>"
    if kind == 8:
        return "<reasoning>r</reasoning>\n<code>print 1</code>"
    if kind == 9:
        probe = rng.choice(
            ("print x", 'print defined("x")', 'fail "broken probe"', "nonsense ! tokens")
        )
        return ver_probe("poking around", probe)
    if kind == 10:
        return ver_score("settled", rng.choice(("0", "0.5", "1")), "plain verdict")
    return ver_probe("one more look", "print 1")


def test_fuzzed_verifier_rewards_stay_ternary(tmp_path, service, capsys):
    with _gate(capsys, "fuzzed verifier rewards stay on the ternary scale"):
        task, src = make_task(tmp_path, max_turns=3)
        ws = service.create_workspace(task, src)
        answered = answered_trajectory(
            task.id, [("x = 1", "", True), ("y = x + 1", "", True)], "7"
        )
        capped = unanswered_trajectory(
            task.id, [("x = 1", "", True), ("y = 2", "", True), ("print y", "2\n", True)]
        )
        contexts = {
            0: ExecutionContext(("x = 1",)),
            1: ExecutionContext(("x = 1", "y = x + 1")),
            2: ExecutionContext(("x = 1", "y = x + 1")),
        }
        capped_context = ExecutionContext(("x = 1", "y = 2", "print y"))

        rng = random.Random(77)
        seen = set()
        nudged = 0
        inconclusive = 0
        guarded_no_answer = 0
        for case in range(10_000):
            if case % 25 == 24:
                backend = ScriptedBackend(default="never consulted")
                verifier = StepVerifier(backend, service)
                feedback = FeedbackHistory(
                    tuple((RewardValue(rng.choice((0.0, 0.5, 1.0))), "prior") for _ in range(2))
                )
                outcome = verifier.verify_step(task, capped, 2, feedback, ws, capped_context)
                assert backend.usage.snapshot()["calls"] == 0
                guarded_no_answer += 1
            else:
                t = rng.randrange(3)
                responses = [_fuzz_response(rng) for _ in range(rng.randint(1, 5))]
                backend = ScriptedBackend(responses=responses, default=_fuzz_response(rng))
                verifier = StepVerifier(backend, service)
                feedback = FeedbackHistory(
                    tuple((RewardValue(rng.choice((0.0, 0.5, 1.0))), "prior") for _ in range(t))
                )
                outcome = verifier.verify_step(task, answered, t, feedback, ws, contexts[t])
                if outcome.session.nudged:
                    nudged += 1
                if (
                    outcome.verdict.source is VerdictSource.GUARD
                    and outcome.verdict.rationale == INCONCLUSIVE_RATIONALE
                ):
                    inconclusive += 1
            reward = float(outcome.verdict.reward)
            assert reward in (0.0, 0.5, 1.0)
            seen.add(reward)
        assert seen == {0.0, 0.5, 1.0}
        assert nudged > 0
        assert inconclusive > 0
        assert guarded_no_answer > 0
        service.destroy_workspace(ws)


def test_verifier_prompt_protocol_and_final_step_guard(tmp_path, service, capsys):
    with _gate(capsys, "verifier prompts carry exactly the prior feedback and the last step is guarded"):
        task, src = make_task(tmp_path, max_turns=3)
        ws = service.create_workspace(task, src)
        backend = ScriptedBackend(
            responses=[
                ver_score("first look", "1", "clean load"),
                ver_score("second look", "0.5", "shaky middle"),
                ver_score("third look", "1", "solid finish"),
            ]
        )
        verifier = StepVerifier(backend, service)
        trajectory = answered_trajectory(
            task.id, [("x = 1", "", True), ("print x", "1\n", True)], "1"
        )
        verdicts = verifier.verify_trajectory(task, trajectory, ws)
        assert [float(v.reward) for v in verdicts] == [1.0, 0.5, 1.0]
        assert len(backend.transcript) == 3
        for t, messages in enumerate(backend.transcript):
            user = next(m for m in messages if m.role == "user")
            assert user.content.count("[Verification ") == t
            assert f"[Paragraph {t + 1}]" in user.content
            assert "[Paragraph 0]" not in user.content
        last_user = next(m for m in backend.transcript[2] if m.role == "user")
        assert "[Verification 1] Score: 1 | Rationale: clean load" in last_user.content
        assert "[Verification 2] Score: 0.5 | Rationale: shaky middle" in last_user.content

        guard_backend = ScriptedBackend(default="never consulted")
        guard_verifier = StepVerifier(guard_backend, service)
        capped = unanswered_trajectory(
            task.id, [("a = 1", "", True), ("b = 2", "", True), ("c = 3", "", True)]
        )
        outcome = guard_verifier.verify_step(
            task,
            capped,
            2,
            FeedbackHistory(((RewardValue(1.0), "fine"), (RewardValue(1.0), "fine"))),
            ws,
            ExecutionContext(("a = 1", "b = 2", "c = 3")),
        )
        assert float(outcome.verdict.reward) == 0.0
        assert outcome.verdict.source is VerdictSource.GUARD
        assert guard_backend.usage.snapshot()["calls"] == 0
        service.destroy_workspace(ws)


class _TreePolicy:
    """Enumerates a fixed two-level tree by cycling children per prefix."""

    _LEAVES = {"A": ("leafAA", "leafAB"), "B": ("leafBA", "leafBB")}

    def __init__(self):
        self.usage = UsageCounter()
        self._counts = {}
        self._lock = threading.Lock()

    def complete(self, messages, config=None):
        prefix = tuple(m.content for m in messages if m.role == "assistant")
        with self._lock:
            pick = self._counts.get(prefix, 0)
            self._counts[prefix] = pick + 1
        self.usage.record(0, 0)
        if not prefix:
            node = ("nodeA", "nodeB")[pick % 2]
            return agent_code(f"open {node}", f'print "{node}"')
        branch = "A" if "nodeA" in prefix[0] else "B"
        leaf = self._LEAVES[branch][pick % 2]
        return agent_answer(f"close {leaf}", leaf)


_TREE_PATHS = {"leafAA": "nodeA", "leafAB": "nodeA", "leafBA": "nodeB", "leafBB": "nodeB"}


def _tree_verifier(service, rewards):
    tokens = {0.0: "0", 0.5: "0.5", 1.0: "1"}
    matchers = [
        (r"# Current Paragraph[\s\S]*" + name, ver_score("oracle", tokens[value], f"judged {name}"))
        for name, value in rewards.items()
    ]
    return StepVerifier(ScriptedBackend(matchers=matchers), service)


def test_search_strategies_select_the_best_candidate(tmp_path, service, capsys):
    with _gate(capsys, "search strategies return the exhaustive argmax, break ties low, and improve with n"):
        tree_task, tree_src = make_task(
            tmp_path, query="pick the best branch", max_turns=4, task_id="tree"
        )
        rng = random.Random(4242)
        for _ in range(30):
            rewards = {
                name: rng.choice((0.0, 0.5, 1.0))
                for name in ("nodeA", "nodeB", "leafAA", "leafAB", "leafBA", "leafBB")
            }
            scores = {
                leaf: (rewards[parent] + rewards[leaf]) / 2.0
                for leaf, parent in _TREE_PATHS.items()
            }
            best = max(scores.values())
            winners = {leaf for leaf, s in scores.items() if abs(s - best) <= 1e-12}

            bon = SearchRunner(
                _TreePolicy(), _tree_verifier(service, rewards), service, tree_src
            ).best_of_n(tree_task, SearchBudget(n=4))
            assert abs(bon.score - best) <= 1e-12
            assert bon.trajectory.final_answer in winners

            beam = SearchRunner(
                _TreePolicy(), _tree_verifier(service, rewards), service, tree_src
            ).beam_search(tree_task, SearchBudget(beam_width=4, branch=2))
            assert abs(beam.score - best) <= 1e-12
            assert beam.trajectory.final_answer in winners

            dvts = SearchRunner(
                _TreePolicy(), _tree_verifier(service, rewards), service, tree_src
            ).dvts(tree_task, SearchBudget(n=8, beam_width=4, branch=2))
            assert abs(dvts.score - best) <= 1e-12
            assert dvts.trajectory.final_answer in winners

        # equal scores: the first sampled candidate wins, whatever the seed
        flat_task, flat_src = make_task(tmp_path, max_turns=2, task_id="flat")
        for seed in range(100):
            runner = SearchRunner(
                ScriptedBackend(default=agent_answer("same", "42")),
                StepVerifier(ScriptedBackend(default=ver_score("same", "1", "equal")), service),
                service,
                flat_src,
                config=CompletionConfig(seed=seed),
            )
            report = runner.best_of_n_report(flat_task, SearchBudget(n=4))
            assert report.winner.index == 0
            assert all(abs(c.score - report.winner.score) <= 1e-12 for c in report.candidates)

        # a noisy judge still steers selection better as the pool grows
        master = random.Random(9090)
        ladder = (1, 4, 8, 16)
        successes = {n: [] for n in ladder}
        for _ in range(200):
            answers = ["right" if master.random() < 0.4 else "wrong" for _ in range(16)]
            tokens = []
            for answer in answers:
                roll = master.random()
                if answer == "right":
                    tokens.append("1" if roll < 0.55 else ("0.5" if roll < 0.85 else "0"))
                else:
                    tokens.append("1" if roll < 0.12 else ("0.5" if roll < 0.42 else "0"))
            for n in ladder:
                policy = ScriptedBackend(responses=[agent_answer("guess", a) for a in answers[:n]])
                noisy = StepVerifier(
                    ScriptedBackend(
                        responses=[ver_score("hunch", tok, "noisy call") for tok in tokens[:n]]
                    ),
                    service,
                )
                winner = SearchRunner(policy, noisy, service, flat_src).best_of_n(
                    flat_task, SearchBudget(n=n)
                )
                successes[n].append(winner.trajectory.final_answer == "right")
        accuracy = {n: sum(successes[n]) / len(successes[n]) for n in ladder}
        for lo, hi in zip(ladder, ladder[1:]):
            assert accuracy[hi] >= accuracy[lo] - 1e-12, accuracy
        gains = sum(1 for a, b in zip(successes[1], successes[16]) if b and not a)
        losses = sum(1 for a, b in zip(successes[1], successes[16]) if a and not b)
        assert accuracy[16] > accuracy[1]
        assert _sign_test_p(gains, losses) < 0.05

        # score aggregation against plain arithmetic
        for _ in range(300):
            values = [rng.choice((0.0, 0.5, 1.0)) for _ in range(rng.randint(1, 9))]
            rewards = [RewardValue(v) for v in values]
            assert abs(aggregate(rewards, AggregationMethod.MEAN) - math.fsum(values) / len(values)) <= 1e-12
            assert abs(aggregate(rewards, AggregationMethod.SUM) - math.fsum(values)) <= 1e-12
            assert abs(aggregate(rewards, AggregationMethod.PRODUCT) - math.prod(values)) <= 1e-12
            assert aggregate(rewards, AggregationMethod.LAST_STEP) == values[-1]


def test_sandbox_isolation_and_deterministic_replay(tmp_path, capsys):
    with _gate(capsys, "parallel sandboxes stay isolated and context replay is deterministic"):
        service = SandboxService(base_dir=str(tmp_path / "ws"))
        task, src = make_task(tmp_path, files={"seed.txt": "base\n"}, task_id="iso")

        def run_plan(cells):
            ws = service.create_workspace(task, src)
            try:
                ctx = ExecutionContext()
                outputs = []
                for cell in cells:
                    result = service.execute_cell(ws, ctx, cell)
                    assert result.ok, result.exception
                    outputs.append(result.stdout)
                    ctx = ctx.with_cell(cell)
                return outputs, service.list_files(ws)
            finally:
                service.destroy_workspace(ws)

        rng = random.Random(555)
        for _ in range(50):
            plans = []
            for w in range(8):
                cells = [
                    f'write "w{w}c{c}.txt" , str({rng.randint(0, 9999)})'
                    for c in range(rng.randint(1, 3))
                ]
                cells.append(f"print {rng.randint(0, 99)} * 2")
                plans.append(cells)
            with ThreadPoolExecutor(max_workers=8) as pool:
                parallel = list(pool.map(run_plan, plans))
            serial = [run_plan(cells) for cells in plans]
            assert parallel == serial

        # a failed cell leaves nothing behind for later cells
        ws = service.create_workspace(task, src)
        ctx = ExecutionContext()
        first = service.execute_cell(ws, ctx, "x = 6")
        assert first.ok
        ctx = ctx.with_cell("x = 6")
        broken = service.execute_cell(ws, ctx, 'y = 99\nfail "died mid-cell"')
        assert not broken.ok
        probe = service.execute_cell(ws, ctx, 'print str(defined("y")) + " " + str(x * 7)')
        assert probe.stdout == "False 42\n"

        # identical context and cell give identical results every run
        reruns = set()
        for _ in range(5):
            again = service.execute_cell(ws, ctx, "print x * 7")
            reruns.add((again.stdout, again.stderr, again.exception))
        assert reruns == {("42\n", "", None)}
        service.destroy_workspace(ws)

        # a runaway cell dies within twice its budget
        strict = SandboxService(
            limits=SandboxLimits(timeout_seconds=0.25), base_dir=str(tmp_path / "strict")
        )
        ws2 = strict.create_workspace(task, src)
        started = time.monotonic()
        result = strict.execute_cell(ws2, ExecutionContext(), "sleep 30")
        elapsed = time.monotonic() - started
        assert not result.ok
        assert result.exception is not None and result.exception.startswith("TimeoutError")
        assert elapsed < 0.5
        strict.destroy_workspace(ws2)


def test_pipeline_filters_and_serialization_hold(tmp_path, capsys):
    with _gate(capsys, "diversity filtering matches brute force and JSONL round trips lose nothing"):
        # keep exactly the groups whose answers disagree, over every 4-answer draw
        judge = ScriptedBackend(default="NO")
        for combo in itertools.product(("a", "b", "c"), repeat=4):
            trajectories = [
                answered_trajectory("g1", [("print 1", "1\n", True)], answer) for answer in combo
            ]
            group = TrajectoryGroup.from_trajectories("g1", trajectories)
            assert diversity_filter(group, judge) == (len(set(combo)) > 1)
        for combo in itertools.product(("a", "b", None), repeat=4):
            trajectories = []
            for answer in combo:
                if answer is None:
                    trajectories.append(unanswered_trajectory("g2", [("print 1", "1\n", True)]))
                else:
                    trajectories.append(
                        answered_trajectory("g2", [("print 1", "1\n", True)], answer)
                    )
            group = TrajectoryGroup.from_trajectories("g2", trajectories)
            assert diversity_filter(group, judge) == (len(set(combo)) > 1)

        # JSONL round trip across 1,000 generated trajectories
        rng = random.Random(31415)
        tasks = []
        trajectories = []
        for i in range(1000):
            task = Task(
                id=f"case-{i}",
                query=rng.choice(("sum the column", "count naïve rows 🚀", 'compare "files"')),
                files=tuple(
                    FileStat(path=f"data/part{j}.csv", size=rng.randint(0, 4096))
                    for j in range(rng.randint(0, 3))
                ),
                ground_truth_answer=rng.choice((None, "42", "naïve\nanswer")),
                max_turns=rng.randint(1, 12),
            )
            body = [
                code_step(
                    j,
                    f"q{j} = {rng.randint(0, 99)}",
                    rng.choice(("", "7\n", "café ☕\n", "NameError: name 'z' is not defined")),
                    rng.random() < 0.8,
                )
                for j in range(rng.randint(1, 4))
            ]
            if rng.random() < 0.7:
                answer = rng.choice(("42", "naïve 🚀", "line one\nline two"))
                trajectory = Trajectory(
                    task_id=task.id,
                    steps=tuple(body + [answer_step(len(body), answer)]),
                    final_answer=answer,
                    terminated_reason=TerminationReason.ANSWERED,
                )
            else:
                trajectory = Trajectory(
                    task_id=task.id,
                    steps=tuple(body),
                    terminated_reason=rng.choice(
                        (TerminationReason.TURN_CAP_REACHED, TerminationReason.ERROR)
                    ),
                )
            tasks.append(task)
            trajectories.append(trajectory)
        path = str(tmp_path / "round.jsonl")
        written = export_jsonl(
            (trajectory_to_record(t, tr) for t, tr in zip(tasks, trajectories)), path
        )
        assert written == 1000
        records = import_jsonl(path, kind="trajectory")
        assert len(records) == 1000
        for i, record in enumerate(records):
            task_back, trajectory_back = trajectory_from_record(record)
            assert task_back == tasks[i]
            assert trajectory_back == trajectories[i]

        # the pass-through strategy returns the input unchanged
        groups = [
            TrajectoryGroup.from_trajectories(t.id, [tr])
            for t, tr in zip(tasks[:20], trajectories[:20])
        ]
        assert apply_trajectory_filter(groups, FilterStrategy.UNFILTERED) == groups


def test_cli_search_runs_are_byte_stable(tmp_path, capsys):
    with _gate(capsys, "repeated scripted search runs write byte-identical artifacts"):
        tasks_root = tmp_path / "tasks"
        tasks_root.mkdir()
        for task_id in ("alpha", "beta"):
            sub = tasks_root / task_id
            sub.mkdir()
            (sub / "data.txt").write_text("1,2,3\n")
            (sub / "task.json").write_text(
                json.dumps(
                    {
                        "id": task_id,
                        "query": f"what is in {task_id}?",
                        "files": ["data.txt"],
                        "max_turns": 4,
                        "ground_truth": "42",
                    }
                )
            )
        config = {
            "workspace_base": str(tmp_path / "ws"),
            "backends": {
                "policy": {
                    "kind": "scripted",
                    "responses": [agent_code("inspect the file", "print 7")],
                    "default": agent_answer("solve", "42"),
                },
                "verifier": {"kind": "scripted", "default": ver_score("checked", "1", "fine")},
            },
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))

        artifacts = []
        for run in ("one", "two"):
            run_dir = str(tmp_path / f"run-{run}")
            rc = cli_main(
                [
                    "--config",
                    str(config_path),
                    "--run-dir",
                    run_dir,
                    "search",
                    "--tasks-dir",
                    str(tasks_root),
                    "--strategy",
                    "bon",
                    "--n",
                    "4",
                    "--seed",
                    "11",
                ]
            )
            assert rc == 0
            blob = {}
            for name in ("manifest.json", "trajectories.jsonl", "candidates.jsonl"):
                with open(os.path.join(run_dir, name), "rb") as fh:
                    blob[name] = fh.read()
            artifacts.append(blob)
        assert artifacts[0] == artifacts[1]
        assert len(artifacts[0]["manifest.json"]) > 0
