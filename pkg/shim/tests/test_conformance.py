"""Conformance: the real interpreter shim behind the sandbox wire protocol.

These tests drive the installed ``cellshim`` interpreter through the same
sandbox service the engine uses, covering replay visibility, failed-cell
exclusion, exception serialization, output capture, the tool bridge, and
parallel isolation. They need both packages installed (``pip install -e .``
and ``pip install -e shim``).
"""

import json
import os
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from stepscore.gateway import ScriptedBackend, build_default_registry
from stepscore.model import FileStat, Task
from stepscore.sandbox import (
    ExecutionContext,
    ReplayDivergence,
    SandboxLimits,
    SandboxService,
    ShimProcessBackend,
    ShimProtocolError,
    SpawnFailure,
)


def make_task(tmp_path, task_id="shim-task"):
    src = os.path.join(str(tmp_path), f"src-{task_id}")
    os.makedirs(src, exist_ok=True)
    with open(os.path.join(src, "data.txt"), "w", encoding="utf-8") as fh:
        fh.write("1,2,3\n")
    task = Task(
        id=task_id,
        query="inspect the data",
        files=(FileStat(path="data.txt", size=6),),
        max_turns=8,
    )
    return task, src


@pytest.fixture
def shim_service(tmp_path):
    return SandboxService(backend=ShimProcessBackend(), base_dir=str(tmp_path / "ws"))


def run_shim(request_text):
    proc = subprocess.run(
        [sys.executable, "-m", "cellshim"],
        input=request_text,
        capture_output=True,
        text=True,
        timeout=30,
    )
    return proc


def test_trivial_run_with_no_context(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    result = shim_service.execute_cell(ws, ExecutionContext(), "print(1+1)")
    assert result.ok
    assert result.stdout == "2\n"
    assert result.stderr == ""
    assert result.exception is None
    shim_service.destroy_workspace(ws)


def test_replayed_assignment_is_visible(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    ctx = ExecutionContext()
    first = shim_service.execute_cell(ws, ctx, "x = 5")
    assert first.ok
    ctx = ctx.with_cell("x = 5")
    second = shim_service.execute_cell(ws, ctx, "print(x)")
    assert second.stdout == "5\n"
    shim_service.destroy_workspace(ws)


def test_failed_cell_leaves_nothing_behind(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    ctx = ExecutionContext()
    assert shim_service.execute_cell(ws, ctx, "x = 6").ok
    ctx = ctx.with_cell("x = 6")
    broken = shim_service.execute_cell(ws, ctx, 'y = 99\nraise RuntimeError("died mid-cell")')
    assert not broken.ok
    assert broken.exception.startswith("RuntimeError: died mid-cell")
    # the failing cell is not replayed, so y never existed for later cells
    probe = shim_service.execute_cell(ws, ctx, 'print("y" in globals(), x * 7)')
    assert probe.stdout == "False 42\n"
    shim_service.destroy_workspace(ws)


def test_exception_keeps_only_user_frames(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    code = "def inner():\n    return 1 / 0\n\ninner()"
    result = shim_service.execute_cell(ws, ExecutionContext(), code)
    assert not result.ok
    lines = result.exception.splitlines()
    assert lines[0] == "ZeroDivisionError: division by zero"
    assert lines[1] == "Traceback (most recent call last):"
    assert any('File "<cell>", line 4, in <module>' in line for line in lines)
    assert any('File "<cell>", line 2, in inner' in line for line in lines)
    assert "cellshim" not in result.exception
    assert "/usr/lib" not in result.exception
    shim_service.destroy_workspace(ws)


def test_stdout_and_stderr_come_back_separately(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    code = 'import sys\nprint("out")\nsys.stderr.write("err\\n")'
    result = shim_service.execute_cell(ws, ExecutionContext(), code)
    assert result.ok
    assert result.stdout == "out\n"
    assert result.stderr == "err\n"
    shim_service.destroy_workspace(ws)


def test_unicode_output_round_trips(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    result = shim_service.execute_cell(ws, ExecutionContext(), 'print("naïve rows 🚀")')
    assert result.ok
    assert result.stdout == "naïve rows 🚀\n"
    shim_service.destroy_workspace(ws)


def test_replay_divergence_is_a_typed_error(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    with pytest.raises(ReplayDivergence) as info:
        shim_service.execute_cell(ws, ExecutionContext(("boom !",)), "print(1)")
    assert "cell 0" in str(info.value)
    shim_service.destroy_workspace(ws)


def test_service_truncation_applies_to_shim_output(tmp_path):
    service = SandboxService(
        backend=ShimProcessBackend(),
        limits=SandboxLimits(output_cap=32),
        base_dir=str(tmp_path / "ws"),
    )
    task, src = make_task(tmp_path)
    ws = service.create_workspace(task, src)
    result = service.execute_cell(ws, ExecutionContext(), 'print("x" * 100)')
    assert result.truncated
    assert result.stdout.endswith("...[truncated]")
    service.destroy_workspace(ws)


def test_tool_bridge_round_trips_both_tools(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    with open(os.path.join(ws.root, "manual.md"), "w", encoding="utf-8") as fh:
        fh.write("fees are listed here\n")
    registry = build_default_registry(
        doc_expert=ScriptedBackend(default="fee is 1%"),
        img_expert=ScriptedBackend(default="a blue chart"),
    )
    dispatcher = registry.dispatcher_for(ws.root)
    result = shim_service.execute_cell(
        ws,
        ExecutionContext(),
        'print(query_document("What is the fee?", "manual.md"))',
        tool_dispatcher=dispatcher,
    )
    assert result.ok
    assert result.stdout == "fee is 1%\n"
    assert result.tool_calls == 1
    with open(os.path.join(ws.root, "chart.png"), "wb") as fh:
        fh.write(b"\x89PNG fake")
    second = shim_service.execute_cell(
        ws,
        ExecutionContext(),
        'print(query_image("Describe the image in detail.", "chart.png"))',
        tool_dispatcher=dispatcher,
    )
    assert second.stdout == "a blue chart\n"
    assert second.tool_calls == 1
    shim_service.destroy_workspace(ws)


def test_tool_signatures_travel_verbatim(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    code = (
        "import inspect\n"
        "print(inspect.signature(query_document))\n"
        "print(inspect.signature(query_image))\n"
        "print(query_document.__doc__.strip().splitlines()[0])\n"
        "print(query_image.__doc__.strip().splitlines()[0])"
    )
    result = shim_service.execute_cell(ws, ExecutionContext(), code)
    assert result.stdout.splitlines() == [
        "(query: str, file_path: str) -> str",
        "(query: str, image_path: str) -> str",
        "Ask a question about the document",
        "Ask a question about the image",
    ]
    shim_service.destroy_workspace(ws)


def test_unknown_tool_comes_back_as_error_string(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    registry = build_default_registry(doc_expert=ScriptedBackend(default="doc answer"))
    dispatcher = registry.dispatcher_for(ws.root)
    result = shim_service.execute_cell(
        ws,
        ExecutionContext(),
        'print(query_image("what is this?", "chart.png"))',
        tool_dispatcher=dispatcher,
    )
    assert result.ok
    assert "ToolError" in result.stdout
    shim_service.destroy_workspace(ws)


def test_tools_refuse_without_a_channel(tmp_path, shim_service):
    task, src = make_task(tmp_path)
    ws = shim_service.create_workspace(task, src)
    result = shim_service.execute_cell(
        ws, ExecutionContext(), 'print(query_document("q", "manual.md"))'
    )
    assert result.ok
    assert result.stdout == "ToolError: no tool channel available\n"
    shim_service.destroy_workspace(ws)


def test_sixteen_parallel_shims_stay_isolated(tmp_path):
    service = SandboxService(
        backend=ShimProcessBackend(), base_dir=str(tmp_path / "ws"), pool_size=16
    )
    task, src = make_task(tmp_path)

    def work(marker):
        ws = service.create_workspace(task, src)
        try:
            ctx = ExecutionContext()
            cell = f"marker = {marker}"
            assert service.execute_cell(ws, ctx, cell).ok
            ctx = ctx.with_cell(cell)
            write = 'with open("mark.txt", "w") as fh:\n    fh.write(str(marker * 3))'
            assert service.execute_cell(ws, ctx, write).ok
            ctx = ctx.with_cell(write)
            probe = service.execute_cell(ws, ctx, 'print(open("mark.txt").read())')
            return probe.stdout, sorted(service.list_files(ws))
        finally:
            service.destroy_workspace(ws)

    with ThreadPoolExecutor(max_workers=16) as pool:
        results = list(pool.map(work, range(16)))
    for marker, (stdout, listing) in enumerate(results):
        assert stdout == f"{marker * 3}\n"
        assert listing == ["data.txt", "mark.txt"]


def test_timeout_kills_a_runaway_cell(tmp_path):
    service = SandboxService(
        backend=ShimProcessBackend(),
        limits=SandboxLimits(timeout_seconds=1.0),
        base_dir=str(tmp_path / "ws"),
    )
    task, src = make_task(tmp_path)
    ws = service.create_workspace(task, src)
    started = time.monotonic()
    result = service.execute_cell(ws, ExecutionContext(), "import time\ntime.sleep(30)")
    elapsed = time.monotonic() - started
    assert not result.ok
    assert result.exception.startswith("TimeoutError")
    assert elapsed < 2.0
    service.destroy_workspace(ws)


def test_protocol_violations_exit_nonzero_with_diagnostics(tmp_path):
    bad_json = run_shim("this is not json")
    assert bad_json.returncode != 0
    assert "not valid JSON" in bad_json.stderr

    missing_run = run_shim(json.dumps({"cells": [], "cwd": str(tmp_path), "tool_port": None}))
    assert missing_run.returncode != 0
    assert "run must be a string" in missing_run.stderr

    bad_cells = run_shim(
        json.dumps({"cells": "x = 1", "run": "print(1)", "cwd": str(tmp_path), "tool_port": None})
    )
    assert bad_cells.returncode != 0
    assert "cells must be a list of strings" in bad_cells.stderr

    ghost = run_shim(
        json.dumps(
            {"cells": [], "run": "print(1)", "cwd": str(tmp_path / "ghost"), "tool_port": None}
        )
    )
    assert ghost.returncode != 0
    assert "cannot enter cwd" in ghost.stderr


def test_response_is_exactly_one_json_line(tmp_path):
    request = json.dumps(
        {
            "cells": ["a = 1"],
            "run": 'print("line one")\nprint("line two")',
            "cwd": str(tmp_path),
            "tool_port": None,
        }
    )
    proc = run_shim(request)
    assert proc.returncode == 0
    assert proc.stdout.count("\n") == 1
    payload = json.loads(proc.stdout)
    assert payload == {"stdout": "line one\nline two\n", "stderr": "", "exception": None}


def test_user_exit_calls_are_reported_not_obeyed(tmp_path):
    request = json.dumps(
        {
            "cells": [],
            "run": 'print("before")\nimport sys\nsys.exit(3)',
            "cwd": str(tmp_path),
            "tool_port": None,
        }
    )
    proc = run_shim(request)
    assert proc.returncode == 0
    payload = json.loads(proc.stdout)
    assert payload["stdout"] == "before\n"
    assert payload["exception"].startswith("SystemExit: 3")


def test_broken_shim_commands_raise_typed_errors(tmp_path):
    cancel = threading.Event()
    garbage = ShimProcessBackend(command=[sys.executable, "-c", "print('garbage')"])
    with pytest.raises(ShimProtocolError):
        garbage.run((), "print(1)", str(tmp_path), 10.0, cancel, None)

    crasher = ShimProcessBackend(command=[sys.executable, "-c", "import sys; sys.exit(5)"])
    with pytest.raises(ShimProtocolError) as info:
        crasher.run((), "print(1)", str(tmp_path), 10.0, cancel, None)
    assert "code 5" in str(info.value)

    with pytest.raises(SpawnFailure):
        ShimProcessBackend(command=["/no/such/shim-binary"]).run(
            (), "print(1)", str(tmp_path), 10.0, cancel, None
        )
