import pytest

from stepscore.sandbox import SandboxService


@pytest.fixture
def service(tmp_path):
    svc = SandboxService(base_dir=str(tmp_path / "workspaces"))
    yield svc
