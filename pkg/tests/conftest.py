import pytest

from graft.experiment import load_split, resolve
from graft.presets import preset


@pytest.fixture(scope="session")
def micro_cfg():
    return preset("micro")


@pytest.fixture(scope="session")
def micro_split(micro_cfg):
    return load_split(micro_cfg)


@pytest.fixture(scope="session")
def micro_resolved(micro_cfg, micro_split):
    return resolve(micro_cfg, micro_split)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
