import torch
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)

import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Register an acceptance verdict; the line is printed in the terminal summary."""
    def _record(label: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((label, bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(_ACCEPTANCE, key=lambda t: int(t[0].split()[0].rstrip("."))):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
