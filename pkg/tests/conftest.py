from __future__ import annotations

import pytest
from hypothesis import settings

# a single shared CPU makes wall-clock deadlines meaningless
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Print and remember one PASS/FAIL line, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def check(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
        print(line)
        lines.append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
