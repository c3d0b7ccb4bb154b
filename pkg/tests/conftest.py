"""Collects acceptance verdicts and prints one line per criterion after the run."""

import pytest

VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(ok, detail)`` once per acceptance test; the test fails on ``ok=False``."""
    name = request.node.name

    def record(ok: bool, detail: str):
        VERDICTS[name] = (bool(ok), detail)
        assert ok, detail

    return record


def pytest_runtest_makereport(item, call):
    if call.when == "call" and call.excinfo is not None and item.name.startswith("test_criterion"):
        VERDICTS.setdefault(item.name, (False, f"{call.excinfo.typename}: {call.excinfo.value}"))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(VERDICTS, key=lambda n: int(n.split("_")[2])):
        ok, detail = VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
