import sys
from pathlib import Path

import pytest

STUBS = Path(__file__).parent / "stubs"


@pytest.fixture
def stub_command():
    def command(name, *args):
        return [sys.executable, str(STUBS / f"{name}.py"), *map(str, args)]

    return command


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "acceptance" in props:
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["acceptance"], status, props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for criterion, status, detail in sorted(lines):
            terminalreporter.write_line(f"[{status}] {criterion}: {detail}")
