import os

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=200, deadline=None)
settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run acceptance summary."""
    def record(name, passed, detail):
        ACCEPTANCE[name] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        passed, detail = ACCEPTANCE[name]
        tr.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")
