from __future__ import annotations

import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


# --------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion, aggregated over all
# tests named ``test_criterion_<n>_*`` and carrying
# ``@pytest.mark.criterion(n, title)``.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _CRITERIA.setdefault(n, {"title": title, "outcomes": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n, entry in _CRITERIA.items():
        if f"::test_criterion_{n}_" in report.nodeid:
            entry["outcomes"].append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        outs = entry["outcomes"]
        if not outs:
            verdict = "NOT RUN"
        else:
            verdict = "PASS" if all(outs) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict:7s} {entry['title']}")
