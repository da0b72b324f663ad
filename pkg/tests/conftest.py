import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from glarisk import synthgen  # noqa: E402


@pytest.fixture(scope="session")
def small_data():
    """(dataset, ground truth) with 600 patients; shared read-only across tests."""
    return synthgen.generate(synthgen.GeneratorConfig(n_patients=600, seed=11, true_positive_fraction=0.12))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid or getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            name = nodeid.rsplit("::", 1)[-1]
            if not name.startswith("test_criterion_"):
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(lines):
        number, label = name[len("test_criterion_"):].split("_", 1)
        terminalreporter.write_line(f"criterion {int(number):2d} {label}: {verdict}  {detail}")
