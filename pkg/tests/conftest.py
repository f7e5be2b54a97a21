import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pevccp.distributed import run_distributed  # noqa: E402
from pevccp.model import generate_scenario  # noqa: E402
from pevccp.netsim import make_topology  # noqa: E402
from pevccp.oracle import solve_central  # noqa: E402

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criteria():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str):
        prev = _CRITERIA.get(number)
        ok = passed and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        _CRITERIA[number] = (ok, text)
        print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def ref_scenario():
    return generate_scenario(1, 20, 96, "paperlike")


@pytest.fixture(scope="session")
def ref_central(ref_scenario):
    return solve_central(ref_scenario, tol=1e-8)


@pytest.fixture(scope="session")
def ref_trace(ref_scenario, ref_central):
    return run_distributed(ref_scenario, make_topology("ring", 20), 1000, record_every=1,
                           f_star=ref_central.objective)
