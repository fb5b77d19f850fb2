import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from koopdist.teacher import CheckerboardSpec, TeacherConfig, train_teacher_edm, train_teacher_fm  # noqa: E402

# criterion id -> one-line verdict, filled by tests/test_acceptance.py
VERDICTS: dict[str, str] = {}


def pytest_runtest_makereport(item, call):
    crit = item.get_closest_marker("criterion")
    if crit and call.excinfo is not None and crit.args[0] not in VERDICTS:
        msg = str(call.excinfo.value).splitlines()[0] if str(call.excinfo.value) else call.excinfo.typename
        VERDICTS[crit.args[0]] = f"{crit.args[0]} FAIL  {crit.args[1]}: error: {msg[:160]}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(VERDICTS[key])


@pytest.fixture(scope="session")
def small_edm_teacher():
    return train_teacher_edm(CheckerboardSpec(), TeacherConfig(iterations=800, hidden=(32, 32), lr=1e-3))


@pytest.fixture(scope="session")
def small_fm_teacher():
    return train_teacher_fm(CheckerboardSpec(), TeacherConfig(kind="fm", iterations=400, hidden=(32, 32), lr=1e-3))
