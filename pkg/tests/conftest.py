import pytest

from splatrefine.pipeline import room_poses
from splatrefine.scene import synth_scene


@pytest.fixture(scope="session")
def room():
    return synth_scene((4.0, 4.0, 3.0), 5000, seed=1)


@pytest.fixture(scope="session")
def room_gt(room):
    return room_poses(room, 10, seed=0)


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
