import pytest

from convqec.codes import bb_preset, build_rotated_surface_code


@pytest.fixture(scope="session")
def surface3():
    return build_rotated_surface_code(3)


@pytest.fixture(scope="session")
def surface5():
    return build_rotated_surface_code(5)


@pytest.fixture(scope="session")
def gross():
    return bb_preset("bb144")


@pytest.fixture(scope="session")
def bb72():
    return bb_preset("bb72")


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
