import pytest

from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

_ACCEPTANCE: dict = {}


class AcceptanceLog:
    def record(self, name: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE[name] = (passed, detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        passed, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
