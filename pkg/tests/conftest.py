import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line, echo it, then assert it."""
    lines = request.config.stash[_KEY]

    def record(label: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_KEY]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
