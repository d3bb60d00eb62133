import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance(request):
    """Print and remember one pass/fail line per acceptance criterion."""
    lines = request.config.stash[_LINES]

    def record(n, name, ok, detail):
        line = f"[acceptance {n}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
