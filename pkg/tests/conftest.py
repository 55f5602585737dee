import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the lines are printed at the end of the session."""
    store = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        store.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, [])
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(store, key=lambda item: item[0]):
        terminalreporter.write_line(line)
