import pytest

# (criterion, passed, detail) lines recorded by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _record(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((criterion, passed, detail))
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
