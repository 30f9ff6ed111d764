"""Collects one verdict line per acceptance criterion for the terminal summary."""
import pytest

_VERDICTS = {}


class Criterion:
    """Handed to acceptance tests; ``note`` accumulates the measured values."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.notes = []

    def note(self, text: str) -> None:
        self.notes.append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def criterion(request):
    mark = request.node.get_closest_marker("criterion")
    if mark is None:
        raise RuntimeError("the criterion fixture needs a @pytest.mark.criterion marker")
    return Criterion(*mark.args)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    c = getattr(item, "funcargs", {}).get("criterion")
    if c is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    _VERDICTS.setdefault(c.number, []).append((c.title, rep.passed, list(c.notes)))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        ok = all(p for _, p, _ in parts)
        notes = "; ".join(x for _, _, ns in parts for x in ns)
        tr.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {parts[0][0]}"
                      + (f" ({notes})" if notes else ""))
