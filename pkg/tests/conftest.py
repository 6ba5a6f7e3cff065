from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The body may set ``info["detail"]`` to the measured values; the line is
    written whether the body passes or raises.
    """
    lines = request.config.stash[_LINES]

    @contextmanager
    def run(number, title):
        info = {"detail": ""}
        try:
            yield info
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            lines.append((number, f"criterion {number} FAIL  {title}: {info['detail']} [{msg}]"))
            raise
        lines.append((number, f"criterion {number} PASS  {title}: {info['detail']}"))

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(lines, key=lambda item: item[0]):
        terminalreporter.write_line(line)
