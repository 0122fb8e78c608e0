import pytest

_ACCEPTANCE: list[tuple[int, str, str]] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = f"{detail}; {exc_type.__name__}: {exc}".strip("; ")
        line = f"[{status}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE.append((self.number, status, line))
        print(line)
        return False


@pytest.fixture()
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
