import torch

torch.set_num_threads(1)

# one line per acceptance criterion, filled in by tests/test_acceptance.py
CRITERIA: dict = {}


def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
    CRITERIA[number] = (name, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
