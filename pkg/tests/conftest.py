from __future__ import annotations

import pytest
import torch

torch.set_default_dtype(torch.float64)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)



ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept():
    """Records one PASS/FAIL line per acceptance criterion and echoes it."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}  {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
