from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def haar_matrix_1d(n: int) -> np.ndarray:
    """Independent single-level orthonormal Haar analysis matrix."""
    m = np.zeros((n, n))
    s = 2 ** -0.5
    for i in range(n // 2):
        m[i, 2 * i] = s
        m[i, 2 * i + 1] = s
        m[n // 2 + i, 2 * i] = s
        m[n // 2 + i, 2 * i + 1] = -s
    return m


def haar_brute_force(grid: np.ndarray, levels: int) -> np.ndarray:
    """Packed multi-level coefficients by explicit matrix products, one
    level at a time on the top-left block."""
    out = np.array(grid, dtype=float)
    h, w = out.shape
    for j in range(levels):
        n, m = h >> j, w >> j
        op = np.kron(haar_matrix_1d(n), haar_matrix_1d(m))
        out[:n, :m] = (op @ out[:n, :m].ravel()).reshape(n, m)
    return out


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one pass/fail line per acceptance criterion."""
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
