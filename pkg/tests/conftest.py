import numpy as np
import pytest

_ACCEPTANCE = []


def record_acceptance(label: str, ok: bool, detail: str, seconds: float) -> str:
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f} s]"
    _ACCEPTANCE.append(line)
    print(line)
    return line


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def bump_gamma(x, width=0.5, amplitude=0.5, matrix=((1.0, 0.3), (0.3, 0.5))):
    """Id + amplitude * bump(x / width) * matrix, evaluated pointwise."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1) / width ** 2
    b = np.where(r2 < 1, np.exp(1 - 1 / np.maximum(1 - r2, 1e-300)), 0.0)
    return np.eye(2) + amplitude * b[..., None, None] * np.asarray(matrix)


BUMP_SPEC = {"family": "bump", "base": [[1, 0], [0, 1]], "amplitude": 0.5,
             "matrix": [[1, 0.3], [0.3, 0.5]], "width": 0.5}
