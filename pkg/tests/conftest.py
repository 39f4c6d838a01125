import numpy as np
import pytest

from qlod.coefficient import CombinedCoefficient, MODELS, SpatialField, generate_spatial_field


def small_coefficient(n_fine: int, model: str = "exp2", seed: int = 7) -> CombinedCoefficient:
    """High-contrast random field on a small fine mesh, one cell per fine element."""
    field = generate_spatial_field(n_fine, seed, n_fine, (0.05, 1.0), ((0.5, 1.0, 0.05, 0.15), 50.0))
    return CombinedCoefficient.single(field, MODELS[model])


def unit_coefficient(n_fine: int, model: str = "linear") -> CombinedCoefficient:
    return CombinedCoefficient.single(SpatialField(n_fine, np.ones(n_fine * n_fine)), MODELS[model])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report(capsys):
    """Record and echo one pass/fail line for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
