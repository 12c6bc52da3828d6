"""Shared fixtures: corpus access and the acceptance-report helper."""

from pathlib import Path

import pytest

from krn import parse

PROGRAMS = Path(__file__).resolve().parent.parent / "programs"


def corpus_paths() -> list:
    paths = sorted(PROGRAMS.glob("*.krn"))
    assert paths, f"no corpus programs found under {PROGRAMS}"
    return paths


def load(name: str):
    """Parse programs/<name>.krn."""
    return parse((PROGRAMS / f"{name}.krn").read_text())


@pytest.fixture(scope="session")
def laplacian_program():
    return load("laplacian")


@pytest.fixture(scope="session")
def laplacian(laplacian_program):
    """The residual-norm function itself (the corpus program's only fn)."""
    return laplacian_program.functions[0]


@pytest.fixture
def report(capfd):
    """Print one PASS/FAIL line per acceptance criterion directly to the
    terminal (bypassing capture), then assert."""

    def _report(num: int, ok: bool, desc: str):
        with capfd.disabled():
            print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {desc}")
        assert ok, f"criterion {num} failed: {desc}"

    return _report
