import numpy as np
import pytest

from jumpsde.coefficients import (AffineDiffusion, AffineJump, AffineMap, MarkLaw,
                                  Model, PiecewiseDrift)
from jumpsde.geometry import AffineHyperplane
from jumpsde.presets import build_model
from jumpsde.transform import AlphaField, Transform, TransformParams, build_transform


def sign_model(sigma=1.0, lam=1.0, intercept=0.5, slope=-0.5):
    surf = AffineHyperplane([1.0], 0.0)
    drift = PiecewiseDrift(surf, AffineMap([[0.0]], [-1.0]), AffineMap([[0.0]], [1.0]))
    return Model(drift, AffineDiffusion([[sigma]]), AffineJump([[slope]], [intercept], False),
                 lam, MarkLaw("dirac", value=1.0), [0.0], 1.0)


@pytest.fixture(scope="session")
def unit_transform():
    """Sign drift with c = 1, alpha = 1: the hand-worked example."""
    m = sign_model()
    return Transform(m.surface, TransformParams(1.0, 1.0), AlphaField(m))


@pytest.fixture(scope="session")
def sign_1d():
    m = build_model("sign_1d")
    return m, build_transform(m, 1.0)


@pytest.fixture(scope="session")
def cpp_2d():
    m = build_model("cpp_threshold_2d")
    return m, build_transform(m, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(number, passed, detail):
        line = f"criterion {str(number):>3}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def _criterion_key(line):
    tag = line.split()[1].rstrip(":")
    return int("".join(ch for ch in tag if ch.isdigit())), tag


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
