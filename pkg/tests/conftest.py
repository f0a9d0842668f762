import numpy as np
import pytest


def random_deformation_gradients(n, rng, det_range=(0.5, 2.0), spread=0.3):
    """Random F = R (I + S) rescaled so that det F lies uniformly in ``det_range``."""
    F = np.eye(3) + spread * rng.standard_normal((n, 3, 3))
    dets = np.linalg.det(F)
    flip = dets < 0
    F[flip, :, 0] *= -1.0
    target = rng.uniform(*det_range, size=n)
    return F * np.cbrt(target / np.abs(np.linalg.det(F)))[:, None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {detail}")
