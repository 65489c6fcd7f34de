import pytest

from alc.synthgen import generate
from alc.trainer import TrainConfig, run_training


@pytest.fixture(scope="session")
def toy_data():
    return generate(7, 60, 32, 2, 0.3, (3, 15))


@pytest.fixture(scope="session")
def trained_teacher(toy_data):
    """A briefly trained network: good enough that perturbations matter."""
    cfg = TrainConfig.for_mode("mt", steps=300, lr=0.03, eval_every=0, eval_n=4)
    net, _ = run_training(toy_data, cfg)
    return net


# one summary line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
