import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dichotomy_lab.system import DelaySystem, PerturbationProfile

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ORACLES = json.loads((Path(__file__).parent / "oracles" / "values.json").read_text())


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


def stable_scalar():
    return DelaySystem.autonomous([0.0, 1.0], [-1.0, 0.0], name="stable_scalar")


def saddle():
    return DelaySystem.autonomous([0.0, 1.0], [np.diag([-1.0, 1.0]), np.zeros((2, 2))],
                                  name="saddle")


def delayed_scalar():
    return DelaySystem.autonomous([0.0, 1.0], [0.0, -1.0], name="delayed_scalar")


def perturbed_scalar():
    perts = [PerturbationProfile("rational_decay", [[-0.1]]), PerturbationProfile.zero(1)]
    return DelaySystem.autonomous([0.0, 1.0], [-1.0, 0.0], perts, name="perturbed_scalar")


def critical_delay():
    return DelaySystem.autonomous([0.0, 1.0], [0.0, -np.pi / 2], name="critical_delay")


SHIPPED = {
    "stable_scalar": stable_scalar,
    "saddle": saddle,
    "delayed_scalar": delayed_scalar,
    "perturbed_scalar": perturbed_scalar,
}


@pytest.fixture(params=sorted(SHIPPED))
def shipped_system(request):
    return SHIPPED[request.param]()


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
