import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_gaussians(rng, n=5, spread=0.4, scale=(0.05, 0.25), opacity=(0.1, 0.9)):
    from splatmaps.gsmap import GaussianSet

    means = rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(means, rng.uniform(*scale, (n, 3)), q, rng.uniform(*opacity, n), rng.uniform(0, 1, (n, 3)))


def front_camera(size=32, f=40.0, dist=2.5):
    from splatmaps.core import Camera

    c = (size - 1) / 2
    return Camera(f, f, c, c, size, size, np.eye(3), [0.0, 0.0, dist])


ACCEPTANCE_LINES: list[str] = []


def pytest_runtest_logreport(report):
    relevant = report.when == "call" or (report.when == "setup" and report.failed)
    if relevant and "test_acceptance.py::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        num = name.split("_")[2]
        status = "PASS" if report.passed else "FAIL"
        detail = dict(report.user_properties).get("detail", "")
        ACCEPTANCE_LINES.append(f"criterion {num:>2}: {status}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
