import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nervehand import decoder, model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_ensemble(count: int = 1, seed: int = 0) -> decoder.EnsembleConfig:
    members = []
    for i, mask in enumerate(decoder.split_masks(count)):
        cfg = model.ModelConfig(finger_mask=mask, dropout_p=0.2)
        members.append(decoder.EnsembleMember(model.ModelParams.init(cfg, seed + i), mask))
    return decoder.EnsembleConfig(members)


@pytest.fixture
def ensemble1():
    return tiny_ensemble(1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
