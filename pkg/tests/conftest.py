import numpy as np
import pytest

from uavisac.channel import BeamformingMatrix, Scene, WorldState
from uavisac.config import EnvConfig


@pytest.fixture
def cfg():
    return EnvConfig()


@pytest.fixture
def scene(cfg):
    return Scene.from_config(cfg)


@pytest.fixture
def world(cfg):
    return WorldState(cfg.bs_pos, cfg.uav_init, cfg.target_init)


def random_beams(rng, m, beams, power=5.0):
    w = rng.standard_normal((m, beams)) + 1j * rng.standard_normal((m, beams))
    w *= np.sqrt(power) / np.linalg.norm(w)
    return BeamformingMatrix(w, power)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12))


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
