"""Shared fixtures and the acceptance summary hook.

Unit test modules use small rigs and encoders so the whole suite stays
fast; the end-to-end gate in test_acceptance.py is collected last and
prints one PASS/FAIL line per criterion in the terminal summary.
"""

import math

import numpy as np
import pytest

from panonav.perception import CameraRig, PanoramaConfig, PreprocessConfig
from panonav.policy import ArchConfig
from panonav.rollout import ObsSettings
from panonav.world import DynamicsConfig


# --------------------------------------------------------------------------
# small shapes shared across unit tests

@pytest.fixture
def tiny_rig():
    return CameraRig(width=16, height=16)


@pytest.fixture
def tiny_pano():
    return PanoramaConfig(width=32, height=8)


@pytest.fixture
def tiny_prep():
    return PreprocessConfig(noise_std=0.0, pool=2)


@pytest.fixture
def tiny_obs(tiny_rig, tiny_pano, tiny_prep):
    return ObsSettings(rig=tiny_rig, pano=tiny_pano, prep=tiny_prep)


@pytest.fixture
def tiny_arch():
    # matches tiny_obs.input_shape() == (4, 16)
    return ArchConfig(in_height=4, in_width=16, channels=(4, 8, 8, 8),
                      strides=((1, 2), (2, 2), (2, 2), (1, 1)),
                      d_z=16, d_h=16)


@pytest.fixture
def dyn():
    return DynamicsConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE_LINES = []


def record_criterion(index, total, name, passed, detail):
    """Register one acceptance line for the terminal summary."""
    status = "PASS" if passed else "FAIL"
    line = f"[{index:2d}/{total}] {name:32s} {status}  {detail}"
    ACCEPTANCE_LINES.append((index, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    # run the expensive end-to-end gate after everything else
    items.sort(key=lambda it: it.fspath.basename == "test_acceptance.py")
