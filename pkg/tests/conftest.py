"""Shared fixtures: a small model plus calibration data, built once."""

import sys

import numpy as np
import pytest

from segptq.harness import gen_prompts, gen_synthetic_images
from segptq.model import ModelConfig, build_model


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelConfig(seed=7))


@pytest.fixture(scope="session")
def calib_items():
    images = gen_synthetic_images(4, seed=7)
    prompt_sets = gen_prompts(images, seed=7)
    return images, prompt_sets


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
