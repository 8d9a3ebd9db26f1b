import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from avdet.synthdata import DatasetConfig, generate_dataset

settings.register_profile("avdet", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("avdet")


@pytest.fixture(scope="session")
def small_config():
    return DatasetConfig(n_train=240, n_test=60, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_dataset(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def texture_batch(rng, B=4, H=16, W=16, D_a=16):
    """Random-texture images and unit audio; no flat regions, so max/ReLU ties are negligible."""
    images = rng.uniform(0.0, 1.0, size=(B, H, W, 3))
    audio = rng.normal(size=(B, D_a))
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    return images, audio


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    prev = ACCEPTANCE.get(number, (True, ""))
    joined = f"{prev[1]}; {detail}" if prev[1] else detail
    ACCEPTANCE[number] = (prev[0] and bool(passed), joined)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
