import hypothesis
import numpy as np
import pytest
import torch

torch.set_num_threads(1)

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    from versediff.config import Config, DiffusionConfig, ModelOptions, TrainConfig

    return Config(
        diffusion=DiffusionConfig(T=10, beta_start=1e-3, beta_end=0.3),
        model=ModelOptions(levels=2, base_channels=8, time_embed_dim=16),
        train=TrainConfig(epochs=1, batch_size=2, learning_rate=1e-3, checkpoint_interval=0),
    )


def stratified_normal(n: int, seed: int) -> np.ndarray:
    """n standard-normal draws, one per equal-probability stratum (1-D Latin
    hypercube), in random order. Same marginal as i.i.d. draws, far smaller
    error in the sample mean."""
    from scipy.special import ndtri

    r = np.random.default_rng(seed)
    u = (r.permutation(n) + r.uniform(size=n)) / n
    return ndtri(u)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (passed, detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
