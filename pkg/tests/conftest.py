import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = np.max(err - bound)
    assert worst <= 0, f"gradient mismatch: max abs err {err.max():.3e}"


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
