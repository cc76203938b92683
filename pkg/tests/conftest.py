import numpy as np
import pytest

from vcal.model import CalibrationDataset, NoiseParams, build_model
from vcal.rff import KernelParams


def toy_dataset(seed=0, n=3, N=3, d1=1, d2=1, d_out=1):
    rng = np.random.default_rng(seed)
    return CalibrationDataset(
        rng.random((n, d1)),
        rng.standard_normal((n, d_out)),
        rng.random((N, d1)),
        rng.random((N, d2)),
        rng.standard_normal((N, d_out)),
    )


def toy_model(discrepancy="additive", n_rf=4, d1=1, d2=1, d_out=1, hidden_dims=(), concat_input=False, seed=0):
    d_in = d1 + d2
    kernels = [KernelParams.isotropic(0.9, 1.3, d_in)] + [
        KernelParams.isotropic(1.1, 0.7, h + (d_in if concat_input else 0)) for h in hidden_dims
    ]
    width = d1 if discrepancy == "additive" else d_out + d1
    return build_model(
        d1, d2, d_out, n_rf=n_rf, discrepancy=discrepancy, emulator_kernels=kernels,
        hidden_dims=hidden_dims, concat_input=concat_input,
        disc_kernel=KernelParams.isotropic(0.5, 2.0, width), noise=NoiseParams(0.3, 0.2), seed=seed,
    )


@pytest.fixture
def dataset():
    return toy_dataset()


@pytest.fixture
def model():
    return toy_model()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
