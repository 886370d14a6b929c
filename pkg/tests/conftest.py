import numpy as np
import pytest

from rehearsal_diffusion.denoiser import DenoiserConfig, init_denoiser


def tiny_config(**kw):
    base = dict(seq_len=8, hidden=8, conv_mult=(1, 2), n_down=2, n_mid=1, n_up=1, groups=4, kernel_size=3)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture
def tiny_params():
    return init_denoiser(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by test_acceptance.py and echoed once at the end
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
