import numpy as np
import pytest

from cdcgen.data import make_pinwheel_pair
from cdcgen.diffmath import Module
from cdcgen.trainer.loops import AlignConfig, train_mle


def perturb(module, rng, scale=0.3):
    """Move every trainable parameter off its (identity) initialization."""
    for p in module.parameters():
        if p.requires_grad:
            p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return module


def randomize(module, rng, gain=0.5):
    """Redraw every parameter, output layers included, at ``gain`` times the fan-in scale."""
    for p in module.parameters():
        d = p.data
        if d.ndim == 1:
            p.data = 0.3 * gain * rng.standard_normal(d.shape)
        else:
            fan = d.shape[0] if d.ndim == 2 else int(np.prod(d.shape[1:]))
            p.data = gain * rng.standard_normal(d.shape) / np.sqrt(fan)
    return module


@pytest.fixture(scope="session")
def pinwheel_pair():
    return make_pinwheel_pair(classes=3, n_per_class=400, seed=0)


@pytest.fixture(scope="session")
def trained_flow_2d(pinwheel_pair):
    source, _, _ = pinwheel_pair
    cfg = AlignConfig(lambda_t=0.0, gamma_s=0.0, gamma_t=0.0, adv_weight=0.0, lr=1e-3, batch_size=128,
                      steps=600, seed=0)
    flow, _ = train_mle(source, {"kind": "vector", "dim": 2, "n_layers": 8, "hidden": 64}, cfg)
    return flow


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
