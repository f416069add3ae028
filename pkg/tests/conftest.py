import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_box(rng, lo=0.0, hi=64.0, min_side=1.0):
    x0, y0 = rng.uniform(lo, hi - min_side, 2)
    w = rng.uniform(min_side, hi - x0)
    h = rng.uniform(min_side, hi - y0)
    return np.array([x0, y0, x0 + w, y0 + h])


SMALL_RUN = {
    "image_size": 64,
    "dataset.synth.n_images": 4,
    "dataset.synth.min_box": 12,
    "dataset.synth.max_box": 28,
    "train.batch_size": 2,
    "train.checkpoint_every": 2,
    "train.iterations": 4,
    "model.head_width": 16,
    "model.backbone_channels": [8, 12, 16, 24],
}


def small_config(**extra):
    from afdet.config import RunConfig

    return RunConfig().with_overrides({**SMALL_RUN, **extra})


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
