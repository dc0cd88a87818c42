import numpy as np
import pytest
import torch

from dadasr.data import Image, write_png


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w, c=3):
    return Image(rng.uniform(0, 1, size=(h, w, c)))


def write_pairs(root, ids, lr_size=12, scale=4, rng=None, hr_shape=None):
    rng = rng or np.random.default_rng(0)
    for i in ids:
        write_png(rng.uniform(0, 1, (lr_size, lr_size, 3)), root / "LR" / f"{i}.png")
        hs = hr_shape or (lr_size * scale, lr_size * scale)
        write_png(rng.uniform(0, 1, (*hs, 3)), root / "HR" / f"{i}.png")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        r = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if r['pass'] else 'FAIL'}  {r['detail']}")
