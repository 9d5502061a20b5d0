from pathlib import Path

import cv2
import numpy as np
import pytest

from burstforge.tensor import Tensor


def f64(arr, grad=True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def randomize(module, seed=0, scale=0.3):
    """Seeded init, then fill zero-initialized parameters with noise so every
    path carries gradient."""
    module.initialize(seed)
    rng = np.random.default_rng(seed + 1)
    for _, p in module.named_parameters():
        if not p.data.any():
            p.data[...] = rng.standard_normal(p.shape) * scale
    return module


def smooth_image(h=160, w=160, phase=0.0) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.stack([0.5 + 0.4 * np.sin(x / 7 + phase),
                    0.5 + 0.4 * np.cos(y / 9),
                    0.5 + 0.3 * np.sin((x + y) / 11 + phase)])
    return img


@pytest.fixture
def corpus(tmp_path) -> Path:
    d = tmp_path / "corpus"
    d.mkdir()
    for i in range(2):
        img = smooth_image(240, 240, phase=i)
        cv2.imwrite(str(d / f"img{i}.png"), np.round(img.transpose(1, 2, 0)[..., ::-1] * 255).astype(np.uint8))
    return d


# lines recorded by test_acceptance.py, repeated in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
