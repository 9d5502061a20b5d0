"""Invariant checks run by ``burstforge selftest``."""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops, sim
from . import tensor as T
from .align import GCA, RGCAB
from .fuse import PseudoBurst
from .tensor import Tensor
from .upsample import AGU

FAULTS = ("offset-layout",)


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} measured={self.measured:.3e}  tol={self.tolerance:.1e}  ({self.seconds:.1f}s)"


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _t(arr, grad: bool = True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _quadratic(y: Tensor, probe: np.ndarray) -> Tensor:
    # sum(y * probe) would be linear in y; squaring exercises the chain rule
    p = Tensor(probe)
    return T.sum(T.mul(T.mul(y, p), y))


# ------------------------------------------------------------------ checks

def grad_conv(seed: int = 0) -> float:
    r = _rng(seed)
    x, w, b = _t(r.standard_normal((2, 4, 7, 7))), _t(r.standard_normal((6, 2, 3, 3))), _t(r.standard_normal(6))
    probe = r.standard_normal((2, 6, 4, 4))
    return T.grad_check(lambda x, w, b: _quadratic(ops.conv2d(x, w, b, stride=2, groups=2), probe), [x, w, b])


def grad_tconv(seed: int = 0) -> float:
    r = _rng(seed)
    x, w = _t(r.standard_normal((1, 3, 4, 4))), _t(r.standard_normal((3, 2, 3, 3)))
    probe = r.standard_normal((1, 2, 8, 8))
    return T.grad_check(lambda x, w: _quadratic(ops.transposed_conv2d(x, w), probe), [x, w])


def grad_bilinear(seed: int = 0) -> float:
    r = _rng(seed)
    feat = _t(r.standard_normal((2, 5, 5)))
    coords = _t(r.uniform(-1.0, 5.0, size=(2, 4, 4)))
    probe = r.standard_normal((2, 4, 4))
    return T.grad_check(lambda f, c: _quadratic(ops.bilinear_sample(f, c), probe), [feat, coords])


def grad_deform(seed: int = 0) -> float:
    r = _rng(seed)
    x = _t(r.standard_normal((3, 6, 6)))
    off = _t(r.uniform(-1.5, 1.5, size=(18, 6, 6)))
    m = _t(r.uniform(0.05, 0.95, size=(9, 6, 6)))
    w = _t(r.standard_normal((2, 3, 3, 3)))
    probe = r.standard_normal((2, 6, 6))
    return T.grad_check(lambda *a: _quadratic(ops.deform_conv2d(*a), probe), [x, off, m, w])


def _f64_module(module, seed: int):
    module.initialize(seed)
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
        if not p.data.any():
            p.data = _rng(seed + 1).standard_normal(p.shape) * 0.3
    return module


def grad_gca_rgcab(seed: int = 0) -> float:
    r = _rng(seed)
    block = _f64_module(RGCAB(8, dtype="f64"), seed)
    gca = block.gca
    x = _t(r.standard_normal((1, 8, 6, 6)))
    probe = r.standard_normal((1, 8, 6, 6))
    params = list(block.parameters().values())

    def fn(x, *_):
        return T.add(_quadratic(block(x), probe), _quadratic(gca(x), probe))

    return T.grad_check(fn, [x] + params, max_coords=12, seed=seed)


def deform_reduction(trials: int = 20, seed: int = 0) -> float:
    worst = 0.0
    r = _rng(seed)
    for _ in range(trials):
        x = Tensor(r.standard_normal((3, 8, 8)))
        w = Tensor(r.standard_normal((4, 3, 3, 3)))
        d = ops.deform_conv2d(x, Tensor(np.zeros((18, 8, 8))), Tensor(np.ones((9, 8, 8))), w)
        worst = max(worst, float(np.abs(d.data - ops.conv2d(x, w).data).max()))
    return worst


def deform_shift(trials: int = 5, seed: int = 0) -> float:
    """Offset (dy, dx) = (1, 0) on every tap equals conv output one row down."""
    worst = 0.0
    r = _rng(seed)
    off = np.zeros((9, 2, 8, 8))
    off[:, 0] = 1.0
    off = Tensor(off.reshape(18, 8, 8))
    for _ in range(trials):
        x = Tensor(r.standard_normal((3, 8, 8)))
        w = Tensor(r.standard_normal((4, 3, 3, 3)))
        d = ops.deform_conv2d(x, off, Tensor(np.ones((9, 8, 8))), w).data
        c = ops.conv2d(x, w).data
        worst = max(worst, float(np.abs(d[:, :-1, :] - c[:, 1:, :]).max()))
    return worst


def adjoint_identity(trials: int = 20, seed: int = 0) -> float:
    worst = 0.0
    r = _rng(seed)
    for _ in range(trials):
        w = Tensor(r.standard_normal((3, 5, 3, 3)))
        x = Tensor(r.standard_normal((5, 12, 12)))
        y = Tensor(r.standard_normal((3, 6, 6)))
        lhs = float(np.sum(ops.conv2d(x, w, stride=2, padding=1).data * y.data))
        rhs = float(np.sum(x.data * ops.transposed_conv2d(y, w, stride=2, padding=1).data))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return worst


def attention_normalization(seed: int = 0) -> float:
    agu = AGU(16, 3, ("up", "up", "up"), dtype="f64")
    agu.initialize(seed)
    s = Tensor(_rng(seed).standard_normal((16, 16, 4, 4)))
    _, maps = agu(s, return_attention=True)
    return max(float(np.abs(a.data.sum(axis=1) - 1.0).max()) for a in maps)


def channel_locality(seed: int = 0) -> float:
    r = _rng(seed)
    pb = PseudoBurst(3, 8, dtype="f64")
    pb.initialize(seed)
    e = r.standard_normal((3, 8, 6, 6))
    base = pb(Tensor(e)).data
    e2 = e.copy()
    e2[:, 5] += r.standard_normal((3, 6, 6))
    moved = pb(Tensor(e2)).data
    others = [c for c in range(8) if c != 5]
    changed = float(np.abs(moved[5] - base[5]).max())
    if changed == 0.0:
        return float("inf")
    return float(np.abs(moved[others] - base[others]).max())


def noise_variance(samples: int = 1_000_000, seed: int = 0) -> float:
    worst = 0.0
    for gain in sim.GAIN_TABLE:
        p = sim.NoiseParams.from_gain(gain)
        for k, x in enumerate((0.0, 0.25, 0.5, 0.75, 1.0)):
            rng = np.random.default_rng([seed, gain, k])
            draws = sim.add_noise(np.full(samples, x), p, rng) - x
            expected = p.sigma_read ** 2 + p.sigma_shot * x
            worst = max(worst, abs(draws.var() - expected) / expected)
    return worst


def gain_table() -> float:
    expected = {1: (-2.2, -2.6), 2: (-1.8, -2.2), 4: (-1.4, -1.8), 8: (-1.1, -1.5)}
    worst = 0.0
    for g, (lr, ls) in expected.items():
        p = sim.NoiseParams.from_gain(g)
        worst = max(worst, abs(p.sigma_read - 10 ** lr), abs(p.sigma_shot - 10 ** ls))
    return worst


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("grad conv2d", grad_conv, 1e-5),
    ("grad transposed_conv2d", grad_tconv, 1e-5),
    ("grad bilinear_sample", grad_bilinear, 1e-5),
    ("grad deform_conv2d", grad_deform, 1e-4),
    ("grad gca+rgcab", grad_gca_rgcab, 1e-4),
    ("deform == conv (zero offsets)", deform_reduction, 1e-6),
    ("deform == shifted conv", deform_shift, 1e-6),
    ("transposed conv adjoint", adjoint_identity, 1e-6),
    ("agu attention sums to 1", attention_normalization, 1e-6),
    ("pseudo-burst channel locality", channel_locality, 0.0),
    ("noise variance (rel.)", noise_variance, 0.03),
    ("gain table", gain_table, 0.0),
]


@contextmanager
def injected(fault: Optional[str]):
    if fault is None:
        yield
        return
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    saved = ops.OFFSET_LAYOUT
    ops.OFFSET_LAYOUT = "swapped"
    try:
        yield
    finally:
        ops.OFFSET_LAYOUT = saved


def run(fault: Optional[str] = None) -> list[Check]:
    results = []
    with injected(fault):
        for name, fn, tol in CHECKS:
            t0 = time.perf_counter()
            try:
                value = float(fn())
            except Exception:  # a crashing check is a failed check
                value = float("inf")
            ok = value <= tol
            results.append(Check(name, value, tol, ok, time.perf_counter() - t0))
    return results
