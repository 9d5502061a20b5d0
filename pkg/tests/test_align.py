import numpy as np
import pytest

from burstforge import tensor as T
from burstforge.align import EBFA, FPM, GCA, LEAKY_SLOPE, OffsetPredictor, RGCAB
from burstforge.tensor import Tensor, grad_check

from conftest import f64, randomize


def naive_gca(x, wk, wsq, wexp):
    """Per-pixel reimplementation: softmax-pooled context, bottleneck, broadcast add."""
    f, h, w = x.shape
    logits = np.array([[sum(wk[c] * x[c, i, j] for c in range(f)) for j in range(w)] for i in range(h)])
    e = np.exp(logits - logits.max())
    a = e / e.sum()
    ctx = np.array([sum(a[i, j] * x[c, i, j] for i in range(h) for j in range(w)) for c in range(f)])
    hidden = wsq @ ctx
    hidden = np.where(hidden > 0, hidden, LEAKY_SLOPE * hidden)
    t = wexp @ hidden
    return x + t[:, None, None]


def _gca(f=8, seed=0):
    return randomize(GCA(f, dtype="f64"), seed)


def test_gca_matches_literal_formula():
    g = _gca()
    x = np.random.default_rng(1).standard_normal((8, 5, 6))
    ref = naive_gca(x, g.score.weight.data[0, :, 0, 0], g.squeeze.weight.data[:, :, 0, 0],
                    g.expand.weight.data[:, :, 0, 0])
    assert np.abs(g(Tensor(x)).data - ref).max() < 1e-6


def test_gca_zero_expand_is_identity_and_weights_normalized():
    g = _gca()
    g.expand.weight.data[...] = 0
    x = np.full((8, 4, 4), 0.7)
    assert np.array_equal(g(Tensor(x)).data, x)
    xr = Tensor(np.random.default_rng(2).standard_normal((1, 8, 5, 5)))
    assert abs(g.pooling_weights(xr).data.sum() - 1) < 1e-6


def test_gca_rejects_bad_ratio():
    with pytest.raises(ValueError):
        GCA(6)


def test_rgcab_residual_decomposition_and_identity():
    b = randomize(RGCAB(8, dtype="f64"), 3)
    x = Tensor(np.random.default_rng(4).standard_normal((8, 7, 5)))
    out = b(x).data
    assert out.shape == (8, 7, 5)
    assert np.allclose(out - x.data, b.branch(x).data, atol=1e-12)
    b.out.weight.data[...] = 0
    assert np.array_equal(b(x).data, x.data)


def test_fpm_identity_block_count_and_determinism():
    fpm = FPM(8, 3, 3, dtype="f64")
    assert fpm.num_blocks == 9
    fpm.initialize(5)
    x = Tensor(np.random.default_rng(5).standard_normal((8, 6, 6)))
    first = fpm(x).data
    again = FPM(8, 3, 3, dtype="f64")
    again.initialize(5)
    assert np.array_equal(first, again(x).data)
    fpm.tail.weight.data[...] = 0
    assert np.array_equal(fpm(x).data, x.data)


def test_offset_predictor_init_field():
    p = OffsetPredictor(8, dtype="f64")
    p.initialize(0)
    r = np.random.default_rng(6)
    y, yb = Tensor(r.standard_normal((2, 8, 6, 6))), Tensor(r.standard_normal((2, 8, 6, 6)))
    field = p(y, yb)
    assert field.offsets.shape == (2, 18, 6, 6) and not field.offsets.data.any()
    assert np.all(field.masks.data == 0.5)
    randomize(p, 1, scale=3.0)
    field = p(y, yb)
    assert np.isfinite(field.offsets.data).all()
    assert field.masks.data.min() >= 0 and field.masks.data.max() <= 1


def _ebfa(cin=4, f=8, seed=0):
    e = EBFA(cin, f, dtype="f64")
    e.initialize(seed)
    return e


def test_ebfa_degenerate_burst():
    out = _ebfa()(Tensor(np.random.default_rng(7).random((1, 4, 8, 8))))
    assert out.shape == (1, 8, 8, 8) and np.isfinite(out.data).all()


def test_ebfa_identical_frames_give_identical_features():
    frame = np.random.default_rng(8).random((4, 8, 8))
    out = _ebfa()(Tensor(np.stack([frame] * 3))).data
    assert np.abs(out[1] - out[0]).max() < 1e-6 and np.abs(out[2] - out[0]).max() < 1e-6


def test_ebfa_permuting_non_base_frames_permutes_output():
    e = _ebfa(seed=1)
    for stage in e.stages:
        randomize(stage.predict, 2, scale=0.05)
    burst = np.random.default_rng(9).random((4, 4, 8, 8))
    out = e(Tensor(burst)).data
    perm = [0, 3, 1, 2]
    assert np.allclose(e(Tensor(burst[perm])).data, out[perm], atol=1e-10)


def test_ebfa_full_width_shape():
    e = EBFA(4, 64)
    e.initialize(0)
    out = e(Tensor(np.random.default_rng(10).random((2, 4, 24, 24)), dtype="f32"))
    assert out.shape == (2, 64, 24, 24) and np.isfinite(out.data).all()


def test_ebfa_rejects_wrong_channels():
    with pytest.raises(ValueError):
        _ebfa()(Tensor(np.zeros((2, 3, 8, 8))))


def _quad(y, probe):
    return T.sum(T.mul(T.mul(y, Tensor(probe)), y))


def test_grad_gca_and_rgcab():
    r = np.random.default_rng(11)
    x = f64(r.standard_normal((1, 8, 5, 5)))
    probe = r.standard_normal((1, 8, 5, 5))
    g = _gca(seed=3)
    assert grad_check(lambda x, *_: _quad(g(x), probe), [x, *g.parameters().values()]) < 1e-4
    b = randomize(RGCAB(8, dtype="f64"), 4)
    assert grad_check(lambda x, *_: _quad(b(x), probe), [x, *b.parameters().values()],
                      max_coords=20) < 1e-4


def test_grad_ebfa():
    e = _ebfa(seed=2)
    for stage in e.stages:
        randomize(stage.predict, 3, scale=0.05)
    r = np.random.default_rng(12)
    burst = f64(r.random((2, 4, 6, 6)))
    probe = r.standard_normal((2, 8, 6, 6))
    params = [p for n, p in e.named_parameters() if n.startswith(("stages", "edge", "conv_in"))]
    assert grad_check(lambda b, *_: _quad(e(b), probe), [burst, *params], max_coords=10) < 1e-4
