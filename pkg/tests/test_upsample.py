import numpy as np
import pytest

from burstforge import tensor as T
from burstforge.align import LEAKY_SLOPE
from burstforge.ops import transposed_conv2d
from burstforge.tensor import Tensor, grad_check
from burstforge.upsample import AGU, AGULevel, GroupAttention, level_plan

from conftest import f64, randomize


def literal_attention(members, wr, we):
    """Sum members, two 1x1 maps with leaky ReLU between, softmax over the member axis."""
    g, k, f, h, w = members.shape
    s = members.sum(axis=1)
    r = np.einsum("oc,gchw->gohw", wr, s)
    r = np.where(r > 0, r, LEAKY_SLOPE * r)
    logits = np.einsum("oc,gchw->gohw", we, r).reshape(g, k, f, h, w)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_attention_matches_literal_formula():
    att = randomize(GroupAttention(8, dtype="f64"), 0)
    m = np.random.default_rng(1).standard_normal((2, 4, 8, 3, 3))
    ref = literal_attention(m, att.reduce.weight.data[:, :, 0, 0], att.expand.weight.data[:, :, 0, 0])
    out = att(Tensor(m)).data
    assert np.abs(out - ref).max() < 1e-6
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_uniform_attention_for_symmetric_weights():
    att = GroupAttention(8, dtype="f64")
    att.initialize(0)
    # same logits for every member: expand rows repeat per member
    att.expand.weight.data[...] = np.tile(att.expand.weight.data[:8], (4, 1, 1, 1))
    m = np.broadcast_to(np.random.default_rng(2).standard_normal((1, 1, 8, 4, 4)), (1, 4, 8, 4, 4))
    assert np.allclose(att(Tensor(np.ascontiguousarray(m))).data, 0.25, atol=1e-12)


def test_merge_linearity_oracle():
    lvl = AGULevel(8, 5, "up", grouped=True, dtype="f64")
    lvl.initialize(3)
    member = np.random.default_rng(3).standard_normal((8, 4, 4))
    members = Tensor(np.broadcast_to(member, (1, 4, 8, 4, 4)).copy())
    out = lvl.merge(members, Tensor(np.full((1, 4, 8, 4, 4), 0.25))).data[0]
    w = lvl.merger.weight.data.reshape(4, 8, 5, 3, 3).sum(axis=0)
    ref = 0.25 * transposed_conv2d(Tensor(member), Tensor(w)).data
    assert np.allclose(out, ref, atol=1e-12)


def test_level_shapes():
    up = AGULevel(64, 64, "up", grouped=True)
    up.initialize(0)
    out, att = up(Tensor(np.random.default_rng(4).random((4, 64, 24, 24)), dtype="f32"))
    assert out.shape == (1, 64, 48, 48) and att.shape == (1, 4, 64, 24, 24)
    flat = AGULevel(16, 16, "flat", grouped=True, dtype="f64")
    flat.initialize(0)
    out, _ = flat(Tensor(np.ones((8, 16, 6, 6))))
    assert out.shape == (2, 16, 6, 6)


def test_merger_shared_across_groups():
    lvl = AGULevel(8, 8, "up", grouped=True, dtype="f64")
    lvl.initialize(5)
    grp = np.random.default_rng(5).standard_normal((4, 8, 4, 4))
    out, _ = lvl(Tensor(np.concatenate([grp, grp])))
    assert np.array_equal(out.data[0], out.data[1])


def test_level_plan():
    assert [n for *_, n in level_plan(64, ("up",) * 3)] == [16, 4, 1]
    assert [g for _, g, _ in level_plan(16, ("up",) * 3)] == [True, True, False]
    with pytest.raises(ValueError):
        level_plan(24, ("up",) * 3)
    with pytest.raises(ValueError):
        level_plan(64, ("up",) * 2)
    with pytest.raises(ValueError):
        AGULevel(8, 3, "sideways", True)


def test_agu_task_shapes():
    sr = AGU(16, 3, ("up", "up", "up"), dtype="f64")
    sr.initialize(0)
    out, maps = sr(Tensor(np.random.default_rng(6).random((16, 16, 8, 8))), return_attention=True)
    assert out.shape == (3, 64, 64) and len(maps) == 2
    for a in maps:
        assert np.allclose(a.data.sum(axis=1), 1.0, atol=1e-6)
    gray = AGU(64, 1, ("flat",) * 3)
    gray.initialize(0)
    assert gray.groups_per_level == [16, 4, 1]
    assert gray(Tensor(np.random.default_rng(7).random((64, 64, 32, 32)), dtype="f32")).shape == (1, 32, 32)


def test_grad_attention_and_merge():
    r = np.random.default_rng(8)
    lvl = randomize(AGULevel(8, 4, "up", grouped=True, dtype="f64"), 9)
    flat = randomize(AGULevel(8, 3, "flat", grouped=True, dtype="f64"), 10)
    frames = f64(r.standard_normal((4, 8, 3, 3)))
    p_up, p_flat = r.standard_normal((1, 4, 6, 6)), r.standard_normal((1, 3, 3, 3))

    def fn(x, *_):
        a, _ = lvl(x)
        b, _ = flat(x)
        return T.add(T.sum(T.mul(T.mul(a, Tensor(p_up)), a)), T.sum(T.mul(T.mul(b, Tensor(p_flat)), b)))

    params = list(lvl.parameters().values()) + list(flat.parameters().values())
    assert grad_check(fn, [frames, *params], max_coords=20) < 1e-4


def test_grad_full_agu_tiny():
    agu = randomize(AGU(16, 3, ("up", "up", "up"), dtype="f64"), 11)
    r = np.random.default_rng(12)
    s = f64(r.standard_normal((16, 16, 2, 2)))
    probe = r.standard_normal((3, 16, 16))
    fn = lambda s, *_: T.sum(T.mul(T.mul(agu(s), Tensor(probe)), agu(s)))
    assert grad_check(fn, [s, *agu.parameters().values()], max_coords=10) < 1e-4
