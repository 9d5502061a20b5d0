import numpy as np
import pytest

from burstforge import sim
from burstforge.sim import NoiseParams

from conftest import smooth_image


def test_eotf_values():
    assert sim.srgb_to_linear(np.array(0.5)) == pytest.approx(0.2140, abs=5e-5)
    x = np.linspace(0, 1, 11)
    assert np.allclose(sim.linear_to_srgb(sim.srgb_to_linear(x)), x)


def test_inverse_isp_endpoints_and_identity():
    zero, _ = sim.inverse_isp(np.zeros((3, 2, 2)), np.random.default_rng(0))
    one, gains = sim.inverse_isp(np.ones((3, 2, 2)), np.random.default_rng(0))
    assert not zero.any() and one.max() <= 1.0
    assert 1.5 <= gains["red_gain"] <= 2.5
    img = np.random.default_rng(1).random((3, 4, 4))
    lin, _ = sim.inverse_isp(img, gains=(1.0, 1.0))
    assert np.allclose(lin, sim.srgb_to_linear(img))
    with pytest.raises(ValueError):
        sim.inverse_isp(np.full((3, 2, 2), 1.5))


def test_warp_identity_and_integer_shift():
    img = np.random.default_rng(2).random((2, 12, 12))
    same, tr = sim.random_warp(img, 0.0, 0.0, seed=5, frame=3)
    assert tr == {"dy": 0.0, "dx": 0.0, "angle_deg": 0.0} and np.array_equal(same, img)
    shifted = sim.apply_warp(img, {"dy": 2.0, "dx": 0.0, "angle_deg": 0.0})
    assert np.allclose(shifted[:, 2:], img[:, :-2])
    assert not shifted[:, :2].any()


def test_warp_record_reproduces():
    img = np.random.default_rng(3).random((3, 16, 16))
    warped, tr = sim.random_warp(img, 2.0, 1.0, seed=7, frame=2)
    assert np.array_equal(sim.apply_warp(img, tr), warped)
    base, tr0 = sim.random_warp(img, 2.0, 1.0, seed=7, frame=0)
    assert np.array_equal(base, img) and tr0["dy"] == 0.0


def test_downsample_examples():
    assert np.allclose(sim.downsample_bilinear(np.full((1, 8, 8), 0.3), 4), 0.3)
    img = np.random.default_rng(4).random((2, 6, 6))
    assert np.array_equal(sim.downsample_bilinear(img, 1), img)
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)[None]
    assert np.allclose(sim.downsample_bilinear(board, 2), 0.5)


def test_mosaic_examples():
    packed = sim.mosaic_and_pack(np.full((3, 4, 4), 0.4))
    assert packed.shape == (4, 2, 2) and np.allclose(packed, 0.4)
    r = np.random.default_rng(5)
    red = np.zeros((3, 4, 4))
    red[0] = r.random((4, 4))
    p = sim.mosaic_and_pack(red)
    assert np.array_equal(p[0], red[0, 0::2, 0::2]) and not p[1:].any()
    mosaic = sim.unpack_mosaic(sim.mosaic_and_pack(r.random((3, 6, 6))))
    assert np.array_equal(sim.unpack_mosaic(sim.pack_mosaic(mosaic)), mosaic)


def test_noise_params_and_zero_noise():
    p = NoiseParams.from_gain(1)
    assert (p.sigma_read, p.sigma_shot) == (10 ** -2.2, 10 ** -2.6)
    p8 = NoiseParams.from_gain(8)
    assert (p8.sigma_read, p8.sigma_shot) == (10 ** -1.1, 10 ** -1.5) and p8.unseen
    assert not NoiseParams.from_gain(4).unseen
    x = np.random.default_rng(6).random(100)
    assert np.array_equal(sim.add_noise(x, NoiseParams(0.0, 0.0), np.random.default_rng(0)), x)
    with pytest.raises(ValueError):
        NoiseParams.from_gain(3)


def test_noise_monte_carlo_std():
    p = NoiseParams.from_gain(4)
    d = sim.add_noise(np.full(1_000_000, 0.5), p, np.random.default_rng(7)) - 0.5
    expected = np.sqrt(10 ** -2.8 + 10 ** -1.8 * 0.5)
    assert abs(d.std() - expected) / expected < 0.02


def test_sr_burst_defaults():
    src = smooth_image(240, 240)
    s = sim.make_sr_burst(src, seed=3)
    assert s.burst.shape == (14, 4, 24, 24) and s.ground_truth.shape == (3, 192, 192)
    assert s.task == "sr_x4" and s.transforms[0] == {"dy": 0.0, "dx": 0.0, "angle_deg": 0.0}
    again = sim.make_sr_burst(src, seed=3)
    assert np.array_equal(s.burst, again.burst) and np.array_equal(s.ground_truth, again.ground_truth)
    assert not np.array_equal(s.burst, sim.make_sr_burst(src, seed=4).burst)


def test_sr_base_frame_is_clean_pipeline_of_gt():
    src = smooth_image(120, 120)
    s = sim.make_sr_burst(src, 3, 16, 4, seed=1, noise=NoiseParams(0.0, 0.0), gains=(1.0, 1.0))
    ref = sim.mosaic_and_pack(sim.downsample_bilinear(sim.srgb_to_linear(s.ground_truth), 4))
    assert np.allclose(s.burst[0], ref)


def test_denoise_burst():
    gray = smooth_image(170, 170)[:1]
    s = sim.make_denoise_burst(gray, seed=2)
    assert s.burst.shape == (8, 1, 128, 128) and s.task == "denoise_gray"
    s8 = sim.make_denoise_burst(gray, 4, 32, gain=8, seed=2)
    assert s8.noise.to_dict()["unseen_during_training"]
    clean = sim.make_denoise_burst(gray, 4, 32, seed=2, noise=NoiseParams(0.0, 0.0))
    assert np.array_equal(clean.burst[0], clean.ground_truth)
    tr = clean.transforms[2]
    m = clean.meta["margin"]
    moved = sim.apply_warp(clean.ground_truth, tr)
    assert np.allclose(clean.burst[2][:, m:-m, m:-m], moved[:, m:-m, m:-m])


def test_lowlight_burst():
    s = sim.make_lowlight_burst(smooth_image(160, 160), 4, 16, seed=0)
    assert s.burst.shape == (4, 4, 16, 16) and s.ground_truth.shape == (3, 32, 32)
    assert s.noise.gain_label == 4 and s.burst.mean() < 0.1


def test_flipped_source_matches_flipped_gt():
    src = smooth_image(120, 120)
    a = sim.make_sr_burst(src, 2, 8, 4, seed=9)
    b = sim.make_sr_burst(src, 2, 8, 4, seed=9, flips=(True, False))
    assert np.array_equal(b.ground_truth, sim.flip_image(a.ground_truth, True, False))
    assert b.meta["flips"] == [True, False]
