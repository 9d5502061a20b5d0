import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from burstforge import cli
from burstforge import dataset as ds
from burstforge.model import load_checkpoint


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def simulate(corpus, out, *extra):
    return cli.main(["simulate", "--source", str(corpus), "--out", str(out), *extra])


def sr_dataset(corpus, out, count=2, seed=3):
    assert simulate(corpus, out, "--task", "sr_x4", "--count", str(count), "--seed", str(seed),
                    "--burst-size", "2", "--crop", "16") == 0
    return out


def write_config(path, **sections) -> Path:
    base = {"model": {"task": "sr_x4", "burst_size": 2, "features": 16, "dtype": "f64"},
            "train": {"iterations": 4, "lr_max": 1e-3, "augment": False},
            "data": {"crop": 16}}
    for key, value in sections.items():
        base[key] = {**base.get(key, {}), **value}
    path.write_text(json.dumps(base))
    return path


def test_simulate_layout_and_determinism(corpus, tmp_path):
    a = sr_dataset(corpus, tmp_path / "a", count=3)
    b = sr_dataset(corpus, tmp_path / "b", count=3)
    assert tree_digest(a) == tree_digest(b)
    c = sr_dataset(corpus, tmp_path / "c", count=3, seed=4)
    assert tree_digest(a) != tree_digest(c)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["task"] == "sr_x4" and manifest["count"] == 3
    assert [e["path"] for e in manifest["samples"]] == ["sample_0000", "sample_0001", "sample_0002"]
    assert manifest["samples"][1]["seed"] == ds.sample_seed(3, 1)
    meta = json.loads((a / "sample_0000" / "meta.json").read_text())
    assert meta["frame_shape"] == [4, 8, 8] and meta["gt_shape"] == [3, 64, 64]
    assert meta["frame_layout"] == "bayer_rggb" and len(meta["frames"]) == 2
    assert set(meta["transforms"][1]) == {"dy", "dx", "angle_deg"}
    resolved = json.loads((a / "config.json").read_text())
    assert resolved["data"]["max_translation"] == 8.0


def test_sample_roundtrip_precision(corpus, tmp_path):
    a = sr_dataset(corpus, tmp_path / "a", count=1)
    s = ds.read_sample(a / "sample_0000")
    fresh = ds.synthesize("sr_x4", ds.load_image(corpus / "img0.png"), s.seed,
                          {"crop": 16, "scale": 4, "gain": 1, "max_translation": 8.0, "max_rotation_deg": 1.0}, 2)
    assert np.abs(s.burst - fresh.burst).max() <= 0.5 / ds.FRAME_SCALE + 1e-12
    assert np.abs(s.ground_truth - fresh.ground_truth).max() <= 0.5 / 255 + 1e-12


def test_simulate_unseen_gain_flag(corpus, tmp_path):
    assert simulate(corpus, tmp_path / "g", "--task", "denoise_gray", "--gain", "8", "--count", "1", "--crop", "32") == 0
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert manifest["unseen_gain"] is True and manifest["gain"] == 8
    meta = json.loads((tmp_path / "g" / "sample_0000" / "meta.json").read_text())
    assert meta["noise"]["unseen_during_training"] and meta["frame_shape"] == [1, 32, 32]


def test_simulate_errors(corpus, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert simulate(empty, tmp_path / "x", "--task", "sr_x4", "--count", "1") == 2
    assert "no PNG" in capsys.readouterr().err
    assert simulate(tmp_path / "missing", tmp_path / "x", "--count", "1") == 2
    assert simulate(corpus, tmp_path / "x", "--task", "sr_x4", "--count", "1", "--gain", "3") == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--count", "1"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["explode"])
    assert exc.value.code == 1


def test_train_outputs_and_resume(corpus, tmp_path, capsys):
    data = sr_dataset(corpus, tmp_path / "d", count=1)
    before = tree_digest(data)
    cfg = write_config(tmp_path / "c.json", data={"dataset_dir": str(data)}, train={"checkpoint_interval": 2})
    ckpt = tmp_path / "run" / "m.ckpt"
    assert cli.main(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
    rows = (tmp_path / "run" / "m.csv").read_text().splitlines()
    assert rows[0] == "step,lr,loss" and len(rows) == 5
    losses = [float(r.split(",")[2]) for r in rows[1:]]
    assert losses[-1] < losses[0]
    resolved = json.loads((tmp_path / "run" / "m.config.json").read_text())
    assert resolved["train"]["beta2"] == 0.999 and resolved["data"]["gain"] == 1
    assert tree_digest(data) == before

    cfg2 = write_config(tmp_path / "c2.json", data={"dataset_dir": str(data)}, train={"iterations": 6})
    assert cli.main(["train", "--config", str(cfg2), "--out", str(ckpt),
                     "--resume", str(tmp_path / "run" / "m_step2.ckpt")]) == 0
    assert load_checkpoint(ckpt).step == 6
    steps = [r.split(",")[0] for r in (tmp_path / "run" / "m.csv").read_text().splitlines()[1:]]
    assert steps == [str(i) for i in range(1, 7)]


def test_train_from_corpus_fixed_sample(corpus, tmp_path):
    cfg = write_config(tmp_path / "c.json", data={"source_dir": str(corpus), "fixed_sample": True},
                       train={"iterations": 5})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")]) == 0
    losses = [float(r.split(",")[2]) for r in (tmp_path / "m.csv").read_text().splitlines()[1:]]
    assert losses[-1] < losses[0]


def test_train_preflight_errors(corpus, tmp_path, capsys):
    data = sr_dataset(corpus, tmp_path / "d", count=1)
    bad_scale = write_config(tmp_path / "a.json", model={"task": "sr_x8"}, data={"scale": 4, "dataset_dir": str(data)})
    assert cli.main(["train", "--config", str(bad_scale), "--out", str(tmp_path / "m")]) == 2
    assert "data.scale=4" in capsys.readouterr().err
    bad_crop = write_config(tmp_path / "b.json", data={"crop": 24, "dataset_dir": str(data)})
    assert cli.main(["train", "--config", str(bad_crop), "--out", str(tmp_path / "m")]) == 2
    assert "8x8" in capsys.readouterr().err
    bad_task = write_config(tmp_path / "c.json", model={"task": "lowlight"}, data={"dataset_dir": str(data)})
    assert cli.main(["train", "--config", str(bad_task), "--out", str(tmp_path / "m")]) == 2
    unknown = write_config(tmp_path / "d.json", train={"warmup": 3})
    assert cli.main(["train", "--config", str(unknown), "--out", str(tmp_path / "m")]) == 2
    assert not (tmp_path / "m").exists()


def test_train_nan_exit_code(corpus, tmp_path):
    data = sr_dataset(corpus, tmp_path / "d", count=1)
    cfg = write_config(tmp_path / "c.json", data={"dataset_dir": str(data)}, train={"lr_max": 1e200})
    code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.ckpt")])
    assert code == 3
    assert load_checkpoint(tmp_path / "m.ckpt").step >= 1


def _checkpoint(tmp_path, corpus, task, b, name="m.ckpt"):
    cfg = write_config(tmp_path / f"{name}.json", model={"task": task, "burst_size": b},
                       train={"iterations": 0}, data={"source_dir": str(corpus)})
    ckpt = tmp_path / name
    assert cli.main(["train", "--config", str(cfg), "--out", str(ckpt)]) == 0
    return ckpt


def test_infer_shapes_and_errors(corpus, tmp_path, capsys):
    import cv2

    ckpt = _checkpoint(tmp_path, corpus, "sr_x4", 14)
    assert simulate(corpus, tmp_path / "sr", "--task", "sr_x4", "--count", "1") == 0
    out = tmp_path / "o.png"
    assert cli.main(["infer", "--ckpt", str(ckpt), "--burst", str(tmp_path / "sr" / "sample_0000"), "--out", str(out)]) == 0
    img = cv2.imread(str(out), cv2.IMREAD_UNCHANGED)
    assert img.shape == (192, 192, 3) and img.dtype == np.uint8

    dn = _checkpoint(tmp_path, corpus, "denoise_color", 8, "dn.ckpt")
    assert simulate(corpus, tmp_path / "dn", "--task", "denoise_color", "--count", "1", "--crop", "32") == 0
    assert cli.main(["infer", "--ckpt", str(dn), "--burst", str(tmp_path / "dn" / "sample_0000"), "--out", str(out)]) == 0
    assert cv2.imread(str(out)).shape == (32, 32, 3)

    capsys.readouterr()
    assert cli.main(["infer", "--ckpt", str(ckpt), "--burst", str(tmp_path / "dn" / "sample_0000"), "--out", str(out)]) == 2
    assert "expects 14 x 4" in capsys.readouterr().err
    (tmp_path / "sr" / "sample_0000" / "frame_03.png").unlink()
    (tmp_path / "sr" / "sample_0000" / "frame_07.png").unlink()
    assert cli.main(["infer", "--ckpt", str(ckpt), "--burst", str(tmp_path / "sr" / "sample_0000"), "--out", str(out)]) == 2
    assert "['frame_03.png', 'frame_07.png']" in capsys.readouterr().err


def test_evaluate_identity_injection(corpus, tmp_path):
    data = sr_dataset(corpus, tmp_path / "d", count=2)
    gts = {}
    for e in json.loads((data / "manifest.json").read_text())["samples"]:
        s = ds.read_sample(data / e["path"])
        gts[s.burst.tobytes()] = s.ground_truth
    rep = cli.evaluate(lambda burst: gts[burst.tobytes()], data)
    assert rep["psnr_db"] == 100.0 and rep["ssim"] == pytest.approx(1.0, abs=1e-9) and rep["n_images"] == 2
    rng = np.random.default_rng(0)
    noisy = cli.evaluate(lambda b: np.clip(gts[b.tobytes()] + rng.normal(0, 0.05, gts[b.tobytes()].shape), 0, 1), data)
    per = noisy["per_sample"]
    assert noisy["psnr_db"] == pytest.approx(np.mean([p["psnr_db"] for p in per]))
    assert noisy["ssim"] == pytest.approx(np.mean([p["ssim"] for p in per]))


def test_eval_command_and_errors(corpus, tmp_path, capsys):
    data = sr_dataset(corpus, tmp_path / "d", count=1)
    ckpt = _checkpoint(tmp_path, corpus, "sr_x4", 2)
    before = tree_digest(data)
    assert cli.main(["eval", "--ckpt", str(ckpt), "--dataset", str(data), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep) >= {"psnr_db", "ssim", "n_images"} and rep["n_images"] == 1
    assert tree_digest(data) == before
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "manifest.json").write_text(json.dumps({"task": "sr_x4", "samples": []}))
    assert cli.main(["eval", "--ckpt", str(ckpt), "--dataset", str(empty)]) == 2
    dn = tmp_path / "dn"
    assert simulate(corpus, dn, "--task", "denoise_gray", "--count", "1", "--crop", "32") == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(ckpt), "--dataset", str(dn)]) == 2
    assert "does not match" in capsys.readouterr().err


def test_selftest_command(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "12/12 checks passed" in out and "tol=" in out and "measured=" in out
    assert cli.main(["selftest", "--inject-fault", "offset-layout"]) == 3
    failing = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAIL")]
    assert len(failing) == 1 and "deform == shifted conv" in failing[0]
    assert "inject" not in cli.build_parser().format_help()
