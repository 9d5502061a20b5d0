"""On-disk sample layout, PNG IO, and training data sources."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import cv2
import numpy as np

from . import sim
from .sim import BurstSample, NoiseParams
from .train import augment_flips, flip_choice

# Frames can go slightly negative or above 1 once noise is added, so 16-bit
# frames store (x + OFFSET) * SCALE, covering [-0.25, 1.25].
FRAME_OFFSET = 0.25
FRAME_SCALE = 65535.0 / 1.5
RAW_TASKS = ("sr_x4", "sr_x8", "lowlight")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- png io

def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Write ``[H,W]`` or ``[C,H,W]`` (C in 1, 3) integer-valued array."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)[..., ::-1]
    dt = np.uint8 if bits == 8 else np.uint16
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr.astype(dt))):
        raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    """Read a PNG as ``[C,H,W]`` integers (C = 1 or 3)."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if arr.ndim == 2:
        return arr[None]
    if arr.shape[2] == 4:
        arr = arr[..., :3]
    return np.ascontiguousarray(arr[..., ::-1].transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path, gray: bool = False) -> np.ndarray:
    """8- or 16-bit PNG -> float ``[C,H,W]`` in [0,1]."""
    raw = read_png(path)
    img = raw.astype(np.float64) / (65535.0 if raw.dtype == np.uint16 else 255.0)
    if gray and img.shape[0] == 3:
        img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    elif not gray and img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def list_corpus(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"source corpus {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DatasetError(f"source corpus {d} contains no PNG images")
    return files


def encode_frame(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip((x + FRAME_OFFSET) * FRAME_SCALE, 0, 65535)).astype(np.uint16)


def decode_frame(v: np.ndarray) -> np.ndarray:
    return v.astype(np.float64) / FRAME_SCALE - FRAME_OFFSET


# ---------------------------------------------------------- sample export

def frame_name(i: int) -> str:
    return f"frame_{i:02d}.png"


def write_sample(sample: BurstSample, directory) -> dict:
    """Write frames, ``gt.png`` and ``meta.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw = sample.task in RAW_TASKS
    names = []
    for i, frame in enumerate(sample.burst):
        plane = sim.unpack_mosaic(frame) if raw else frame
        write_png(d / frame_name(i), encode_frame(plane), bits=16)
        names.append(frame_name(i))
    write_png(d / "gt.png", to_uint8(sample.ground_truth))
    meta = {
        "task": sample.task,
        "burst_size": int(sample.burst.shape[0]),
        "frame_shape": list(sample.burst.shape[1:]),
        "frame_layout": "bayer_rggb" if raw else "image",
        "frame_encoding": {"bits": 16, "offset": FRAME_OFFSET, "scale": FRAME_SCALE},
        "frames": names,
        "gt": "gt.png",
        "gt_shape": list(sample.ground_truth.shape),
        "transforms": sample.transforms,
        "noise": sample.noise.to_dict(),
        "seed": int(sample.seed),
        "extra": sample.meta,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_meta(directory) -> dict:
    p = Path(directory) / "meta.json"
    if not p.exists():
        raise DatasetError(f"{directory}: missing meta.json")
    return json.loads(p.read_text())


def read_burst(directory) -> tuple[np.ndarray, dict]:
    """Load the burst ``[B,C,h,w]`` described by ``meta.json``."""
    d = Path(directory)
    meta = read_meta(d)
    missing = [n for n in meta["frames"] if not (d / n).exists()]
    if missing:
        raise DatasetError(f"{d}: missing frame files {missing} (expected {len(meta['frames'])} frames)")
    frames = []
    for n in meta["frames"]:
        plane = decode_frame(read_png(d / n))
        frames.append(sim.pack_mosaic(plane[0]) if meta["frame_layout"] == "bayer_rggb" else plane)
    burst = np.stack(frames)
    if list(burst.shape[1:]) != meta["frame_shape"]:
        raise DatasetError(f"{d}: frames decode to {burst.shape[1:]}, meta says {meta['frame_shape']}")
    return burst, meta


def read_sample(directory) -> BurstSample:
    d = Path(directory)
    burst, meta = read_burst(d)
    gt = read_png(d / meta["gt"]).astype(np.float64) / 255.0
    n = meta["noise"]
    noise = NoiseParams(n["sigma_read"], n["sigma_shot"], n["gain"])
    return BurstSample(burst, gt, meta["transforms"], noise, meta["task"], meta["seed"], meta.get("extra", {}))


def read_manifest(directory) -> dict:
    p = Path(directory) / "manifest.json"
    if not p.exists():
        raise DatasetError(f"{directory}: missing manifest.json")
    manifest = json.loads(p.read_text())
    if not manifest.get("samples"):
        raise DatasetError(f"{directory}: dataset is empty")
    return manifest


# ------------------------------------------------------------ generation

def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed derived from (run seed, sample index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def synthesize(task: str, image: np.ndarray, seed: int, data: dict, burst_size: int,
               flips: tuple = (False, False)) -> BurstSample:
    """One sample for ``task`` from a float sRGB source image."""
    if task in ("sr_x4", "sr_x8"):
        return sim.make_sr_burst(image, burst_size, data["crop"], data["scale"], seed,
                                 data["max_translation"], data["max_rotation_deg"],
                                 NoiseParams.from_gain(data["gain"]), flips)
    if task == "lowlight":
        return sim.make_lowlight_burst(image, burst_size, data["crop"], seed, data["exposure"],
                                       data["max_translation"], data["gain"], flips)
    if task in ("denoise_gray", "denoise_color"):
        return sim.make_denoise_burst(image, burst_size, data["crop"], data["gain"], seed,
                                      data["max_translation"], flips=flips)
    raise DatasetError(f"unknown task {task!r}")


def simulate_dataset(task: str, corpus: list[Path], count: int, seed: int, data: dict,
                     burst_size: int, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gray = task == "denoise_gray"
    images = {}
    entries = []
    for i in range(count):
        src = corpus[i % len(corpus)]
        if src not in images:
            images[src] = load_image(src, gray=gray)
        s = sample_seed(seed, i)
        sample = synthesize(task, images[src], s, data, burst_size)
        name = f"sample_{i:04d}"
        write_sample(sample, out / name)
        entries.append({"path": name, "seed": s, "source": src.name})
    noise = NoiseParams.from_gain(data["gain"])
    manifest = {
        "task": task,
        "count": count,
        "seed": seed,
        "burst_size": burst_size,
        "gain": data["gain"],
        "unseen_gain": noise.unseen,
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def corpus_source(task: str, corpus: list[Path], seed: int, data: dict, burst_size: int,
                  augment: bool) -> Callable[[int], BurstSample]:
    """On-the-fly sample stream; flips are drawn per index and applied at the source."""
    gray = task == "denoise_gray"
    cache: dict = {}

    def get(index: int) -> BurstSample:
        if data.get("fixed_sample"):
            index = 0
        src = corpus[index % len(corpus)]
        if src not in cache:
            cache[src] = load_image(src, gray=gray)
        s = sample_seed(seed, index)
        flips = flip_choice(s) if augment else (False, False)
        return synthesize(task, cache[src], s, data, burst_size, flips)

    return get


def dataset_source(directory, seed: int, augment: bool) -> Callable[[int], BurstSample]:
    manifest = read_manifest(directory)
    samples = [read_sample(Path(directory) / e["path"]) for e in manifest["samples"]]

    def get(index: int) -> BurstSample:
        sample = samples[index % len(samples)]
        if augment and sample.task not in RAW_TASKS:
            sample = augment_flips(sample, sample_seed(seed, index))
        return sample

    return get
