"""Task-specific network assembly and the checkpoint file format."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .align import EBFA
from .fuse import MSFUNet, PseudoBurst
from .nn import Module
from .tensor import Tensor, _as_dtype
from .upsample import AGU

TASKS = {
    # task: (input channels, output channels, AGU level modes)
    "sr_x4": (4, 3, ("up", "up", "up")),
    "sr_x8": (4, 3, ("up", "up", "up", "up")),
    "lowlight": (4, 3, ("flat", "flat", "up")),
    "denoise_gray": (1, 1, ("flat", "flat", "flat")),
    "denoise_color": (3, 3, ("flat", "flat", "flat")),
}

MAGIC = b"BIPN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    task: str = "sr_x4"
    burst_size: int = 14
    features: int = 64
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if self.burst_size < 1:
            raise ValueError("burst_size must be >= 1")
        if self.features < 16 or self.features % 16:
            raise ValueError(f"features={self.features} must be a positive multiple of 16")
        _as_dtype(self.dtype)

    @property
    def input_channels(self) -> int:
        return TASKS[self.task][0]

    @property
    def output_channels(self) -> int:
        return TASKS[self.task][1]

    @property
    def agu_modes(self) -> tuple:
        return TASKS[self.task][2]

    @property
    def scale(self) -> int:
        return 2 ** sum(m == "up" for m in self.agu_modes)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class BIPNet(Module):
    """Alignment -> pseudo-burst fusion -> adaptive group upsampling."""

    def __init__(self, config: ModelConfig):
        self.config = config
        f, dt = config.features, config.dtype
        self.ebfa = EBFA(config.input_channels, f, dtype=dt)
        self.pseudo = PseudoBurst(config.burst_size, f, dtype=dt)
        self.unet = MSFUNet(f, dtype=dt)
        self.agu = AGU(f, config.output_channels, config.agu_modes, dtype=dt)

    def check_input(self, burst) -> None:
        cfg = self.config
        shape = tuple(burst.shape)
        if len(shape) != 4 or shape[0] != cfg.burst_size or shape[1] != cfg.input_channels:
            raise ValueError(
                f"burst shape {shape} does not match config "
                f"[{cfg.burst_size}, {cfg.input_channels}, H, W] for task {cfg.task}")
        if shape[2] % 4 or shape[3] % 4:
            raise ValueError(f"burst spatial size {shape[2]}x{shape[3]} must be divisible by 4")

    def forward(self, burst: Tensor, return_attention: bool = False):
        if not isinstance(burst, Tensor):
            burst = Tensor(np.asarray(burst, dtype=_as_dtype(self.config.dtype)))
        self.check_input(burst)
        e = self.ebfa(burst)
        s = self.unet(self.pseudo(e))
        return self.agu(s, return_attention=return_attention)

    def output_shape(self, h: int, w: int) -> tuple:
        sc = self.config.scale
        return (self.config.output_channels, h * sc, w * sc)


def build(config: ModelConfig) -> BIPNet:
    model = BIPNet(config)
    model.initialize(config.seed)
    return model


def forward(model: BIPNet, burst) -> Tensor:
    return model(burst)


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: dict
    params: dict                      # name -> ndarray
    optimizer: dict = field(default_factory=dict)   # name -> ndarray
    step: int = 0
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _dtype_tag(arr: np.ndarray) -> str:
    return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[arr.dtype]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``BIPN | u32 version | u64 header len | header JSON | payload``.

    The payload is every tensor (parameters, then optimizer state) as
    little-endian raw bytes in header order; the header carries its SHA-256.
    """
    entries, chunks = [], []
    offset = 0
    for section, table in (("param", ckpt.params), ("optim", ckpt.optimizer)):
        for name, arr in table.items():
            arr = np.ascontiguousarray(arr)
            tag = _dtype_tag(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"section": section, "name": name, "shape": list(arr.shape),
                            "dtype": tag, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = _canonical(header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a BIPN checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ChecksumError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: corrupt header") from exc
    payload = blob[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch (truncated or corrupt file)")
    params, optim = {}, {}
    for e in header["tensors"]:
        dt = np.dtype(T.DTYPES[e["dtype"]]).newbyteorder("<")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
        (params if e["section"] == "param" else optim)[e["name"]] = arr
    return Checkpoint(header["config"], params, optim, header["step"], header["meta"])


def model_checkpoint(model: BIPNet, optimizer: Optional[dict] = None, step: int = 0,
                     meta: Optional[dict] = None) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    return Checkpoint(model.config.to_dict(), params, dict(optimizer or {}), step, dict(meta or {}))


def save(model: BIPNet, path, **kwargs) -> None:
    save_checkpoint(model_checkpoint(model, **kwargs), path)


def model_from_checkpoint(ckpt: Checkpoint) -> BIPNet:
    model = BIPNet(ModelConfig.from_dict(ckpt.config))
    params = model.parameters()
    missing = set(params) - set(ckpt.params)
    extra = set(ckpt.params) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, p in params.items():
        arr = ckpt.params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
    return model


def load(path) -> BIPNet:
    return model_from_checkpoint(load_checkpoint(path))
