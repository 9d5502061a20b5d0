"""L1 training with Adam and cosine annealing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .model import BIPNet, Checkpoint, model_checkpoint, save_checkpoint
from .sim import BurstSample, flip_image
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "loss")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 1
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def l1_loss(pred: Tensor, target) -> Tensor:
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return T.mean(T.absolute(T.sub(pred, target)))


def cosine_lr(t: float, total: float, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if total == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})

    def to_arrays(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, step: int) -> "AdamState":
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
        return cls(m, v, step)


def adam_step(params: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; parameters without grads are skipped.

    All gradients are validated before any parameter moves.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def flip_choice(seed: int) -> tuple[bool, bool]:
    h, v = np.random.default_rng(seed).random(2) < 0.5
    return bool(h), bool(v)


def augment_flips(sample: BurstSample, seed: int) -> BurstSample:
    """Flip burst and ground truth together, each axis with probability 0.5.

    Only for sRGB-domain samples. Flipping a packed RGGB burst would change
    its Bayer phase, so RAW samples take their flips at the source image
    (see ``make_sr_burst(flips=...)``).
    """
    if sample.burst.shape[1] == 4:
        raise ValueError("packed RAW bursts must be flipped at the source image, before mosaicking")
    hflip, vflip = flip_choice(seed)
    flips = [bool(a) ^ b for a, b in zip(sample.meta.get("flips", (False, False)), (hflip, vflip))]
    return replace(sample,
                   burst=flip_image(sample.burst, hflip, vflip),
                   ground_truth=flip_image(sample.ground_truth, hflip, vflip),
                   meta=dict(sample.meta, flips=flips))


def _fmt(x: float) -> str:
    return repr(float(x))


def _truncate_log(path: Path, step: int) -> None:
    # drop rows past the resume point so a rerun from an older checkpoint does not duplicate steps
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)


def train(model: BIPNet, data: Callable[[int], BurstSample], cfg: TrainConfig,
          out_path, log_path=None, resume: Optional[Checkpoint] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None) -> tuple[Checkpoint, list[float]]:
    """Train ``model`` on ``data(index)`` samples and write a checkpoint.

    Sample ``index`` for step ``t`` and batch slot ``j`` is ``t*batch + j``,
    so resumed runs see the same data as uninterrupted ones. Appends
    ``step,lr,loss`` rows to ``log_path``.
    """
    params = model.parameters()
    out_path = Path(out_path)
    if resume is not None:
        state = AdamState.from_arrays(resume.optimizer, resume.step)
        start = resume.step
    else:
        state = AdamState.zeros(params)
        start = 0
    if start > cfg.iterations:
        raise ValueError(f"checkpoint step {start} beyond configured iterations {cfg.iterations}")
    dtype = model.config.dtype

    def snapshot(step: int) -> Checkpoint:
        return model_checkpoint(model, state.to_arrays(), step, {"train": cfg.to_dict()})

    log_file = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = resume is None or not log_path.exists()
        if not fresh:
            _truncate_log(log_path, start)
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)

    losses: list[float] = []
    try:
        for step in range(start, cfg.iterations):
            lr = cosine_lr(step, cfg.iterations, cfg.lr_max, cfg.lr_min)
            model.zero_grad()
            try:
                with T.Tape() as tape:
                    total = None
                    for j in range(cfg.batch_size):
                        sample = data(step * cfg.batch_size + j)
                        pred = model(Tensor(sample.burst, dtype=dtype))
                        loss = l1_loss(pred, sample.ground_truth.astype(pred.dtype))
                        total = loss if total is None else T.add(total, loss)
                    if cfg.batch_size > 1:
                        total = T.scale(total, 1.0 / cfg.batch_size)
                tape.backward(total)
                adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except (T.NonFiniteError, TrainingDiverged) as exc:
                save_checkpoint(snapshot(step), out_path)
                raise TrainingDiverged(f"step {step + 1}: {exc}; last good checkpoint kept at {out_path}") from exc
            value = float(total.data)
            losses.append(value)
            if writer is not None:
                writer.writerow((step + 1, _fmt(lr), _fmt(value)))
            if on_step is not None:
                on_step(step + 1, lr, value)
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                periodic = out_path.with_name(f"{out_path.stem}_step{step + 1}{out_path.suffix}")
                save_checkpoint(snapshot(step + 1), periodic)
            log.debug("step %d lr %.3g loss %.5f", step + 1, lr, value)
    finally:
        if log_file is not None:
            log_file.close()

    final = snapshot(max(start, cfg.iterations))
    save_checkpoint(final, out_path)
    return final, losses
