"""Command-line entry point: simulate, train, infer, eval, selftest."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metrics, selftest
from . import tensor as T
from .config import ConfigError, RunConfig, packed_size, parse_config
from .model import BIPNet, CheckpointError, build, load_checkpoint, model_from_checkpoint
from .train import TrainingDiverged, train

log = logging.getLogger("burstforge")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    n = os.environ.get("BURSTFORGE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    import cv2
    cv2.setNumThreads(int(n))
    return threadpool_limits(int(n))


def _run_config(args, overrides: dict) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                raw.setdefault(section, {})[key] = value
    return parse_config(raw)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _run_config(args, {
        "model": {"task": args.task, "burst_size": args.burst_size},
        "data": {"source_dir": args.source, "seed": args.seed, "gain": args.gain, "crop": args.crop},
    })
    if cfg.data.source_dir is None:
        raise ConfigError("no source corpus: pass --source or set data.source_dir")
    corpus = ds.list_corpus(cfg.data.source_dir)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out)
    log.info("resolved config:\n%s", cfg.dumps())
    manifest = ds.simulate_dataset(cfg.model.task, corpus, args.count, cfg.data.seed,
                                   vars(cfg.data), cfg.model.burst_size, out)
    (out / "config.json").write_text(cfg.dumps())
    print(f"wrote {manifest['count']} {manifest['task']} samples to {out}")
    return EXIT_OK


def _data_stream(cfg: RunConfig):
    task = cfg.model.task
    if cfg.data.dataset_dir:
        manifest = ds.read_manifest(cfg.data.dataset_dir)
        if manifest["task"] != task:
            raise ConfigError(f"dataset task {manifest['task']!r} conflicts with model.task {task!r}")
        if manifest["burst_size"] != cfg.model.burst_size:
            raise ConfigError(
                f"dataset burst_size {manifest['burst_size']} conflicts with model.burst_size {cfg.model.burst_size}")
        meta = ds.read_meta(Path(cfg.data.dataset_dir) / manifest["samples"][0]["path"])
        c, h, w = meta["frame_shape"]
        if c != cfg.model.input_channels:
            raise ConfigError(f"dataset frames have {c} channels, task {task} expects {cfg.model.input_channels}")
        side = packed_size(task, cfg.data)
        if (h, w) != (side, side):
            raise ConfigError(f"dataset frame size {h}x{w} conflicts with data.crop={cfg.data.crop} (input side {side})")
        return ds.dataset_source(cfg.data.dataset_dir, cfg.train.seed, cfg.train.augment)
    if cfg.data.source_dir:
        corpus = ds.list_corpus(cfg.data.source_dir)
        return ds.corpus_source(task, corpus, cfg.data.seed, vars(cfg.data), cfg.model.burst_size,
                                cfg.train.augment)
    raise ConfigError("no training data: set data.dataset_dir or data.source_dir")


def cmd_train(args) -> int:
    """Outputs sit next to the checkpoint: ``<stem>.csv`` and ``<stem>.config.json``."""
    cfg = _run_config(args, {"io": {"checkpoint": args.out}})
    if cfg.io.checkpoint is None:
        raise ConfigError("no checkpoint path: pass --out or set io.checkpoint")
    ckpt_path = Path(cfg.io.checkpoint)
    log_csv = Path(cfg.io.log_csv) if cfg.io.log_csv else ckpt_path.with_suffix(".csv")
    resolved = Path(cfg.io.resolved_config) if cfg.io.resolved_config else ckpt_path.with_suffix(".config.json")
    data = _data_stream(cfg)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.config != cfg.model.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        model = model_from_checkpoint(resume)
    else:
        model = build(cfg.model)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    resolved.write_text(cfg.dumps())
    log.info("resolved config:\n%s", cfg.dumps())
    log.info("model %s: %d parameters", cfg.model.task, model.num_parameters())
    final, losses = train(model, data, cfg.train, ckpt_path, log_csv, resume=resume)
    last = f"{losses[-1]:.5f}" if losses else "n/a"
    print(f"trained to step {final.step}; final loss {last}; checkpoint {ckpt_path}")
    return EXIT_OK


def _predict(model: BIPNet, burst: np.ndarray) -> np.ndarray:
    return model(burst).data


def _check_layout(model: BIPNet, meta: dict, where) -> None:
    cfg = model.config
    c = meta["frame_shape"][0]
    if c != cfg.input_channels or meta["burst_size"] != cfg.burst_size:
        raise ConfigError(
            f"{where}: burst is {meta['burst_size']} frames x {c} channels, checkpoint "
            f"({cfg.task}) expects {cfg.burst_size} x {cfg.input_channels}")
    h, w = meta["frame_shape"][1:]
    if h % 4 or w % 4:
        raise ConfigError(f"{where}: frame size {h}x{w} must be divisible by 4")


def cmd_infer(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    burst, meta = ds.read_burst(args.burst)
    _check_layout(model, meta, args.burst)
    out = _predict(model, burst)
    ds.write_png(args.out, ds.to_uint8(out))
    print(f"wrote {out.shape[1]}x{out.shape[2]} image to {args.out}")
    return EXIT_OK


def evaluate(predict, dataset_dir) -> dict:
    """Score ``predict(burst) -> image`` on every sample of a dataset."""
    manifest = ds.read_manifest(dataset_dir)
    rows = []
    for entry in manifest["samples"]:
        sample = ds.read_sample(Path(dataset_dir) / entry["path"])
        pred = predict(sample.burst)
        rows.append({"sample": entry["path"],
                     "psnr_db": metrics.psnr(pred, sample.ground_truth),
                     "ssim": metrics.ssim(pred, sample.ground_truth)})
    return metrics.report(rows)


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    manifest = ds.read_manifest(args.dataset)
    if manifest["task"] != model.config.task:
        raise ConfigError(f"dataset task {manifest['task']!r} does not match checkpoint task {model.config.task!r}")
    first = ds.read_meta(Path(args.dataset) / manifest["samples"][0]["path"])
    _check_layout(model, first, args.dataset)
    result = evaluate(lambda b: _predict(model, b), args.dataset)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run(fault=args.inject_fault)
    for check in results:
        print(check.line())
    failed = sum(not c.passed for c in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="burstforge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic burst dataset")
    s.add_argument("--config")
    s.add_argument("--task", choices=sorted(ds_tasks()))
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--source", help="directory of 8-bit PNG images")
    s.add_argument("--gain", type=int)
    s.add_argument("--burst-size", type=int)
    s.add_argument("--crop", type=int)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="checkpoint path (overrides io.checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="restore one burst")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--burst", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM over a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", help="run the invariant suite")
    st.add_argument("--inject-fault", choices=selftest.FAULTS, help=argparse.SUPPRESS)
    st.set_defaults(func=cmd_selftest)
    return p


def ds_tasks():
    from .model import TASKS
    return TASKS


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (TrainingDiverged, T.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ds.DatasetError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
