"""``wpsseg`` command line: gen-data, train, eval, ablate, selfcheck.

Exit codes: 0 success, 2 config/validation error, 3 I/O or file-format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time

import numpy as np

from .ablation import ablate
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config, to_flat
from .datagen import DatagenError, ShardFormatError, generate_split, read_shard, shard_paths, write_shard
from .evaluate import EmptyMetricError, evaluate_scenes, metrics_dict
from .losses import NonFiniteError
from .selfcheck import run_selfcheck
from .trainer import ConfigError, TrainingAborted, metrics_csv, train

log = logging.getLogger("wpsseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = {"train": 0, "val": 1, "test": 2}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _thread_limit():
    """Honour ``WPS_THREADS`` (0 means a single deterministic worker)."""
    raw = os.environ.get("WPS_THREADS")
    if raw is None:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"WPS_THREADS must be an integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 0:
        raise CliError(f"WPS_THREADS must be >= 0, got {n}", EXIT_CONFIG)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _read_scenes(path):
    if not os.path.exists(path):
        raise CliError(f"shard not found: {path}", EXIT_IO)
    return read_shard(path)


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise CliError(f"config not found: {path}", EXIT_IO)
    return load_config(path)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    if any(n < 1 for n in counts.values()):
        raise CliError("split sizes must be >= 1", EXIT_CONFIG)
    if not 2 <= args.classes <= 32:
        raise CliError(f"--classes must be in [2, 32], got {args.classes}", EXIT_CONFIG)
    if args.size < 16 or args.size % 2:
        raise CliError(f"--size must be an even number >= 16, got {args.size}", EXIT_CONFIG)
    os.makedirs(args.out, exist_ok=True)
    for name, path in shard_paths(args.out).items():
        scenes = generate_split(counts[name], args.seed, SPLITS[name], args.size, args.classes)
        write_shard(scenes, path, args.classes)
        log.info("wrote %d scenes to %s", counts[name], path)
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    if args.mode is not None:
        run.train.mode = args.mode
    if args.out is not None:
        run.out_dir = args.out
    run.train.validate()
    record = to_flat(run)
    log.info("resolved config:\n%s", dump_config(run))
    train_scenes, num_classes = _read_scenes(run.train_data)
    val_scenes = None
    if run.val_data:
        val_scenes, val_classes = _read_scenes(run.val_data)
        if val_classes != num_classes:
            raise CliError(f"{run.val_data} has {val_classes} classes, train shard has {num_classes}", EXIT_CONFIG)
    resume = None
    if args.resume is not None:
        if not os.path.exists(args.resume):
            raise CliError(f"checkpoint not found: {args.resume}", EXIT_IO)
        resume = load_checkpoint(args.resume)
    result = train(run.train, train_scenes, num_classes, val_scenes, resume=resume,
                   max_steps=args.max_steps, config_record=record)
    os.makedirs(run.out_dir, exist_ok=True)
    ckpt_path = os.path.join(run.out_dir, "checkpoint.wpsckpt")
    csv_path = os.path.join(run.out_dir, "metrics.csv")
    save_checkpoint(result.checkpoint, ckpt_path)
    text = metrics_csv(result.rows, record)
    if resume is not None and os.path.exists(csv_path):
        # append rows only; header and config line are already there
        text = "".join(text.splitlines(keepends=True)[2:])
        with open(csv_path, "a") as fh:
            fh.write(text)
    else:
        _write(csv_path, text)
    _write(os.path.join(run.out_dir, "config.json"), dump_config(run) + "\n")
    log.info("step %d: checkpoint %s, metrics %s", result.checkpoint.step, ckpt_path, csv_path)
    return EXIT_OK


def _metrics_csv_text(m: dict) -> str:
    rows = [["class", "iou", "dice"]]
    for k, pc in enumerate(m["per_class"]):
        rows.append([k, "", ""] if pc is None else [k, repr(pc["iou"]), repr(pc["dice"])])
    rows.append(["mean", repr(m["miou"]), repr(m["mdice"])])
    return "".join(",".join(map(str, r)) + "\n" for r in rows)


def cmd_eval(args) -> int:
    run = _load_run_config(args.config)
    if not os.path.exists(args.ckpt):
        raise CliError(f"checkpoint not found: {args.ckpt}", EXIT_IO)
    ckpt = load_checkpoint(args.ckpt)
    scenes, num_classes = _read_scenes(args.data)
    params = ckpt.student if args.use_student else ckpt.teacher
    if params.num_classes != num_classes:
        raise CliError(f"checkpoint predicts {params.num_classes} classes, shard has {num_classes}", EXIT_CONFIG)
    tta = run.tta if args.tta == "on" else None
    cm, masks = evaluate_scenes(params, scenes, num_classes, tta=tta, degraded=args.images == "degraded",
                                return_masks=True)
    m = metrics_dict(cm)
    m.update(network="student" if args.use_student else "teacher", tta=args.tta, images=args.images,
             count=len(scenes))
    text = json.dumps(m, indent=2)
    if args.json:
        _write(args.json, text + "\n")
    else:
        print(text)
    if args.csv:
        _write(args.csv, _metrics_csv_text(m))
    if args.masks:
        np.save(args.masks, masks.astype(np.uint8))
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _load_run_config(args.config)
    if args.out is not None:
        run.out_dir = args.out
    log.info("resolved config:\n%s", dump_config(run))
    train_scenes, num_classes = _read_scenes(run.train_data)
    test_scenes, _ = _read_scenes(run.test_data)
    val_scenes = _read_scenes(run.val_data)[0] if run.val_data else None
    os.makedirs(run.out_dir, exist_ok=True)
    record = to_flat(run)

    def keep_log(mode, result):
        _write(os.path.join(run.out_dir, f"{mode}.metrics.csv"),
               metrics_csv(result.rows, dict(record, mode=mode)))

    t0 = time.perf_counter()
    table = ablate(run.train, train_scenes, test_scenes, num_classes, run.tta, val_scenes,
                   ckpt_dir=run.out_dir, use_student=args.use_student, on_train=keep_log)
    _write(os.path.join(run.out_dir, "ablation.csv"), table.to_csv())
    _write(os.path.join(run.out_dir, "ablation.txt"), table.to_text())
    print(table.to_text(), end="")
    log.info("ablation finished in %.1fs", time.perf_counter() - t0)
    failed = [r for r in table.rows if not r.ok]
    if failed:
        for r in failed:
            log.error("row %s failed: %s", r.setting, r.error)
        return max(_exit_code(r.exception) for r in failed)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_selfcheck(corrupt_gradient=args.corrupt_gradient)
    for r in results:
        print(r.line())
    ok = all(r.ok for r in results)
    print(f"selfcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else 1


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wpsseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/val/test shards")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=512)
    g.add_argument("--val", type=int, default=128)
    g.add_argument("--test", type=int, default=128)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--seed", type=int, default=42)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a student/teacher pair")
    t.add_argument("--config")
    t.add_argument("--mode", choices=["clean_only", "semi"])
    t.add_argument("--resume")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (schedule unchanged)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a shard")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--tta", choices=["on", "off"], default="off")
    e.add_argument("--use-student", action="store_true")
    e.add_argument("--config", help="source of the TTA policy")
    e.add_argument("--images", choices=["degraded", "clean"], default="degraded")
    e.add_argument("--json", help="write metrics JSON here instead of stdout")
    e.add_argument("--csv", help="also write per-class CSV")
    e.add_argument("--masks", help="dump predicted masks (uint8 .npy)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="clean-only vs semi vs semi+TTA table")
    a.add_argument("--config")
    a.add_argument("--out", help="output directory (overrides out_dir)")
    a.add_argument("--use-student", action="store_true")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selfcheck", help="fast invariant checks")
    s.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ConfigError, DatagenError)):
        return EXIT_CONFIG
    if isinstance(exc, (ShardFormatError, CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(exc, (NonFiniteError, TrainingAborted, EmptyMetricError)):
        return EXIT_NUMERIC
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (CliError, ConfigError, DatagenError, ShardFormatError, CheckpointError, OSError,
            NonFiniteError, TrainingAborted, EmptyMetricError) as exc:
        log.error("%s", exc)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
