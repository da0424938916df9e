"""Command line interface.

Subcommands: ``synth`` (generate stand-in data), ``train``, ``eval``,
``bench`` and ``predict``.  Exit codes are part of the contract:

    0  success
    2  usage error
    3  configuration error
    4  data error
    5  runtime / numerical error

Failures print exactly one machine-parsable line to stderr:
``error kind=<usage|config|data|runtime> msg=<text>``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import bench as B
from . import data as D
from . import train as T
from .errors import ConfigError, DataError, NumericalError, UsageError


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors map to exit code 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="surgseg", description="Two-branch surgical instrument segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic stand-in dataset")
    synth.add_argument("--n", type=int, required=True, help="number of samples")
    synth.add_argument("--out", type=Path, required=True, help="output dataset directory")
    synth.add_argument("--task", choices=sorted(D.TASK_NUM_CLASSES), default="binary")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--height", type=int, default=256)
    synth.add_argument("--width", type=int, default=320)
    synth.add_argument("--sequences", default="1", help="comma-separated sequence numbers")

    train = sub.add_parser("train", help="train on a manifest")
    train.add_argument("--config", type=Path, default=None, help="key = value config file")
    train.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    train.add_argument("--data-root", type=Path, required=True, help="directory holding manifest.txt")
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--task", choices=sorted(D.TASK_NUM_CLASSES), default=None,
                       help="re-encode labels for this task (default: manifest task)")
    train.add_argument("--seed", type=int, default=None, help="override the config seed")
    train.add_argument("--checkpoint", type=Path, default=None, help="resume from this checkpoint")
    train.add_argument("--deterministic", action="store_true")
    train.add_argument("--quiet", action="store_true", help="do not echo per-iteration lines")

    evalp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    evalp.add_argument("--checkpoint", type=Path, required=True)
    evalp.add_argument("--data-root", type=Path, required=True)
    evalp.add_argument("--out", type=Path, required=True)
    evalp.add_argument("--split", choices=("train", "test", "all"), default="test")
    evalp.add_argument("--branch", choices=("main", "auxiliary"), default="main")
    evalp.add_argument("--task", choices=sorted(D.TASK_NUM_CLASSES), default=None)
    evalp.add_argument("--fps", action="store_true", help="also run the inference benchmark")
    evalp.add_argument("--warmup", type=int, default=10)
    evalp.add_argument("--iters", type=int, default=50)

    benchp = sub.add_parser("bench", help="benchmark inference latency/throughput")
    benchp.add_argument("--checkpoint", type=Path, default=None,
                        help="benchmark this checkpoint (default: freshly initialized net)")
    benchp.add_argument("--task", choices=sorted(D.TASK_NUM_CLASSES), default="binary")
    benchp.add_argument("--branch", choices=("main", "auxiliary"), default="main")
    benchp.add_argument("--height", type=int, default=1024)
    benchp.add_argument("--width", type=int, default=1280)
    benchp.add_argument("--warmup", type=int, default=10)
    benchp.add_argument("--iters", type=int, default=50)
    benchp.add_argument("--seed", type=int, default=0)
    benchp.add_argument("--out", type=Path, default=None, help="also write the report here")

    predict = sub.add_parser("predict", help="write label maps and overlays for a manifest")
    predict.add_argument("--checkpoint", type=Path, required=True)
    predict.add_argument("--data-root", type=Path, required=True)
    predict.add_argument("--out", type=Path, required=True)
    predict.add_argument("--split", choices=("train", "test", "all"), default="all")
    predict.add_argument("--branch", choices=("main", "auxiliary"), default="main")
    return parser


def _load_manifest(data_root: Path, split: str, task: str | None) -> D.DatasetManifest:
    manifest_path = data_root / "manifest.txt"
    manifest = D.load_manifest(manifest_path) if manifest_path.is_file() else D.scan_dataset(data_root)
    if task is not None:
        manifest = D.DatasetManifest(manifest.samples, D.TaskSpec.from_kind(task), manifest.split)
    if split == "all":
        return manifest
    train, test = D.split_train_test(manifest)
    chosen = train if split == "train" else test
    if len(chosen) == 0:
        raise DataError(f"split {split!r} of {data_root} is empty")
    return chosen


def _cmd_synth(args: argparse.Namespace) -> int:
    try:
        sequences = tuple(int(s) for s in str(args.sequences).split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"bad --sequences value {args.sequences!r}: {exc}") from exc
    manifest = D.generate_synthetic(
        args.out,
        n=args.n,
        task=args.task,
        seed=args.seed,
        frame_size=(args.height, args.width),
        sequences=sequences,
    )
    D.save_manifest(manifest, args.out / "manifest.txt")
    train, _ = D.split_train_test(manifest)
    if len(train):
        D.save_channel_means(args.out / "means.txt", D.compute_channel_means(train))
    print(f"wrote {len(manifest)} samples under {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = T.load_train_config(args.config, args.overrides)
    if args.seed is not None:
        config.seed = args.seed
    if args.deterministic:
        config.deterministic = True
    manifest = _load_manifest(args.data_root, "all", args.task)
    train_split, test_split = D.split_train_test(manifest)
    if len(train_split) == 0:
        raise DataError(f"no training samples under {args.data_root}")
    on_log = None if args.quiet else print
    final = T.fit(
        config,
        train_split,
        args.out,
        eval_manifest=test_split if len(test_split) else None,
        resume=args.checkpoint,
        on_log=on_log,
    )
    print(f"final checkpoint: {final}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    segmentor, ck_task, means = T.segmentor_from_checkpoint(args.checkpoint)
    task_kind = args.task or ck_task.kind
    if task_kind != ck_task.kind:
        raise DataError(f"checkpoint was trained for task {ck_task.kind!r}, not {task_kind!r}")
    if means is None:
        raise DataError(f"checkpoint {args.checkpoint} carries no normalization constants")
    manifest = _load_manifest(args.data_root, args.split, task_kind)
    report = T.evaluate_model(segmentor, manifest, manifest.task, means, branch=args.branch)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = f"metrics_{args.branch}_{manifest.task.kind}_{args.split}"
    text = report.to_text()
    if args.fps:
        frame = D.load_frame(manifest.samples[0].frame_path)
        h, w = D.crop_canvas(frame).shape[:2] if frame.shape[:2] == (D.RAW_HEIGHT, D.RAW_WIDTH) else frame.shape[:2]
        bench_report = B.time_inference(
            T.inference_wrapper(segmentor, args.branch), (3, h, w), args.warmup, args.iters
        )
        text += "\n" + bench_report.to_text()
    (args.out / f"{stem}.txt").write_text(text + "\n")
    (args.out / f"{stem}.json").write_text(report.to_json() + "\n")
    print(text)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    if args.checkpoint is not None:
        segmentor, _, _ = T.segmentor_from_checkpoint(args.checkpoint)
    else:
        from .network import NetworkConfig, build_segmentor

        torch.manual_seed(args.seed)
        segmentor = build_segmentor(NetworkConfig(num_classes=D.TASK_NUM_CLASSES[args.task]))
        segmentor.eval()
    report = B.time_inference(
        T.inference_wrapper(segmentor, args.branch), (3, args.height, args.width), args.warmup, args.iters
    )
    print(report.to_text())
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.to_text() + "\n")
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    segmentor, task, means = T.segmentor_from_checkpoint(args.checkpoint)
    if means is None:
        raise DataError(f"checkpoint {args.checkpoint} carries no normalization constants")
    manifest = _load_manifest(args.data_root, args.split, task.kind)
    pred_dir = args.out / "pred"
    overlay_dir = args.out / "overlay"
    pred_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir.mkdir(parents=True, exist_ok=True)
    for sample in manifest.samples:
        frame = D.load_frame(sample.frame_path)
        if frame.shape[:2] == (D.RAW_HEIGHT, D.RAW_WIDTH):
            frame = D.crop_canvas(frame)
        x = torch.from_numpy(D.normalize(frame, means).transpose(2, 0, 1).copy()).unsqueeze(0)
        pred = segmentor.predict(x, branch=args.branch).argmax(dim=1)[0].numpy().astype(np.uint8)
        name = f"seq{sample.sequence}_{Path(sample.frame_path).stem}.png"
        D.save_prediction(pred, pred_dir / name)
        Image.fromarray(D.overlay_prediction(frame, pred)).save(overlay_dir / name)
    print(f"wrote {len(manifest)} predictions under {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "predict": _cmd_predict,
}


def run(argv: list[str] | None = None) -> int:
    """Parse and execute; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error kind=usage msg={exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error kind=config msg={exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error kind=data msg={exc}", file=sys.stderr)
        return 4
    except (NumericalError, RuntimeError, ValueError, OSError) as exc:
        print(f"error kind=runtime msg={exc}", file=sys.stderr)
        return 5


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
