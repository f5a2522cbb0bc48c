"""Command-line entry point: data generation, training, detection, evaluation.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

from focaldet.boxes import GridShape
from focaldet.data import records, tensorfile
from focaldet.data.records import RecordError
from focaldet.data.synthetic import SCENE_SUFFIX, SceneConfig, load_dataset, write_dataset
from focaldet.data.tensorfile import TensorFileError
from focaldet.decode import DecodeConfig
from focaldet.encode import encode_targets
from focaldet.evaluation import SETTING_NAMES, Convention, EvalResult, evaluate, get_setting
from focaldet.pipeline import detect_dataset
from focaldet.tinynet.model import ModelParams
from focaldet.tinynet.train import TrainConfig, TrainingError, train

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Bad flags or unreadable/inconsistent input files."""


def _scene_config(args) -> SceneConfig:
    return SceneConfig(seed=args.seed, occluder_prob=args.occlusion)


def cmd_gen_data(args) -> int:
    if args.count < 0 or args.start < 0:
        raise InputError("--count and --start must be >= 0")
    try:
        anns = write_dataset(args.out, _scene_config(args), args.count, args.start)
    except OSError as exc:
        raise InputError(f"cannot write to {args.out}: {exc}") from exc
    print(f"scenes={args.count} annotations={len(anns)} out={args.out}")
    return 0


def cmd_encode(args) -> int:
    """Write the training target maps of every scene into one tensor file."""
    ds = load_dataset(args.data)
    arrays = {}
    for image_id in ds.image_ids:
        h, w = ds.images[image_id].shape
        tgt = encode_targets(ds.annotations[image_id], GridShape(h, w, 4))
        for key, arr in tgt.arrays().items():
            arrays[f"{image_id}.{key}"] = arr
    tensorfile.write(args.out, arrays)
    print(f"scenes={len(ds)} arrays={len(arrays)} out={args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if len(ds) == 0:
        raise InputError(f"{args.data}: no scenes")
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        warmup_iters=args.warmup,
        seed=args.seed,
        optimizer=args.optimizer,
        suppress=not args.no_suppress,
    )
    init = tensorfile.load_checkpoint(args.init) if args.init else None
    ckpt = train(ds, cfg, init=init, log=lambda line: print(line, flush=True))
    tensorfile.save_checkpoint(args.out, ckpt)
    return 0


def _load_params(path: str, use_ema: bool) -> ModelParams:
    ckpt = tensorfile.load_checkpoint(path)
    return ModelParams.from_arrays(ckpt.ema if use_ema else ckpt.params)


def cmd_detect(args) -> int:
    ds = load_dataset(args.data)
    params = _load_params(args.ckpt, not args.raw)
    try:
        dets = detect_dataset(ds.images, ds.image_ids, params, DecodeConfig(), not args.no_suppress)
    except (KeyError, ValueError) as exc:
        raise InputError(f"checkpoint {args.ckpt} does not fit data {args.data}: {exc}") from exc
    records.write_detections(args.out, dets)
    print(f"images={len(ds)} detections={len(dets)} out={args.out}")
    return 0


def _image_ids(data_dir: Optional[str]) -> Optional[list[str]]:
    if data_dir is None:
        return None
    return sorted(p.name[: -len(SCENE_SUFFIX)] for p in Path(data_dir).glob(f"*{SCENE_SUFFIX}"))


def _evaluate(args) -> EvalResult:
    try:
        setting = get_setting(args.setting, Convention(args.convention))
    except KeyError as exc:
        raise InputError(exc.args[0]) from exc
    dets = records.read_detections(args.dets)
    anns = records.read_annotations(args.annos)
    return evaluate(dets, anns, setting, _image_ids(args.data))


def _write_curve(path: str, result: EvalResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fppi", "miss_rate"])
        for threshold, fppi, miss in result.curve:
            writer.writerow([repr(float(threshold)), repr(float(fppi)), repr(float(miss))])


def cmd_eval(args) -> int:
    result = _evaluate(args)
    print(f"mr2={result.mr2!r}")
    print(
        f"setting={args.setting} convention={args.convention} images={result.n_images} "
        f"gt={result.n_gt} matched={result.matched} missed={result.missed} "
        f"false_positives={result.false_positives}"
    )
    if args.curve:
        _write_curve(args.curve, result)
    return 0


def cmd_curve(args) -> int:
    result = _evaluate(args)
    _write_curve(args.out, result)
    print(f"points={len(result.curve)} out={args.out}")
    return 0


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dets", required=True, help="detections JSON")
    p.add_argument("--annos", required=True, help="annotations JSON")
    p.add_argument("--setting", required=True, help=f"one of {', '.join(SETTING_NAMES)}")
    p.add_argument("--convention", choices=[c.value for c in Convention], default="cp")
    p.add_argument("--data", help="scene directory defining the image set (default: ids in the files)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focaldet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes and annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--occlusion", type=float, default=0.3, help="per-pedestrian occluder probability")
    p.add_argument("--start", type=int, default=0, help="first scene index (disjoint splits, same seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("encode", help="write target maps for every scene")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a detector checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init", help="checkpoint to continue from (fine-tuning)")
    p.add_argument("--no-suppress", action="store_true", help="skip the suppression head")
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--warmup", type=int, default=TrainConfig.warmup_iters)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=TrainConfig.optimizer)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    weights = p.add_mutually_exclusive_group()
    weights.add_argument("--ema", action="store_true", help="use averaged weights (default)")
    weights.add_argument("--raw", action="store_true", help="use raw weights")
    p.add_argument("--no-suppress", action="store_true", help="score = p_detect")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="MR^-2 of detections under an evaluation setting")
    _add_eval_flags(p)
    p.add_argument("--curve", help="also write the FPPI curve CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="write the FPPI / miss-rate curve as CSV")
    _add_eval_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, RecordError, TensorFileError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
