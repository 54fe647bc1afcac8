#!/usr/bin/env python3

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .activations import Activation, dump_activation_samples, write_activation_csv
from .analysis import analyze_necks, pca_cluster_distance, write_projection_csv
from .cf_demo import overfit_demo
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_neck_config
from .dataset_io import list_image_files, parse_coco, parse_yolo, scan_images, write_coco
from .errors import ConfigError, SnowfuseError
from .grading import GradingPolicy, grade_dataset, scr_for_bbox, split_dataset, write_grading_report
from .image_io import load_image, save_image
from .scr_net import (
    LossSpec,
    build_scr_model,
    export_channel_maps,
    infer_snow_map,
    select_snow_channel,
    train_scr,
)
from .tensor_io import load_tensor
from .utils import emit_result, format_duration, read_json, resolve_jobs, setup_logging, write_csv, write_json
from .validators import RunConfigValidator


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logger = setup_logging()
    logger.info("Starting snowfuse", command=args.command)

    try:
        config = build_run_config(args)
        validation_result = RunConfigValidator().validate(config)

        for warning in validation_result.warnings:
            logger.warning(warning)

        if not validation_result.is_valid:
            logger.error(f"Invalid arguments: {validation_result.errors}")
            return 1

        return COMMANDS[args.command](args)

    except SnowfuseError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed with an unexpected error: {e}", exc_info=True)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snowfuse",
        description="Snow coverage estimation, difficulty grading and Cross Fusion neck analysis",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    train = commands.add_parser("train-scr", help="train the snow-response network on heavy-snow images")
    train.add_argument("--images-dir", type=Path, required=True, help="directory of heavy-snow PPM/PGM/PNG images")
    train.add_argument("--out", type=Path, required=True, help="checkpoint directory to write")
    train.add_argument("--epochs", type=int, default=200, help="training epochs (default: 200)")
    train.add_argument("--lr", type=float, default=0.01, help="learning rate (default: 0.01)")
    train.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (default: 0)")
    train.add_argument("--alpha", type=float, default=1.0, help="data term weight (default: 1.0)")
    train.add_argument("--beta", type=float, default=1e-4, help="L1 penalty weight (default: 1e-4)")
    train.add_argument("--batch-mode", choices=["full", "per-image"], default="full",
                       help="one update per epoch or one per image (default: full)")
    train.add_argument("--hidden-activation", default="leaky-relu:0.1",
                       help="activation of hidden layers (default: leaky-relu:0.1)")
    train.add_argument("--final-activation", default="peak-act",
                       help="activation of the last layer (default: peak-act)")
    train.add_argument("--bias", action="store_true", help="give every conv layer a bias (default: bias-free)")
    train.add_argument("--clean-dir", type=Path, default=None,
                       help="snow-free calibration images; when given the snow channel is selected after training")
    train.add_argument("--loss-csv", type=Path, default=None, help="loss log path (default: <out>/loss.csv)")
    _add_seed(train)

    infer = commands.add_parser("infer-scr", help="compute snow maps (and per-box SCRs) for one image")
    infer.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    infer.add_argument("--image", type=Path, required=True, help="input image")
    infer.add_argument("--out-dir", type=Path, required=True, help="directory for maps and scrs.json")
    infer.add_argument("--channel", type=int, default=None, help="override the checkpoint's snow channel")
    infer.add_argument("--threshold", type=float, default=None, help="override the binarization threshold")
    infer.add_argument("--annotations", type=Path, default=None,
                       help="COCO file; boxes of the image with the same file name get an SCR")
    infer.add_argument("--all-channels", action="store_true", help="also export every testing-head channel")

    grade = commands.add_parser("grade", help="grade a dataset into four difficulty levels")
    grade.add_argument("--coco", type=Path, default=None, help="COCO annotation file")
    grade.add_argument("--yolo-labels", type=Path, default=None, help="YOLO label directory (alternative to --coco)")
    grade.add_argument("--images-dir", type=Path, required=True, help="directory holding the dataset images")
    grade.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    grade.add_argument("--out", type=Path, required=True, help="grading report JSON to write")
    grade.add_argument("--thresholds", type=float, nargs=3, default=[0.25, 0.5, 0.75], metavar=("T1", "T2", "T3"),
                       help="level thresholds (default: 0.25 0.5 0.75)")
    grade.add_argument("--aggregate", choices=["max", "mean"], default="max",
                       help="per-image SCR aggregate (default: max)")
    grade.add_argument("--channel", type=int, default=None, help="override the checkpoint's snow channel")
    _add_jobs(grade)

    analyze = commands.add_parser("cf-analyze", help="path lengths and parameter counts of CF vs FPN+PANet")
    analyze.add_argument("--config", type=Path, default=None, help="YAML neck configuration (default: 3 stages, n=1)")
    analyze.add_argument("--out", type=Path, default=None, help="write the analysis JSON here instead of stdout")
    _add_seed(analyze)

    demo = commands.add_parser("cf-demo", help="overfit a toy backbone + CF neck on synthetic targets")
    demo.add_argument("--config", type=Path, default=None, help="YAML neck configuration (default: 3 stages, n=2)")
    demo.add_argument("--steps", type=int, default=500, help="optimization steps (default: 500)")
    demo.add_argument("--lr", type=float, default=0.01, help="learning rate (default: 0.01)")
    demo.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    demo.add_argument("--out", type=Path, default=None, help="loss log CSV")
    _add_seed(demo)

    dump = commands.add_parser("act-dump", help="sample an activation and its derivative to CSV")
    dump.add_argument("--kind", default="peak-act", help="peak-act, sigmoid, relu or leaky-relu[:slope]")
    dump.add_argument("--x-min", type=float, default=-1.0, help="first sample (default: -1)")
    dump.add_argument("--x-max", type=float, default=3.0, help="last sample (default: 3)")
    dump.add_argument("--samples", type=int, default=401, help="number of samples (default: 401)")
    dump.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")

    pca = commands.add_parser("pca", help="PCA cluster distances of object vs background features")
    pca.add_argument("--features", type=Path, required=True, help="C x H x W features (.snft tensor or .json)")
    pca.add_argument("--mask", type=Path, required=True, help="object mask (.pgm/.ppm/.png image or .json)")
    pca.add_argument("--out", type=Path, default=None, help="distances JSON")
    pca.add_argument("--projection-csv", type=Path, default=None, help="projected points CSV")

    split = commands.add_parser("split", help="randomly split a COCO dataset into train/val/test")
    split.add_argument("--coco", type=Path, required=True, help="COCO annotation file")
    split.add_argument("--out-dir", type=Path, required=True, help="directory for train.json, val.json, test.json")
    split.add_argument("--fractions", type=float, nargs=3, default=[1701, 189, 210], metavar=("TRAIN", "VAL", "TEST"),
                       help="relative split weights (default: 1701 189 210)")
    _add_seed(split)

    return parser


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")


def _add_jobs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads (default: $SNOWFUSE_JOBS or the number of cores)")


# argparse attribute -> role in the run configuration
INPUT_PATHS = ("images_dir", "clean_dir", "checkpoint", "image", "annotations", "coco", "yolo_labels", "config",
               "features", "mask")
OUTPUT_PATHS = ("out", "out_dir", "loss_csv", "projection_csv")
OPTIONS = ("epochs", "steps", "lr", "jobs", "threshold", "samples", "channel", "thresholds")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values = vars(args)
    options = {name: values[name] for name in OPTIONS if name in values}
    if "x_min" in values:
        options["x_range"] = (values["x_min"], values["x_max"])
    config = RunConfig(
        subcommand=args.command,
        seed=values.get("seed", 0),
        input_paths={name: values[name] for name in INPUT_PATHS if values.get(name) is not None},
        output_paths={name: values[name] for name in OUTPUT_PATHS if values.get(name) is not None},
        options=options,
    )
    config.options["seed"] = config.seed
    if args.command == "train-scr":
        config.output_paths["checkpoint"] = config.output_paths.pop("out")
    return config


def cmd_train_scr(args: argparse.Namespace) -> int:
    files = list_image_files(args.images_dir)
    if not files:
        raise ConfigError(f"no PPM/PGM/PNG images found in '{args.images_dir}'")
    images = [load_image(path) for path in files]

    model = build_scr_model(
        args.seed,
        hidden_activation=Activation.parse(args.hidden_activation),
        final_activation=Activation.parse(args.final_activation),
        bias=args.bias,
    )
    log = train_scr(model, images, spec=LossSpec(args.alpha, args.beta), lr=args.lr, epochs=args.epochs,
                    seed=args.seed, batch_mode=args.batch_mode, momentum=args.momentum)

    if args.clean_dir is not None:
        clean = [load_image(path) for path in list_image_files(args.clean_dir)]
        if not clean:
            raise ConfigError(f"no PPM/PGM/PNG images found in '{args.clean_dir}'")
        selection = select_snow_channel(model, images, clean)
        emit_result("selected_channel", selection.channel)

    save_checkpoint(model, args.out)
    write_csv(args.loss_csv or args.out / "loss.csv", ["epoch", "loss"], log.rows())
    emit_result("initial_loss", log.initial_loss)
    emit_result("final_loss", log.final_loss)
    return 0


def cmd_infer_scr(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.threshold is not None:
        model.binarize_threshold = args.threshold
    image = load_image(args.image)
    snow = infer_snow_map(model, image, channel=args.channel)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_image(np.clip(snow.float_map, 0.0, 1.0), args.out_dir / "float_map.pgm")
    save_image(snow.binary_map.astype(np.float64), args.out_dir / "binary_map.pgm")
    if args.all_channels:
        export_channel_maps(model, image, args.out_dir / "channels")

    scrs: List[Dict[str, Any]] = []
    if args.annotations is not None:
        dataset = parse_coco(args.annotations)
        matches = [record for record in dataset.images if record.file_name == args.image.name]
        if not matches:
            raise ConfigError(f"'{args.annotations}' has no image named '{args.image.name}'")
        for annotation in dataset.annotations_by_image().get(matches[0].id, []):
            scrs.append({
                "annotation_id": annotation.id,
                "category_id": annotation.bbox.category_id,
                "scr": scr_for_bbox(snow.binary_map, annotation.bbox),
            })

    write_json({"image": args.image.name, "channel": snow.channel, "scrs": scrs}, args.out_dir / "scrs.json")
    emit_result("channel", snow.channel)
    emit_result("snow_fraction", float(snow.binary_map.mean()))
    emit_result("objects", len(scrs))
    return 0


def cmd_grade(args: argparse.Namespace) -> int:
    if (args.coco is None) == (args.yolo_labels is None):
        raise ConfigError("exactly one of --coco or --yolo-labels is required")
    if args.coco is not None:
        dataset = parse_coco(args.coco)
    else:
        dataset = parse_yolo(args.yolo_labels, scan_images(args.images_dir))

    model = load_checkpoint(args.checkpoint)
    if args.channel is not None:
        model.select_channel(args.channel)
    policy = GradingPolicy(tuple(args.thresholds), args.aggregate)
    report = grade_dataset(dataset, model, policy, images_dir=args.images_dir, jobs=resolve_jobs(args.jobs))
    write_grading_report(report, args.out)

    for level, count in report.histogram.items():
        emit_result(level, count)
    emit_result("skipped", len(report.skipped))
    if dataset.images and not report.per_image:
        return 1
    return 0


def cmd_cf_analyze(args: argparse.Namespace) -> int:
    report = analyze_necks(load_neck_config(args.config), seed=args.seed)
    if args.out is not None:
        write_json(report, args.out)
        emit_result("cf_max_path", report["path_length"]["cf_max"])
        emit_result("fpn_panet_max_path", report["path_length"]["fpn_panet_max"])
        emit_result("goctconv_k3_k1_ratio", report["parameters"]["goctconv_k3_k1_ratio"])
    else:
        print(json.dumps(report, indent=2))
    return 0


def cmd_cf_demo(args: argparse.Namespace) -> int:
    config = load_neck_config(args.config) if args.config is not None else None
    started = time.monotonic()
    log = overfit_demo(config, seed=args.seed, steps=args.steps, lr=args.lr, momentum=args.momentum)
    if args.out is not None:
        write_csv(args.out, ["step", "loss"], list(enumerate(log.losses)))
    emit_result("final_loss", log.final_loss)
    emit_result("duration", format_duration(int(time.monotonic() - started)))
    return 0


def cmd_act_dump(args: argparse.Namespace) -> int:
    rows = dump_activation_samples(args.kind, args.x_min, args.x_max, args.samples)
    if args.out is not None:
        write_activation_csv(rows, args.out)
    else:
        print("x,f,grad")
        for x, f, grad in rows:
            print(f"{x!r},{f!r},{grad!r}")
    return 0


def _load_features(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".json":
        return np.asarray(read_json(path)["features"], dtype=np.float64)
    return load_tensor(path).data


def _load_mask(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".json":
        return np.asarray(read_json(path)["mask"]).astype(bool)
    return load_image(path).data[0] >= 0.5


def cmd_pca(args: argparse.Namespace) -> int:
    result = pca_cluster_distance(_load_features(args.features), _load_mask(args.mask))
    distances = {"object_avg_dist": result.object_avg_dist, "background_avg_dist": result.background_avg_dist}
    if args.out is not None:
        write_json(distances, args.out)
    if args.projection_csv is not None:
        write_projection_csv(result, args.projection_csv)
    for name, value in distances.items():
        emit_result(name, value)
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    subsets = split_dataset(parse_coco(args.coco), args.fractions, seed=args.seed)
    for name, subset in subsets.items():
        write_coco(subset, args.out_dir / f"{name}.json")
        emit_result(name, len(subset.images))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train-scr": cmd_train_scr,
    "infer-scr": cmd_infer_scr,
    "grade": cmd_grade,
    "cf-analyze": cmd_cf_analyze,
    "cf-demo": cmd_cf_demo,
    "act-dump": cmd_act_dump,
    "pca": cmd_pca,
    "split": cmd_split,
}


if __name__ == '__main__':
    sys.exit(main())
