"""Command-line entry point.

Subcommands::

    generate-data --n N --seed S --out DIR
    train         --dataset DIR --out DIR [--repr R]
    predict       --dataset DIR --checkpoint FILE --out DIR [--repr R]
    evaluate      --dataset DIR (--checkpoint FILE | --predictions FILE) --out DIR
    fuse          --masks M2D M25D M3D --out FILE
    plot          --dataset DIR --checkpoint FILE --out DIR [--loss-log FILE]

``--config`` names a JSON file with flat dotted keys, ``data.*`` for the
scene generator, ``train.*`` for training and ``weights.*`` for loss
weights, e.g. ``{"train.epochs": 8, "weights.w_cont": 0.01}``. Flags take
precedence over the file. Exit status is 0 on success, 1 on usage errors
and 2 on runtime failures.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import torch

from . import data, evaluation, fusion, pipeline, plotting
from .estimator import GeometryAwareSegmenter
from .losses import LossReport, LossWeights

logger = logging.getLogger("gaisnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SUBCOMMANDS = ("generate-data", "train", "evaluate", "predict", "fuse", "plot")

_TRAIN_KEYS = set(GeometryAwareSegmenter().get_params()) - {"loss_weights"}
_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_DATA_KEYS = {f.name for f in dataclasses.fields(data.SceneConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="gaisnet", description="Geometry-aware instance segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with flat dotted keys")
        p.add_argument("--seed", type=int)
        for flag in flags:
            if flag == "dataset":
                p.add_argument("--dataset", required=True, help="dataset directory")
            elif flag == "checkpoint":
                p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
            elif flag == "repr":
                p.add_argument("--repr", choices=pipeline.REPRESENTATIONS)
        return p

    p = add("generate-data", "write a synthetic stereo dataset")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--start-id", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", "train a model on a dataset", "dataset", "repr")
    p.add_argument("--out", required=True, help="directory for model.npz and loss_log.jsonl")

    p = add("predict", "write detections as JSON", "dataset", "checkpoint", "repr")
    p.add_argument("--out", required=True)

    p = add("evaluate", "COCO-style mask and box AP", "dataset", "repr")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="detections JSON written by predict")
    p.add_argument("--out", required=True)

    p = add("fuse", "fuse three stored scored masks (2D, 2.5D, 3D)")
    p.add_argument("--masks", nargs=3, required=True, metavar=("M2D", "M25D", "M3D"))
    p.add_argument("--out", required=True, help="output JSON file")

    p = add("plot", "PR curves, loss curves and mask overlays", "dataset", "checkpoint", "repr")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log", help="loss_log.jsonl written by train")
    p.add_argument("--max-overlays", type=int, default=8)
    p.add_argument("--no-pr", action="store_true")
    p.add_argument("--no-overlay", action="store_true")
    return parser


# config -----------------------------------------------------------------


def load_config(path):
    """Split a flat dotted-key JSON file into ``{"data", "train", "weights"}`` dicts."""
    out = {"data": {}, "train": {}, "weights": {}}
    if path is None:
        return out
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    allowed = {"data": _DATA_KEYS, "train": _TRAIN_KEYS, "weights": _WEIGHT_KEYS}
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if section not in allowed or name not in allowed[section]:
            raise UsageError(f"unknown config key {key!r}")
        if section == "data" and name in ("depth_range", "categories"):
            value = tuple(value)
        out[section][name] = value
    return out


def _scene_config(cfg):
    try:
        return data.SceneConfig(**cfg["data"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid data config: {exc}") from exc


def _estimator_params(cfg, args):
    params = dict(cfg["train"])
    if cfg["weights"]:
        params["loss_weights"] = dict(cfg["weights"])
    if args.seed is not None:
        params["seed"] = args.seed
    if getattr(args, "repr", None):
        params["representations"] = args.repr
    return params


def _check_dir(path, name):
    if not os.path.isdir(path):
        raise UsageError(f"{name} {path!r} is not a directory")


def _check_file(path, name):
    if not os.path.isfile(path):
        raise UsageError(f"{name} {path!r} does not exist")


def _load_estimator(args, cfg):
    _check_file(args.checkpoint, "checkpoint")
    est = GeometryAwareSegmenter.load(args.checkpoint)
    overrides = dict(cfg["train"])
    if args.seed is not None:
        overrides["seed"] = args.seed
    # heads are fixed by the checkpoint; --repr only picks the fusion set
    overrides.pop("representations", None)
    est.set_params(**overrides)
    return est


def _repr(args, cfg, est):
    return args.repr or cfg["train"].get("representations") or est.representations


# subcommands ------------------------------------------------------------


def cmd_generate_data(args, cfg):
    if args.n < 1:
        raise UsageError("--n must be positive")
    scenes = data.generate_dataset(args.n, _scene_config(cfg), seed=args.seed or 0,
                                   start_id=args.start_id)
    data.write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_train(args, cfg):
    _check_dir(args.dataset, "--dataset")
    params = _estimator_params(cfg, args)
    try:
        est = GeometryAwareSegmenter(**params)
        est._config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    scenes = data.read_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "loss_log.jsonl")
    with open(log_path, "w") as fh:
        est.fit(scenes, callback=lambda r: fh.write(r.to_json() + "\n"))
    ckpt = os.path.join(args.out, "model.npz")
    est.save(ckpt)
    last = est.loss_log_[-1]
    print(f"trained {len(est.loss_log_)} steps; final total loss {last.total:.4f}")
    print(f"checkpoint: {ckpt}\nloss log: {log_path}")


def _predict_all(est, scenes, representations):
    return [d for per_scene in est.predict(scenes, representations) for d in per_scene]


def write_detections(path, detections):
    with open(path, "w") as fh:
        json.dump([d.to_dict() for d in detections], fh)


def read_detections(path):
    with open(path) as fh:
        return [evaluation.Detection.from_dict(d) for d in json.load(fh)]


def cmd_predict(args, cfg):
    _check_dir(args.dataset, "--dataset")
    est = _load_estimator(args, cfg)
    scenes = data.read_dataset(args.dataset)
    dets = _predict_all(est, scenes, _repr(args, cfg, est))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "predictions.json")
    write_detections(path, dets)
    print(f"wrote {len(dets)} detections to {path}")


def cmd_evaluate(args, cfg):
    _check_dir(args.dataset, "--dataset")
    if args.predictions is not None:
        _check_file(args.predictions, "--predictions")
        dets, name = read_detections(args.predictions), "predictions"
    else:
        est = _load_estimator(args, cfg)
        name = _repr(args, cfg, est)
        dets = None
    scenes = data.read_dataset(args.dataset)
    if dets is None:
        dets = _predict_all(est, scenes, name)
    gts = [g for s in scenes for g in pipeline.ground_truths(s)]
    segm = evaluation.coco_ap(dets, gts, "segm")
    bbox = evaluation.coco_ap(dets, gts, "bbox")
    print(evaluation.format_table({name: segm}, "Mask Evaluation"))
    print()
    print(evaluation.format_table({name: bbox}, "BBox Evaluation"))
    os.makedirs(args.out, exist_ok=True)
    evaluation.write_report(os.path.join(args.out, "metrics.json"),
                            {name: {"segm": segm, "bbox": bbox}})


def _read_scored_mask(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
        return fusion.ScoredMask(np.asarray(d["mask"], dtype=np.float64), d["score"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"invalid scored mask file {path}: {exc}") from exc


def cmd_fuse(args, cfg):
    m2d, m25d, m3d = (_read_scored_mask(p) for p in args.masks)
    fused = fusion.fuse_all(m2d, m25d, m3d)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump({"mask": fused.mask.tolist(), "score": fused.score}, fh)
    print(f"fused score {fused.score:.6f}; mask written to {args.out}")


def cmd_plot(args, cfg):
    _check_dir(args.dataset, "--dataset")
    if args.loss_log is not None:
        _check_file(args.loss_log, "--loss-log")
    est = _load_estimator(args, cfg)
    scenes = data.read_dataset(args.dataset)
    rep = _repr(args, cfg, est)
    os.makedirs(args.out, exist_ok=True)
    per_scene = est.predict(scenes, rep)
    written = []
    if not args.no_pr:
        gts = [g for s in scenes for g in pipeline.ground_truths(s)]
        dets = [d for ds in per_scene for d in ds]
        path = os.path.join(args.out, "pr_curves.png")
        plotting.plot_pr_curves({rep: evaluation.coco_ap(dets, gts, "segm")}, path)
        written.append(path)
    if args.loss_log is not None:
        with open(args.loss_log) as fh:
            reports = [LossReport.from_json(line) for line in fh if line.strip()]
        path = os.path.join(args.out, "loss_curves.png")
        plotting.plot_loss_curves(reports, path)
        written.append(path)
    if not args.no_overlay:
        for scene, dets in list(zip(scenes, per_scene))[: args.max_overlays]:
            path = os.path.join(args.out, f"overlay_{scene.scene_id:04d}.png")
            plotting.save_overlay(scene, dets, path)
            written.append(path)
    for path in written:
        print(path)


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "plot": cmd_plot,
}


def run(argv=None):
    """Parse ``argv``, dispatch, and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # single-threaded kernels keep training bit-reproducible
    torch.set_num_threads(1)
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"gaisnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"gaisnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
