"""Command-line entry point: ``mmfusion <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import annunciator, container, depth, gradcheck, imaging, model, synth, training
from .errors import InvariantError
from .heads import TrainConfig, normalize_variant, svm_predict, svm_train

log = logging.getLogger("mmfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
FUSION_CHOICES = ("edges", "flow", "scale", "none")
IMAGE_SUFFIXES = (".pgm", ".ppm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _head(value: str) -> str:
    try:
        return normalize_variant(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _policy(value: str):
    try:
        return annunciator.parse_policy(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _modality_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--canny-low", type=float, default=imaging.CANNY_LOW,
                   help="Canny low threshold, fraction of the peak gradient")
    p.add_argument("--canny-high", type=float, default=imaging.CANNY_HIGH,
                   help="Canny high threshold, fraction of the peak gradient")
    p.add_argument("--hs-alpha2", type=float, default=imaging.HS_ALPHA2,
                   help="Horn-Schunck smoothness weight alpha^2")
    p.add_argument("--hs-iters", type=int, default=imaging.HS_ITERS, help="Horn-Schunck iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmfusion", description="Multi-modal fusion detector with laser ranging.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-images", type=int, default=210)
    p.add_argument("--classes", default=",".join(synth.DEFAULT_CLASSES),
                   help="comma-separated subset of " + ",".join(synth.SHAPES))
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--max-objects", type=int, default=1, help="objects per image (1..N)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="three-way split training with weight averaging")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="model file (.json for the JSON form)")
    p.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--grad-stats", help="gradient statistics CSV (default: <out>.grads.csv)")
    p.add_argument("--fusion", choices=FUSION_CHOICES, default="scale")
    p.add_argument("--head", type=_head, default="CNN_1C", help="cnn0c or cnn1c")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr-start", type=float, default=TrainConfig.lr_start)
    p.add_argument("--lr-end", type=float, default=TrainConfig.lr_end)
    p.add_argument("--schedule", choices=("step", "linear"), default=TrainConfig.schedule)
    p.add_argument("--rois-per-image", type=int, default=TrainConfig.rois_per_image)
    p.add_argument("--gt-fallback", action=argparse.BooleanOptionalAction, default=True,
                   help="promote the best anchor of each object to positive")
    _modality_flags(p)

    p = sub.add_parser("detect", help="detect, range and announce objects")
    p.add_argument("images", nargs="*", help="PGM/PPM images processed in the given order")
    p.add_argument("--model", required=True)
    p.add_argument("--watch-dir", help="process images appearing in this directory")
    p.add_argument("--watch-timeout", type=float, default=0.0,
                   help="seconds to keep polling the watch directory for new images")
    p.add_argument("--frame-pairs", action="store_true",
                   help="use each next image as the second flow frame instead of a synthetic shift")
    p.add_argument("--scan", help="scan CSV for every image, or a directory of <image-stem>.csv")
    p.add_argument("--calib", help="calibration file, or 'default' for the built-in table")
    p.add_argument("--policy", type=_policy, default=annunciator.Once(),
                   help="interval:N | once | tooclose:MM (default once)")
    p.add_argument("--too-close", type=float, default=annunciator.TOO_CLOSE_MM,
                   help="urgency threshold in mm")
    p.add_argument("--frame-interval", type=float, default=1.0, help="seconds between images")
    p.add_argument("--speak-cmd", help="command template run per announcement ({text} placeholder)")
    p.add_argument("--announce-file", help="append announcement text to this file")
    p.add_argument("--announce", choices=("stderr", "stdout", "none"), default="stderr",
                   help="where announcement text is printed")
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; detection is deterministic")

    p = sub.add_parser("eval", help="ROI classification accuracy on a labeled manifest")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--svm", action="store_true", help="also compare a linear SVM on pooled features")
    p.add_argument("--svm-train", help="manifest for SVM training (default: the model's training manifest)")
    p.add_argument("--svm-on-test", action="store_true", help="train the SVM on the evaluated manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")

    p = sub.add_parser("simulate-scan", help="ray-cast a laser scan of a simple scene")
    p.add_argument("--scene", help="JSON list of obstacles ({type: rect|circle, ...})")
    p.add_argument("--wall", type=float, help="wall perpendicular to the forward axis at this distance (mm)")
    p.add_argument("--pose", default="0,0,0", help="x_mm,y_mm,heading_deg")
    p.add_argument("--out", help="scan CSV (default stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; simulation is deterministic")

    p = sub.add_parser("gradcheck", help="finite-difference check of the composed pipeline")
    p.add_argument("--fusion", choices=FUSION_CHOICES, action="append",
                   help="fusion mode (repeatable; default edges, flow and scale)")
    p.add_argument("--head", type=_head, default="CNN_1C")
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--eps", type=float, default=gradcheck.EPS)
    p.add_argument("--tol", type=float, default=gradcheck.REL_TOL)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    manifest = synth.synthesize(args.out, args.n_images, classes, seed=args.seed, size=args.size,
                                max_objects=args.max_objects)
    print(manifest)
    return EXIT_OK


def _default_path(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + suffix)


def cmd_train(args) -> int:
    entries = training.read_manifest(args.manifest)
    if not entries:
        raise ValueError(f"{args.manifest}: empty manifest")
    classes = training.class_list(entries)
    if not classes:
        raise ValueError(f"{args.manifest}: no object classes")
    det_cfg = model.DetectorConfig(fusion=args.fusion, head=args.head, classes=classes,
                                   canny_low=args.canny_low, canny_high=args.canny_high,
                                   hs_alpha2=args.hs_alpha2, hs_iters=args.hs_iters)
    cfg = TrainConfig(epochs=args.epochs, lr_start=args.lr_start, lr_end=args.lr_end,
                      schedule=args.schedule, seed=args.seed, batch_size=args.batch_size,
                      gt_fallback=args.gt_fallback, rois_per_image=args.rois_per_image)
    samples = training.build_samples(entries, det_cfg, gt_fallback=cfg.gt_fallback)
    log.info("training %s/%s on %d images, %d epochs", det_cfg.tag, det_cfg.head, len(samples), cfg.epochs)
    result = training.train_three_way(samples, cfg, det_cfg, progress=log.info)

    for name, net in result.detector.components():
        for arr in net.arrays():
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"non-finite parameters in {name} after training")
    meta = {"manifest": str(Path(args.manifest).resolve()), "seed": args.seed, "epochs": cfg.epochs,
            "final_lr": result.metrics[-1].lr, "final_accuracy": result.metrics[-1].accuracy}
    container.save_model(args.out, result.detector, meta)

    metrics_path = Path(args.metrics) if args.metrics else _default_path(args.out, ".metrics.csv")
    training.write_metrics_csv(metrics_path, result.metrics)
    grads_path = Path(args.grad_stats) if args.grad_stats else _default_path(args.out, ".grads.csv")
    training.write_grad_stats_csv(grads_path, result.grad_rows)
    print(json.dumps({"model": str(args.out), "tags": [det_cfg.tag, det_cfg.head],
                      "final_accuracy": result.metrics[-1].accuracy, "final_lr": result.metrics[-1].lr,
                      "metrics": str(metrics_path), "grad_stats": str(grads_path)}))
    return EXIT_OK


def _load_calibration(args) -> depth.GridCalibration:
    if args.calib in (None, "default"):
        return depth.default_calibration()
    return depth.load_calibration(args.calib)


def _scan_for(args, image: str, cache: dict) -> depth.LaserScan | None:
    if not args.scan:
        return None
    src = Path(args.scan)
    if src.is_dir():
        src = src / (Path(image).stem + ".csv")
        if not src.exists():
            return None
    if src not in cache:
        cache[src] = depth.parse_scan(src)
    return cache[src]


def _watch(directory: str, timeout: float, poll: float = 0.2):
    """Yield image paths in name order; keep polling until ``timeout`` passes with nothing new."""
    seen: set[Path] = set()
    idle_since = time.monotonic()
    while True:
        fresh = sorted(p for p in Path(directory).iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES and p not in seen)
        for p in fresh:
            seen.add(p)
            yield str(p)
        if fresh:
            idle_since = time.monotonic()
        elif time.monotonic() - idle_since >= timeout:
            return
        else:
            time.sleep(poll)


def _sinks(args) -> list:
    sinks = []
    if args.announce == "stdout":
        sinks.append(annunciator.StdoutSink(sys.stdout))
    elif args.announce == "stderr":
        sinks.append(annunciator.StdoutSink(sys.stderr))
    if args.announce_file:
        sinks.append(annunciator.FileSink(args.announce_file))
    if args.speak_cmd:
        sinks.append(annunciator.CommandSink(args.speak_cmd))
    return sinks


def cmd_detect(args) -> int:
    if not args.images and not args.watch_dir:
        raise UsageError("give image paths or --watch-dir")
    if args.scan and not args.calib:
        raise UsageError("--scan requires --calib (a file, or 'default')")
    det, _ = container.load_model(args.model)
    calib = _load_calibration(args)
    sched = annunciator.Scheduler(args.policy, args.too_close, calib.camera_grid[1])
    sinks = _sinks(args)
    out = open(args.out, "w") if args.out else sys.stdout
    scans: dict = {}
    try:
        images = list(args.images)
        stream = iter(images) if not args.watch_dir else _watch(args.watch_dir, args.watch_timeout)
        for index, image in enumerate(stream):
            gray = imaging.to_grayscale(imaging.load_image(image))
            nxt = None
            if args.frame_pairs and "O" in det.config.modalities:
                if index + 1 < len(images):
                    nxt = imaging.to_grayscale(imaging.load_image(images[index + 1]))
                    if nxt.shape != gray.shape:
                        raise ValueError(f"{image}: frame pair sizes differ")
                else:
                    log.info("%s: last frame has no successor; using the synthetic shift", image)
            inputs = model.prepare_inputs(det.config, gray, nxt)
            scan = _scan_for(args, image, scans)
            t = index * args.frame_interval
            for raw in model.detect(det, inputs):
                cx, cy = raw.box.center
                cx = min(max(cx, 0.0), gray.shape[1] - 1e-9)
                cy = min(max(cy, 0.0), gray.shape[0] - 1e-9)
                cell = depth.pixel_to_camera_cell(cx, cy, gray.shape, calib.camera_grid)
                dist = None
                if scan is not None:
                    dist = depth.map_to_distance(cx, cy, gray.shape, calib, scan).distance_mm
                d = annunciator.Detection(det.config.classes[raw.class_index - 1], raw.score,
                                          tuple(raw.box.as_list()), cell, dist, t, image)
                out.write(json.dumps(d.to_json()) + "\n")
                a = sched.feed(d)
                if a is not None:
                    out.write(json.dumps(a.to_json()) + "\n")
                    annunciator.emit(a, sinks)
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    det, header = container.load_model(args.model)
    entries = training.read_manifest(args.manifest)
    if not entries:
        raise ValueError(f"{args.manifest}: empty manifest")
    samples = training.build_samples(entries, det.config)
    report = training.evaluate(det, samples)
    report["model"] = {"fusion": det.config.tag, "head": det.head.variant}
    if args.svm:
        if args.svm_on_test:
            train_samples = samples
            report["svm_training"] = "evaluated manifest"
        else:
            src = args.svm_train or header.get("meta", {}).get("manifest")
            if not src:
                raise UsageError("--svm needs --svm-train, --svm-on-test or a model with a recorded manifest")
            train_samples = training.build_samples(training.read_manifest(src), det.config)
            report["svm_training"] = str(src)
        x_tr, y_tr = training.extract_features(det, train_samples)
        x_te, y_te = training.extract_features(det, samples)
        svm = svm_train(x_tr, y_tr)
        pred = svm_predict(svm, x_te) if len(x_te) else np.zeros(0)
        report["svm_accuracy"] = float((pred == y_te).mean()) if len(y_te) else None
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _parse_pose(text: str) -> depth.Pose:
    try:
        x, y, h = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--pose expects x,y,heading_deg, got {text!r}") from None
    return depth.Pose(x, y, math.radians(h))


def cmd_simulate_scan(args) -> int:
    scene = []
    if args.scene:
        items = json.loads(Path(args.scene).read_text())
        if not isinstance(items, list):
            raise ValueError(f"{args.scene}: scene must be a JSON list of obstacles")
        scene += [depth.obstacle_from_dict(d) for d in items]
    if args.wall is not None:
        if args.wall <= 0:
            raise UsageError("--wall must be positive")
        scene.append(depth.Rect(args.wall, -1e6, args.wall + 100.0, 1e6))
    if not scene:
        raise UsageError("give --scene and/or --wall")
    text = depth.format_scan(depth.simulate_scan(scene, _parse_pose(args.pose)))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modes = args.fusion or ["edges", "flow", "scale"]
    worst_all = 0.0
    for mode in modes:
        cfg = model.DetectorConfig(fusion=mode, head=args.head)
        det = model.init_detector(cfg, args.seed)
        samples, rois = gradcheck.random_problem(cfg, seed=args.seed)
        probes, skipped = gradcheck.check_detector(det, samples, rois, args.coords, args.eps, args.seed)
        worst = max((p.rel_error for p in probes), default=float("nan"))
        worst_all = max(worst_all, worst) if math.isfinite(worst) else math.inf
        print(json.dumps({"fusion": cfg.tag, "head": cfg.head, "coords": len(probes),
                          "skipped_kinks": skipped, "max_rel_error": worst}))
        if len(probes) < args.coords:
            raise InvariantError(f"{cfg.tag}: only {len(probes)} usable coordinates")
    if not worst_all < args.tol:
        raise InvariantError(f"gradient check failed: max relative error {worst_all:.3e} >= {args.tol:g}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "simulate-scan": cmd_simulate_scan,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mmfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"mmfusion {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OSError, ValueError) as exc:
        print(f"mmfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
