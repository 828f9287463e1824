"""Command-line entry points.

Commands: train-descriptor, train-detector, register, evaluate, synth-pairs,
heatmap. Exit codes: 0 success, 1 operational failure, 2 usage/config error.
Reports are JSON (with a schema_version), logs are JSONL, and the evaluate
report path renders matplotlib figures next to the delimited per-pair CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as uio
from .config import RunConfig, load_config, resolved_dump
from .errors import ConfigError, TrainingDiverged

logger = logging.getLogger("unconked")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _apply_seed(config: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is not None:
        config.seeds.augmentation = seed
        config.seeds.sampling = seed + 1
        config.seeds.ransac = seed + 2
    return config


def _training_image_paths(config: RunConfig) -> list[Path]:
    """Cheap path validation, run before any side effect."""
    images_dir = Path(config.data.images)
    if not images_dir.is_dir():
        raise ConfigError(f"data.images is not a directory: {images_dir!s}")
    paths = sorted(
        p for p in images_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise ConfigError(f"no images found under {images_dir!s}")
    if config.data.masks and not Path(config.data.masks).is_dir():
        raise ConfigError(f"data.masks is not a directory: {config.data.masks}")
    return paths


def _load_training_images(config: RunConfig):
    paths = _training_image_paths(config)
    images = [uio.load_image(p) for p in paths]
    masks = None
    if config.data.masks:
        masks_dir = Path(config.data.masks)
        masks = []
        for p in paths:
            mp = masks_dir / (p.stem + ".png")
            masks.append(uio.load_mask(mp) if mp.exists() else None)
    return images, masks


def _out_dir(config: RunConfig, override: Optional[str]) -> Path:
    out = Path(override) if override else Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(config: RunConfig, out: Path) -> None:
    (out / "resolved_config.json").write_text(resolved_dump(config))


def _keypoint_source(args, config: RunConfig):
    from . import checkpoints
    from .detector import D2Keypoints, HeatmapKeypoints

    window = config.inference.nms_window
    if getattr(args, "d2", False):
        return D2Keypoints(nms_window=window)
    state = checkpoints.load_detector(args.detector)
    ss_state = None
    if getattr(args, "detector_ss", None):
        ss_state = checkpoints.load_detector(args.detector_ss)
    return HeatmapKeypoints(state, ss_state, nms_window=window,
                            roi_threshold=config.augmentation.roi_threshold)


def cmd_train_descriptor(args) -> int:
    from .training import prepare_samples, train_descriptor

    config = _apply_seed(load_config(args.config), args.seed)
    _training_image_paths(config)
    out = _out_dir(config, args.out)
    _write_resolved_config(config, out)
    images, masks = _load_training_images(config)
    samples = prepare_samples(images, config, masks)
    logger.info("training descriptor on %d images", len(samples))
    train_descriptor(samples, config, out_dir=out)
    logger.info("descriptor checkpoint written to %s", out / "descriptor.pt")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    from . import checkpoints
    from .training import prepare_samples, train_detector

    config = _apply_seed(load_config(args.config), args.seed)
    if not Path(args.descriptor).is_file():
        raise ConfigError(f"descriptor checkpoint not found: {args.descriptor}")
    kind = args.target_kind or config.detector.target_kind
    if kind not in ("ap", "ss"):
        raise ConfigError(f"target kind must be 'ap' or 'ss', got {kind!r}")
    _training_image_paths(config)
    out = _out_dir(config, args.out)
    _write_resolved_config(config, out)
    descriptor_state = checkpoints.load_descriptor(args.descriptor)
    images, masks = _load_training_images(config)
    samples = prepare_samples(images, config, masks)
    logger.info("training %s-target detector on %d images", kind, len(samples))
    train_detector(samples, descriptor_state, config, target_kind=kind, out_dir=out)
    logger.info("detector checkpoint written to %s", out / f"detector_{kind}.pt")
    return EXIT_OK


def _result_to_report(result, config: RunConfig) -> dict:
    report = {
        "schema_version": 1,
        "success": result.success,
        "failure_reason": result.failure_reason,
        "keypoints_detected": list(result.keypoints_detected),
        "matches_used": result.matches_used,
        "inlier_count": result.inlier_count,
        "homography": result.homography.to_flat_string() if result.homography else None,
        "config": json.loads(resolved_dump(config)),
    }
    if result.matches is not None and len(result.matches) > 0:
        inliers = set(result.inlier_indices.tolist()) if result.inlier_indices is not None else set()
        coords_a, coords_b = result.matches.matched_coords()
        report["matches"] = [
            {
                "fixed_xy": [round(float(x), 3) for x in ca],
                "moving_xy": [round(float(x), 3) for x in cb],
                "distance": round(float(d), 6),
                "inlier": i in inliers,
            }
            for i, (ca, cb, d) in enumerate(
                zip(coords_a, coords_b, result.matches.distances)
            )
        ]
    return report


def cmd_register(args) -> int:
    from . import checkpoints
    from .descriptor import describe
    from .geometry import resize_image
    from .registration import register_pair

    config = _apply_seed(load_config(args.config), args.seed)
    if args.k is not None:
        config.inference.k_keypoints = 0 if args.k == "all" else int(args.k)
    if args.m is not None:
        config.inference.m_matches = args.m
    fixed = uio.load_image(args.fixed)
    moving = uio.load_image(args.moving)
    descriptor_state = checkpoints.load_descriptor(args.descriptor)
    source = _keypoint_source(args, config)
    rng = np.random.default_rng(config.seeds.ransac)
    result = register_pair(fixed, moving, descriptor_state, source, config, rng)
    report = _result_to_report(result, config)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.keypoints_dir:
        kp_dir = Path(args.keypoints_dir)
        kp_dir.mkdir(parents=True, exist_ok=True)
        size = config.inference.image_size
        k = config.inference.k_keypoints if config.inference.k_keypoints > 0 else None
        for label, image in (("fixed", fixed), ("moving", moving)):
            small = resize_image(image.astype(np.float32), (size, size))
            cands = source.detect(small, describe(descriptor_state.network, small), k)
            uio.save_keypoints_csv(cands, kp_dir / f"{label}_keypoints.csv")
    logger.info(
        "registration %s (%d inliers / %d matches); report at %s",
        "succeeded" if result.success else "failed",
        result.inlier_count, result.matches_used, args.out,
    )
    return EXIT_OK if result.success else EXIT_FAILURE


def _write_pairs_csv(report: dict, path: Path) -> None:
    fields = [
        "name", "category", "success", "failure_reason", "inlier_count",
        "matches_used", "iou", "dice", "iom", "sm", "ssim",
        "mean_control_error_px", "auc",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for pair in report["pairs"]:
            row = {k: pair.get(k) for k in fields}
            row.update({k: pair.get("metrics", {}).get(k) for k in
                        ("iou", "dice", "iom", "sm", "ssim")})
            writer.writerow(row)


def cmd_evaluate(args) -> int:
    from . import checkpoints
    from .evaluation import evaluate_records

    config = _apply_seed(load_config(args.config), args.seed)
    if args.k is not None:
        config.inference.k_keypoints = 0 if args.k == "all" else int(args.k)
    if args.m is not None:
        config.inference.m_matches = args.m
    records = uio.load_manifest(args.pairs)
    descriptor_state = checkpoints.load_descriptor(args.descriptor)
    source = _keypoint_source(args, config)
    report = evaluate_records(records, descriptor_state, source, config)
    report["config"] = json.loads(resolved_dump(config))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_pairs_csv(report, out.with_suffix(".csv"))
    logger.info(
        "evaluated %d pairs, %d registered; report at %s",
        report["pairs_total"], report["aggregate"]["pairs_registered"], out,
    )
    if args.plot:
        from .plots import plot_keypoint_distances, plot_success_curve

        plot_dir = Path(args.plot)
        plot_dir.mkdir(parents=True, exist_ok=True)
        if "success_curves" in report:
            curves = {
                cat: {
                    "thresholds": np.asarray(data["thresholds"]),
                    "curve": np.asarray(data["curve"]),
                    "auc": data["auc"],
                }
                for cat, data in report["success_curves"].items()
            }
            plot_success_curve(curves, plot_dir / "success_curve.png")
        if "keypoint_distance_sweep" in report:
            plot_keypoint_distances(
                {"evaluated": report["keypoint_distance_sweep"]},
                plot_dir / "keypoint_distances.png",
            )
        logger.info("figures written to %s", plot_dir)
    return EXIT_OK


def cmd_synth_pairs(args) -> int:
    from .augmentation import estimate_roi
    from .evaluation import make_synthetic_pair, make_synthetic_triplet

    config = _apply_seed(load_config(args.config), args.seed)
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise ConfigError(f"--images is not a directory: {images_dir}")
    paths = sorted(
        p for p in images_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise ConfigError(f"no images found under {images_dir}")
    if args.count:
        paths = paths[: args.count]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    modes = ("color", "geometric", "full") if args.mode == "all" else (args.mode,)
    eval_ranges = config.evaluation.affine_ranges()
    hsv = config.augmentation.hsv_ranges()
    noise = config.augmentation.noise()
    manifests: dict[str, list[dict]] = {m: [] for m in modes}
    rng = np.random.default_rng(config.seeds.augmentation)
    for path in paths:
        image = uio.load_image(path)
        roi = estimate_roi(image, config.augmentation.roi_threshold)
        count = min(config.evaluation.control_points, roi.population)
        if args.mode == "all":
            pairs = make_synthetic_triplet(
                rng, image, roi, eval_ranges, hsv, noise, control_count=count
            )
        else:
            pairs = {
                args.mode: make_synthetic_pair(
                    rng, image, roi, args.mode, eval_ranges, hsv, noise, control_count=count
                )
            }
        for mode, pair in pairs.items():
            stem = f"{path.stem}_{mode}"
            fixed_path = out / f"{stem}_fixed.png"
            moving_path = out / f"{stem}_moving.png"
            cp_path = out / f"{stem}_cp.txt"
            uio.save_image(fixed_path, pair.fixed)
            uio.save_image(moving_path, pair.moving)
            uio.save_control_points(
                cp_path, pair.control_points.fixed_pts, pair.control_points.moving_pts
            )
            manifests[mode].append({
                "fixed": fixed_path.name,
                "moving": moving_path.name,
                "control_points": cp_path.name,
                "true_transform": [float(v) for v in pair.true_transform.matrix.ravel()],
                "category": mode,
            })
    for mode, records in manifests.items():
        uio.write_manifest(out / f"manifest_{mode}.jsonl", records)
    logger.info("wrote %d pair(s) per mode under %s", len(paths), out)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from . import checkpoints
    from .augmentation import estimate_roi
    from .detector import ap_map, combine_maps, predict_heatmap, ss_map
    from .plots import plot_heatmap_preview
    from .training import build_batch, prepare_samples

    config = _apply_seed(load_config(args.config), args.seed)
    image = uio.load_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    known = {"predicted", "ap", "ss", "combined"}
    unknown = set(kinds) - known
    if unknown:
        raise ConfigError(f"unknown heatmap kinds {sorted(unknown)}; choose from {sorted(known)}")

    maps = {}
    if {"ap", "ss"} & set(kinds):
        if not args.descriptor:
            raise ConfigError("target heatmaps (ap/ss) need --descriptor")
        descriptor_state = checkpoints.load_descriptor(args.descriptor)
        sample = prepare_samples([image], config)[0]
        batch = build_batch(sample, config, config.batch.detector_points, step=1)
        if "ss" in kinds:
            maps["ss"] = ss_map(descriptor_state, batch)
        if "ap" in kinds:
            maps["ap"] = ap_map(descriptor_state, batch)
    if {"predicted", "combined"} & set(kinds):
        if not args.detector:
            raise ConfigError("predicted heatmaps need --detector")
        state = checkpoints.load_detector(args.detector)
        from .geometry import resize_image

        resized = resize_image(image.astype(np.float32), (state.input_size, state.input_size))
        predicted = predict_heatmap(state, resized, roi_threshold=config.augmentation.roi_threshold)
        if "predicted" in kinds:
            maps[predicted.kind] = predicted
        if "combined" in kinds:
            if not args.detector_ss:
                raise ConfigError("combined heatmaps need --detector (ap) and --detector-ss")
            ss_state = checkpoints.load_detector(args.detector_ss)
            pred_ss = predict_heatmap(ss_state, resized, roi_threshold=config.augmentation.roi_threshold)
            maps["combined"] = combine_maps(predicted, pred_ss)
    if not maps:
        raise ConfigError("nothing to dump: no kinds resolved")
    for name, hm in maps.items():
        png = out / f"{Path(args.image).stem}_{name}.png"
        uio.save_heatmap(hm, png)
        if args.preview:
            plot_heatmap_preview(hm, out / f"{Path(args.image).stem}_{name}_preview.png")
    logger.info("wrote %d heatmap(s) under %s", len(maps), out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unconked",
        description="Unsupervised keypoint detection/description and registration toolkit",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-descriptor", help="train the descriptor network")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: config output.dir)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_descriptor)

    p = sub.add_parser("train-detector", help="train a heatmap-regression detector")
    p.add_argument("--config", required=True)
    p.add_argument("--descriptor", required=True, help="descriptor checkpoint")
    p.add_argument("--target-kind", choices=("ap", "ss"))
    p.add_argument("--out", help="output directory (default: config output.dir)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("register", help="register one image pair")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--descriptor", required=True)
    p.add_argument("--detector", help="detector checkpoint")
    p.add_argument("--detector-ss", help="second (ss) checkpoint for combined mode")
    p.add_argument("--d2", action="store_true", help="use the heuristic baseline detector")
    p.add_argument("--k", help="keypoints per image (integer or 'all')")
    p.add_argument("--m", type=int, help="keep only the m closest matches")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--keypoints-dir", help="also dump detected keypoints as CSV here")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="evaluate registration over a pair manifest")
    p.add_argument("--pairs", required=True, help="JSONL manifest")
    p.add_argument("--descriptor", required=True)
    p.add_argument("--detector")
    p.add_argument("--detector-ss")
    p.add_argument("--d2", action="store_true")
    p.add_argument("--k", help="keypoints per image (integer or 'all')")
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--plot", help="directory for rendered figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth-pairs", help="materialize synthetic registration pairs")
    p.add_argument("--images", required=True, help="source image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("color", "geometric", "full", "all"), default="all")
    p.add_argument("--count", type=int, help="max source images to use")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth_pairs)

    p = sub.add_parser("heatmap", help="dump predicted/target heatmaps for inspection")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="predicted", help="comma list: predicted,ap,ss,combined")
    p.add_argument("--descriptor")
    p.add_argument("--detector")
    p.add_argument("--detector-ss")
    p.add_argument("--preview", action="store_true", help="also render colormapped previews")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
