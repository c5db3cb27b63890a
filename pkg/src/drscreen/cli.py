"""Operator command line covering the full workflow without the UI.

    drscreen synth      render a synthetic labelled dataset
    drscreen bundle     lay out a detector training bundle (images/ labels/)
    drscreen detect     run the detector over a dataset, write detection files
    drscreen featurize  turn detections into the lesion-count table
    drscreen train      full training run (detect -> counts -> grid -> model)
    drscreen evaluate   score a saved model against a count table
    drscreen predict    grade one image, print the prediction document
    drscreen serve      start the HTTP service

Every randomized step sits behind an explicit --seed (default 42); identical
flags and seeds reproduce identical artifact bytes (use --no-timestamps to
strip creation times for byte-level comparison).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset_io import generate_synthetic_dataset, load_dataset
from .detector import (
    DetectorConfig,
    OraclePerturbation,
    detect,
    detect_dataset,
    detector_config_from_doc,
    parse_detection_output,
    prepare_training_bundle,
)
from .deteval import detection_metrics, match_many
from .domain import LesionClass
from .errors import DrScreenError, LoadError
from .features import PreprocessConfig, extract_counts
from .pipeline import (
    GridSpec,
    RunConfig,
    SplitSpec,
    evaluate as evaluate_counts,
    featurize_dataset,
    read_count_table,
    run_config_from_doc,
    run_training,
    write_count_table,
)
from .svm import KernelKind, load_model, predict_from_counts


def _detector_from_args(args) -> DetectorConfig:
    if getattr(args, "detector_config", None):
        path = Path(args.detector_config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read detector config {path}: {exc}") from None
        return detector_config_from_doc(doc)
    if getattr(args, "detector", "oracle") != "oracle":
        raise LoadError(
            "external detectors are configured via --detector-config <path>"
        )
    conf = getattr(args, "conf", None)
    truth_dir = getattr(args, "truth_dir", None)
    return DetectorConfig(
        confidence_threshold=0.25 if conf is None else conf,
        truth_dir=None if truth_dir is None else Path(truth_dir),
    )


def _perturbation_from_args(args) -> OraclePerturbation | None:
    drop = getattr(args, "drop_rate", 0.0)
    spur = getattr(args, "spurious_rate", 0.0)
    jitter = getattr(args, "jitter", 0.0)
    if drop == 0.0 and spur == 0.0 and jitter == 0.0:
        return None
    return OraclePerturbation(
        drop_rate=drop, spurious_rate=spur, jitter=jitter, seed=args.seed
    )


def cmd_synth(args) -> int:
    ds = generate_synthetic_dataset(
        args.out,
        n_per_grade=args.n_per_grade,
        image_size=args.image_size,
        seed=args.seed,
        label_flip_rate=args.label_flip_rate,
    )
    print(f"wrote {len(ds.records)} images under {args.out}")
    return 0


def cmd_bundle(args) -> int:
    dataset = load_dataset(args.data)
    manifest = prepare_training_bundle(
        dataset, args.out, augment=args.augment, seed=args.seed
    )
    print(f"bundle manifest: {manifest}")
    return 0


def cmd_detect(args) -> int:
    dataset = load_dataset(args.data)
    config = _detector_from_args(args)
    perturb = _perturbation_from_args(args)
    detections = detect_dataset(dataset, config, perturb=perturb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset_io import write_annotation_file

    for image_id, dets in detections.items():
        write_annotation_file(
            dets, out / f"{image_id}.txt", include_confidence=True
        )
    print(f"wrote detections for {len(detections)} images to {out}")
    if args.report:
        result = match_many(detections, dataset.annotations, args.iou_threshold)
        report = detection_metrics(result)
        Path(args.report).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        print(report.render_text(), end="")
    return 0


def cmd_featurize(args) -> int:
    dataset = load_dataset(args.data)
    if args.detections:
        detections = parse_detection_output(
            args.detections, [r.image_id for r in dataset.records]
        )
    else:
        detections = {r.image_id: list(dataset.annotations.get(r.image_id, ()))
                      for r in dataset.records}
    ids, X, grades = featurize_dataset(dataset, detections, weighted=args.weighted)
    write_count_table(args.out, ids, X, grades)
    print(f"wrote count table ({len(ids)} rows) to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read run config {path}: {exc}") from None
        config = run_config_from_doc(doc, base_dir=path.parent)
        if args.data:
            config = _replace_config(config, manifest=Path(args.data))
        if args.out:
            config = _replace_config(config, out_dir=Path(args.out))
    else:
        if not args.data or not args.out:
            raise LoadError("train needs --data and --out (or --config)")
        config = RunConfig(
            manifest=Path(args.data),
            out_dir=Path(args.out),
            detector=_detector_from_args(args),
            preprocess=PreprocessConfig(
                select_k=args.select_k,
                scale=not args.no_scale,
                pca_components=args.pca_components,
                pca_variance_target=args.pca_variance_target,
            ),
            split=SplitSpec(
                test_fraction=args.test_fraction, seed=args.seed, stratified=True
            ),
            grid=GridSpec(
                C=tuple(args.c_grid),
                gamma=tuple(None if g == "scale" else float(g) for g in args.gamma_grid),
                kernel=tuple(KernelKind(k) for k in args.kernel_grid),
            ),
            cv_folds=args.cv_folds,
            seed=args.seed,
            include_timestamps=not args.no_timestamps,
        )
    result = run_training(config)
    print(
        f"train accuracy {result.report_train.accuracy:.4f}  "
        f"test accuracy {result.report_test.accuracy:.4f}  "
        f"macro-F1 {result.report_test.macro_f1:.4f}"
    )
    print(f"artifacts in {result.artifacts_dir}")
    return 0


def _replace_config(config: RunConfig, **kwargs) -> RunConfig:
    from dataclasses import replace

    return replace(config, **kwargs)


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    ids, X, grades = read_count_table(args.counts)
    report = evaluate_counts(model, X, grades)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    print(report.render_text(), end="")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    config = _detector_from_args(args)
    truth = None
    if args.truth:
        from .dataset_io import read_annotation_file

        truth = read_annotation_file(args.truth)
    detections = detect(args.image, config, truth=truth)
    counts = extract_counts(
        detections, class_subset=model.feature_classes, image_id=Path(args.image).stem
    )
    grade, votes, scores = predict_from_counts(model, counts.values)
    doc = {
        "image": str(args.image),
        "grade": int(grade),
        "grade_label": grade.label,
        "counts": {
            cls.name.lower(): float(v)
            for cls, v in zip(model.feature_classes, counts.values)
        },
        "votes": {str(int(k)): v for k, v in votes.items()},
        "scores": {str(int(k)): v for k, v in scores.items()},
        "detections": [
            {
                "class_id": int(d.lesion_class),
                "class_name": d.lesion_class.name.lower(),
                "box": {"cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h},
                "confidence": d.confidence,
            }
            for d in detections
        ],
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    config = ServiceConfig(
        data_dir=Path(args.data_dir),
        model_path=None if args.model is None else Path(args.model),
        detector=_detector_from_args(args),
        max_upload_bytes=args.max_upload,
    )
    serve(config, host=args.host, port=args.port)
    return 0


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="PRNG seed (default 42)")


def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--detector",
        choices=["oracle"],
        default="oracle",
        help="built-in detector kind (external tools use --detector-config)",
    )
    p.add_argument(
        "--detector-config",
        metavar="PATH",
        help="JSON detector config (mode, command template, threshold, subset)",
    )
    p.add_argument(
        "--conf", type=float, default=None, help="confidence threshold (default 0.25)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drscreen",
        description="Diabetic-retinopathy screening pipeline tools",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic labelled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-per-grade", type=int, required=True, help="images per grade")
    p.add_argument("--image-size", type=int, default=256, help="square size in px")
    p.add_argument(
        "--label-flip-rate",
        type=float,
        default=0.0,
        help="fraction of records mislabelled on purpose (default 0)",
    )
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bundle", help="prepare a detector training bundle")
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--augment", action="store_true", help="emit flipped/rotated variants")
    _add_seed(p)
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("detect", help="run the detector over a dataset")
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--out", required=True, help="directory for per-image detection files")
    _add_detector_flags(p)
    p.add_argument("--drop-rate", type=float, default=0.0, help="oracle: drop fraction")
    p.add_argument(
        "--spurious-rate", type=float, default=0.0, help="oracle: spurious-box fraction"
    )
    p.add_argument("--jitter", type=float, default=0.0, help="oracle: box jitter amplitude")
    p.add_argument("--report", metavar="PATH", help="also write a detection metrics report")
    p.add_argument(
        "--iou-threshold", type=float, default=0.5, help="match threshold for --report"
    )
    _add_seed(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("featurize", help="write the lesion-count table")
    p.add_argument("--data", required=True, help="dataset manifest (or its directory)")
    p.add_argument("--out", required=True, help="output counts.csv path")
    p.add_argument(
        "--detections",
        metavar="DIR",
        help="detection files to count (default: ground-truth annotations)",
    )
    p.add_argument("--weighted", action="store_true", help="confidence-weighted counts")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="run the full training pipeline")
    p.add_argument("--data", help="dataset manifest (or its directory)")
    p.add_argument("--out", help="artifacts directory")
    p.add_argument("--config", metavar="PATH", help="run config JSON (overrides flags)")
    _add_detector_flags(p)
    p.add_argument("--test-fraction", type=float, default=0.2, help="test split size")
    p.add_argument("--cv-folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--select-k", type=int, default=None, help="keep k best features")
    p.add_argument("--no-scale", action="store_true", help="skip standardization")
    p.add_argument("--pca-components", type=int, default=None, help="PCA dimensions")
    p.add_argument(
        "--pca-variance-target", type=float, default=None, help="PCA explained-variance target"
    )
    p.add_argument(
        "--c-grid", type=float, nargs="+", default=[0.1, 1.0, 10.0, 100.0],
        help="C values to search",
    )
    p.add_argument(
        "--gamma-grid", nargs="+", default=["scale", "0.01", "0.1", "1"],
        help="gamma values to search ('scale' or numbers)",
    )
    p.add_argument(
        "--kernel-grid", nargs="+", choices=["rbf", "linear"], default=["rbf"],
        help="kernels to search",
    )
    p.add_argument(
        "--no-timestamps",
        action="store_true",
        help="omit creation times from artifacts (byte-reproducible runs)",
    )
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model against a count table")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--counts", required=True, help="count table CSV")
    p.add_argument("--out", metavar="PATH", help="also write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="grade one image")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--image", required=True, help="image to grade")
    _add_detector_flags(p)
    p.add_argument("--truth", metavar="PATH", help="oracle: annotation file to replay")
    _add_seed(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--model", help="model file (omit to start without one)")
    p.add_argument("--data-dir", required=True, help="writable state directory")
    _add_detector_flags(p)
    p.add_argument(
        "--truth-dir", metavar="DIR", help="oracle: ground-truth lookup directory"
    )
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8000, help="bind port")
    p.add_argument(
        "--max-upload", type=int, default=16 * 1024 * 1024, help="max upload bytes"
    )
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DrScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
