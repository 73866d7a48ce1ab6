"""Command-line surface: dataset generation, splitting, training, the
insertion sweep, evaluation, and CAM explanation/scoring.

Conventions:

* ``--config FILE`` loads a JSON document whose sections mirror the
  library configs; explicit flags override file values (last wins).
* The seed resolves as flag > config > $DALA_SEED > 0.
* Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
* Every command validates its full configuration before touching disk,
  and all outputs are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cam as camlib
from .blocks import BackboneConfig, toy_backbone_config
from .checkpoint import load_model
from .data import (
    AugmentSpec,
    DatasetManifest,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_and_preprocess,
    load_mask,
    scan_directory,
    stratified_split,
)
from .exceptions import (
    CheckpointFormatError,
    ConfigurationError,
    InputError,
    UsageError,
)
from .imageops import atomic_write_bytes, load_png
from .metrics import (
    binarize_cam_for_eval,
    heatmap_metrics,
    report_csv_header,
    report_csv_row,
)
from .training import (
    TrainConfig,
    evaluate_model,
    load_arrays,
    stage_sweep,
    sweep_table_text,
    train,
)

_USAGE_ERRORS = (
    ConfigurationError,
    InputError,
    UsageError,
    CheckpointFormatError,
    FileNotFoundError,
)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _write_json(path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


def _load_config_file(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return doc


def _pick(args_value, config: dict, section: str, key: str, default):
    """Merge precedence: explicit flag > config file > default."""
    if args_value is not None:
        return args_value
    return config.get(section, {}).get(key, default)


def _resolve_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("DALA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigurationError(f"DALA_SEED must be an integer, got {env!r}") from exc
    return 0


def _synthetic_spec(args, config: dict, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        side=int(_pick(args.side, config, "synthetic", "side", 32)),
        samples_per_class=int(
            _pick(args.samples_per_class, config, "synthetic", "samples_per_class", 100)
        ),
        noise=float(_pick(args.noise, config, "synthetic", "noise", 0.08)),
        stripes=bool(_pick(args.stripes, config, "synthetic", "stripes", True)),
        quadrant=int(_pick(args.quadrant, config, "synthetic", "quadrant", 3)),
        seed=seed,
    ).validate()


def _split_spec(args, config: dict, seed: int) -> SplitSpec:
    return SplitSpec(
        train=float(_pick(getattr(args, "train_ratio", None), config, "split", "train", 0.6)),
        val=float(_pick(getattr(args, "val_ratio", None), config, "split", "val", 0.1)),
        test=float(_pick(getattr(args, "test_ratio", None), config, "split", "test", 0.3)),
        stratified=bool(_pick(getattr(args, "stratified", None), config, "split", "stratified", True)),
        seed=seed,
    ).validate()


def _backbone_config(args, config: dict, num_classes: int) -> BackboneConfig:
    section = dict(config.get("backbone", {}))
    section["num_classes"] = num_classes
    if getattr(args, "input_side", None) is not None:
        section["input_side"] = int(args.input_side)
    base = toy_backbone_config(
        input_side=int(section.get("input_side", 32)), num_classes=num_classes
    )
    allowed = set(base.to_dict())
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(f"unknown backbone config keys: {sorted(unknown)}")
    merged = {**base.to_dict(), **section}
    backbone = BackboneConfig.from_dict(merged)

    stage = getattr(args, "stage", None)
    if stage is not None:
        if stage in ("none", "baseline"):
            backbone = replace(backbone, attention_stages=())
        else:
            try:
                stage_num = int(stage)
            except ValueError as exc:
                raise ConfigurationError(f"invalid stage {stage!r}") from exc
            if not 1 <= stage_num <= len(backbone.stage_widths):
                raise ConfigurationError(
                    f"stage must be in 1..{len(backbone.stage_widths)} or 'none', got {stage}"
                )
            backbone = replace(backbone, attention_stages=(stage_num,))
    return backbone.validate()


def _train_config(args, config: dict, backbone: BackboneConfig, seed: int) -> TrainConfig:
    aug_section = config.get("augment", {})
    rotation = float(_pick(getattr(args, "rotation", None), config, "augment", "rotation_degrees", 15.0))
    flip = float(_pick(getattr(args, "flip_probability", None), config, "augment", "flip_probability", 0.5))
    if getattr(args, "no_augment", False):
        rotation, flip = 0.0, 0.0
    augment = None
    if rotation > 0 or flip > 0:
        augment = AugmentSpec(
            rotation_degrees=rotation,
            flip_probability=flip,
            seed=int(aug_section.get("seed", seed)),
        ).validate()
    return TrainConfig(
        backbone=backbone,
        learning_rate=float(_pick(args.learning_rate, config, "train", "learning_rate", 1e-4)),
        batch_size=int(_pick(args.batch_size, config, "train", "batch_size", 32)),
        epochs=int(_pick(args.epochs, config, "train", "epochs", 50)),
        seed=seed,
        augment=augment,
    ).validate()


def _dt_config(args, config: dict, seed: int) -> camlib.DtGradCamConfig:
    def flag(name, default):
        return _pick(getattr(args, name, None), config, "cam", name, default)

    return camlib.DtGradCamConfig(
        ensemble_size=int(flag("ensemble_size", 10)),
        sigma=float(flag("sigma", 0.1)),
        w_start=float(flag("w_start", 1.0)),
        w_end=float(flag("w_end", 0.5)),
        otsu_enabled=not bool(flag("no_otsu", False)),
        morphology_enabled=not bool(flag("no_morph", False)),
        morph_kernel=int(flag("morph_kernel", 3)),
        seed=seed,
    ).validate()


def _load_split_manifests(args, config: dict, seed: int):
    """Either scan+split a dataset root or load pre-split manifests."""
    if getattr(args, "data", None) is not None:
        manifest = scan_directory(args.data)
        spec = _split_spec(args, config, seed)
        return stratified_split(manifest, spec)
    names = ("train_manifest", "val_manifest", "test_manifest")
    paths = [getattr(args, n, None) for n in names]
    if any(p is None for p in paths[:2]):
        raise ConfigurationError("provide --data, or --train-manifest and --val-manifest")
    train_m = DatasetManifest.load(paths[0])
    val_m = DatasetManifest.load(paths[1])
    test_m = DatasetManifest.load(paths[2]) if paths[2] else None
    return train_m, val_m, test_m


# --- commands ---------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    spec = _synthetic_spec(args, config, seed)
    out = Path(args.out)
    manifest = generate_synthetic(spec, out)
    manifest.relocated(".").save(out / "manifest.json")  # relocatable tree
    _log(
        f"generate: wrote {len(manifest)} samples over classes "
        f"{manifest.class_names} to {out} (checksum {manifest.checksum[:12]})"
    )
    print(str(out / "manifest.json"))
    return 0


def cmd_split(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    spec = _split_spec(args, config, seed)
    manifest = scan_directory(args.data)
    train_m, val_m, test_m = stratified_split(manifest, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train_m), ("val", val_m), ("test", test_m)):
        part.save(out / f"{name}.json")
        _log(f"split: {name} -> {len(part)} samples")
    print(str(out))
    return 0


def cmd_train(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    train_m, val_m, test_m = _load_split_manifests(args, config, seed)
    backbone = _backbone_config(args, config, num_classes=len(train_m.class_names))
    train_config = _train_config(args, config, backbone, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "checkpoint.ckpt"
    _log(
        f"train: variant {backbone.label}, lr={train_config.learning_rate}, "
        f"batch={train_config.batch_size}, epochs={train_config.epochs}, seed={seed}"
    )
    model, report = train(train_config, train_m, val_m, checkpoint_path=checkpoint, log=_log)
    payload = report.to_dict()
    payload["variant"] = backbone.label
    payload["train_checksum"] = train_m.checksum
    payload["val_checksum"] = val_m.checksum
    _write_json(out / "train_report.json", payload)
    if test_m is not None:
        test_m.save(out / "test.json")
    _log(
        f"train: best val accuracy {report.best_val_accuracy:.3f} "
        f"at epoch {report.best_epoch}; checkpoint {checkpoint}"
    )
    print(str(out / "train_report.json"))
    return 0


def cmd_sweep(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    stages = [int(s) for s in str(args.stages).split(",") if s.strip()]
    train_m, val_m, test_m = _load_split_manifests(args, config, seed)
    if test_m is None:
        raise ConfigurationError("sweep needs a test split (--data or --test-manifest)")
    backbone = _backbone_config(args, config, num_classes=len(train_m.class_names))
    train_config = _train_config(args, config, backbone, seed)
    sweep = stage_sweep(train_config, stages, train_m, val_m, test_m, log=_log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep.json", sweep)
    table = sweep_table_text(sweep)
    atomic_write_bytes(out / "sweep.txt", table.encode())
    print(table, end="")
    return 0


def cmd_eval(args) -> int:
    config = _load_config_file(args)
    model = load_model(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else scan_directory(args.data)
    x, y = load_arrays(manifest, model.config.input_side)
    report, preds, scores = evaluate_model(model, x, y, class_names=manifest.class_names)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report)
    _write_csv(out / "metrics.csv", report_csv_header(report), [report_csv_row(report)])
    pred_header = ["index", "image", "truth", "prediction"] + [
        f"score_{name}" for name in manifest.class_names
    ]
    pred_rows = [
        [i, manifest.entries[i].image, int(y[i]), int(preds[i])]
        + [f"{s:.9g}" for s in scores[i]]
        for i in range(len(y))
    ]
    _write_csv(out / "predictions.csv", pred_header, pred_rows)
    _log(f"eval: accuracy {report['accuracy']:.3f} over {report['num_samples']} samples")
    print(str(out / "metrics.json"))
    return 0


def _run_id(args, seed: int) -> str:
    if args.run_id is not None:
        return args.run_id
    return time.strftime("%Y%m%d-%H%M%S") + f"-seed{seed}"


def cmd_explain(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    dt_config = _dt_config(args, config, seed)
    methods = ("gradcam", "dt") if args.method == "both" else (args.method,)

    model = load_model(args.checkpoint)
    side = model.config.input_side
    image = load_and_preprocess(args.image, target_side=side)
    base_rgb = load_png(args.image)
    if base_rgb.ndim == 2:
        base_rgb = np.stack([base_rgb] * 3, axis=-1)
    if base_rgb.shape[:2] != (side, side):
        from .imageops import bilinear_resize

        base_rgb = np.floor(
            bilinear_resize(base_rgb.astype(np.float64), side, side) + 0.5
        ).astype(np.uint8)

    if args.target_class is not None:
        target_class = int(args.target_class)
    else:
        from .training import predict_scores

        target_class = int(predict_scores(model, image.data[None]).argmax(axis=1)[0])

    out = Path(args.out) / _run_id(args, seed)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method in methods:
        if method == "gradcam":
            heat = camlib.gradcam(model, image, target_class, args.stage)
            heat = camlib.upsample_bilinear(heat, side, side)
            stem = "gradcam"
        else:
            heat = camlib.dt_gradcam(
                model, image, target_class, args.stage, config=dt_config, upsample_to=(side, side)
            )
            stem = "dtgradcam"
        camlib.save_cam_csv(out / f"{stem}.csv", heat)
        written += camlib.render_heatmap(
            heat,
            out / f"{stem}.png",
            base_image=base_rgb,
            overlay_path=out / f"{stem}_overlay.png",
        )
        written.append(str(out / f"{stem}.csv"))
    _write_json(
        out / "explain.json",
        {
            "checkpoint": str(args.checkpoint),
            "image": str(args.image),
            "target_class": target_class,
            "target_class_forced": args.target_class is not None,
            "methods": list(methods),
            "stage": args.stage,
            "seed": seed,
            "cam": {
                "ensemble_size": dt_config.ensemble_size,
                "sigma": dt_config.sigma,
                "w_start": dt_config.w_start,
                "w_end": dt_config.w_end,
                "otsu_enabled": dt_config.otsu_enabled,
                "morphology_enabled": dt_config.morphology_enabled,
                "morph_kernel": dt_config.morph_kernel,
            },
        },
    )
    _log(f"explain: wrote {len(written) + 1} artifacts to {out}")
    print(str(out))
    return 0


def cmd_cam_eval(args) -> int:
    config = _load_config_file(args)
    seed = _resolve_seed(args, config)
    dt_config = _dt_config(args, config, seed)
    model = load_model(args.checkpoint)
    side = model.config.input_side
    manifest = DatasetManifest.load(args.manifest) if args.manifest else scan_directory(args.data)

    target_class = int(args.target_class) if args.target_class is not None else 0
    if not 0 <= target_class < len(manifest.class_names):
        raise ConfigurationError(f"target class {target_class} out of range")

    rows = {"gradcam": [], "dt": []}
    skipped = 0
    evaluated = 0
    for entry in manifest.entries:
        if entry.label != target_class or entry.mask is None:
            continue
        truth = load_mask(manifest, entry, side)
        if not truth.any():
            skipped += 1
            continue
        image = load_and_preprocess(manifest.image_path(entry), target_side=side)
        plain = camlib.upsample_bilinear(
            camlib.gradcam(model, image, target_class, args.stage), side, side
        )
        dt = camlib.dt_gradcam(
            model, image, target_class, args.stage, config=dt_config, upsample_to=(side, side)
        )
        rows["gradcam"].append(
            heatmap_metrics(binarize_cam_for_eval(plain, "fixed"), truth)
        )
        rows["dt"].append(heatmap_metrics(binarize_cam_for_eval(dt, "support"), truth))
        evaluated += 1

    if evaluated == 0:
        raise InputError("no samples with non-empty masks for the target class")
    if skipped:
        _log(f"cam-eval: skipped {skipped} sample(s) with empty masks")

    def mean(metric_rows, field):
        return float(np.mean([getattr(m, field) for m in metric_rows]))

    result = {
        "target_class": manifest.class_names[target_class],
        "samples": evaluated,
        "skipped_empty_masks": skipped,
        "methods": {
            name: {
                "iou": mean(metric_rows, "iou"),
                "dice": mean(metric_rows, "dice"),
                "recall": mean(metric_rows, "recall"),
                "f1": mean(metric_rows, "f1"),
            }
            for name, metric_rows in rows.items()
        },
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "cam_metrics.json", result)

    headers = ["Method", "IoU", "Dice", "Recall", "F1"]
    lines = [
        [name, *(f"{result['methods'][name][k]:.4f}" for k in ("iou", "dice", "recall", "f1"))]
        for name in ("gradcam", "dt")
    ]
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(headers)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    table = "\n".join([fmt(headers), fmt(["-" * w for w in widths]), *map(fmt, lines)]) + "\n"
    atomic_write_bytes(out / "cam_metrics.txt", table.encode())
    print(table, end="")
    return 0


# --- parser -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dala",
        description=(
            "Attention-gated residual classifier with dynamic-threshold "
            "class-activation explanations"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="global seed (default: $DALA_SEED or 0)")

    p = sub.add_parser("generate", help="write a synthetic localization dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--side", type=int)
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--noise", type=float)
    p.add_argument("--quadrant", type=int)
    p.add_argument("--stripes", action="store_true", default=None, dest="stripes")
    p.add_argument("--no-stripes", action="store_false", default=None, dest="stripes")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="scan a dataset tree and write split manifests")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (class directories)")
    p.add_argument("--out", required=True, help="directory for train/val/test.json")
    p.add_argument("--train-ratio", type=float, dest="train_ratio")
    p.add_argument("--val-ratio", type=float, dest="val_ratio")
    p.add_argument("--test-ratio", type=float, dest="test_ratio")
    p.add_argument("--no-stratify", action="store_false", default=None, dest="stratified")
    p.set_defaults(func=cmd_split)

    def train_flags(p):
        p.add_argument("--data", help="dataset root; split internally at 6:1:3")
        p.add_argument("--train-manifest", dest="train_manifest")
        p.add_argument("--val-manifest", dest="val_manifest")
        p.add_argument("--test-manifest", dest="test_manifest")
        p.add_argument("--input-side", type=int, dest="input_side")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--learning-rate", type=float, dest="learning_rate")
        p.add_argument("--rotation", type=float)
        p.add_argument("--flip-probability", type=float, dest="flip_probability")
        p.add_argument("--no-augment", action="store_true", dest="no_augment")

    p = sub.add_parser("train", help="train one model and checkpoint the best epoch")
    common(p)
    train_flags(p)
    p.add_argument("--stage", help="attention insertion stage 1..4, or 'none'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train per-stage insertion variants on fixed data")
    common(p)
    train_flags(p)
    p.add_argument("--stages", default="1,2,3,4", help="comma-separated stages")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root to scan")
    p.add_argument("--manifest", help="manifest JSON (e.g. a test split)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    def cam_flags(p):
        p.add_argument("--stage", default=None, help="target stage (default: deepest)")
        p.add_argument("--N", "--ensemble-size", type=int, dest="ensemble_size")
        p.add_argument("--sigma", type=float)
        p.add_argument("--w-start", type=float, dest="w_start")
        p.add_argument("--w-end", type=float, dest="w_end")
        p.add_argument("--no-otsu", action="store_true", default=None, dest="no_otsu")
        p.add_argument("--no-morph", action="store_true", default=None, dest="no_morph")
        p.add_argument("--morph-kernel", type=int, dest="morph_kernel")

    p = sub.add_parser("explain", help="write heatmap artifacts for one image")
    common(p)
    cam_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["gradcam", "dt", "both"], default="both")
    p.add_argument("--class", type=int, dest="target_class", help="force the target class")
    p.add_argument("--run-id", dest="run_id", help="artifact namespace (default: timestamp+seed)")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("cam-eval", help="score CAM methods against ground-truth masks")
    common(p)
    cam_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--class", type=int, dest="target_class", help="class with masks (default 0)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        _log(f"error: {exc}")
        return 2
    except Exception as exc:  # runtime failure
        _log(f"failure: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
