"""Command-line operator surface.

Commands: train, translate, evaluate, ablate, dump-attention, synth-export.
Every run directory receives a manifest (config snapshot, dataset
fingerprint, toolkit version, timestamps) sufficient to reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import __version__
from . import attention as att
from .data import DatasetPair, export_dataset, load_unpaired_dataset, synth_shapes
from .errors import ToolkitError
from .losses import read_loss_csv
from .metrics import (
    DOMAIN_X_LABEL,
    DOMAIN_Y_LABEL,
    KidMode,
    classifier_accuracy,
    extract_features,
    kid_report_for_translation,
    train_domain_classifier,
)
from .networks import load_checkpoint
from .training import (
    PRESET_NAMES,
    TrainConfig,
    ablation_preset,
    apply_thread_limits,
    config_to_meta,
    fit,
    load_config_file,
    translate,
)

SYNTH_TEST_SEED_OFFSET = 10_000


@dataclass
class RunManifest:
    config_snapshot: dict
    dataset_fingerprint: str
    toolkit_version: str
    started_at: float
    finished_at: float | None = None
    status: str = "running"

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        _atomic_write_text(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path

    def finalize(self, out_dir: str, status: str = "completed") -> str:
        self.finished_at = time.time()
        self.status = status
        return self.write(out_dir)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_write_csv(path: str, header: list[str], rows: list[list]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="random seed override")
    parser.add_argument("--config", type=str, default=None, help="flat key=value config file")
    parser.add_argument("--out", type=str, required=True, help="output directory")
    parser.add_argument("--synthetic", action="store_true", help="use the built-in shapes dataset")
    parser.add_argument("--synthetic-count", type=int, default=200, help="images per synthetic domain")
    parser.add_argument("--data", type=str, default=None, help="dataset root (trainA/trainB[/testA/testB])")
    parser.add_argument("--preset", type=str, default=None, help=f"ablation preset: {', '.join(PRESET_NAMES)}")
    parser.add_argument("--steps", type=int, default=None, help="total training steps override")
    parser.add_argument(
        "--deterministic",
        type=str,
        choices=("on", "off"),
        default=None,
        help="single-threaded bit-reproducible mode (default on)",
    )


def _resolve_config(args) -> TrainConfig:
    cfg = ablation_preset(args.preset) if args.preset else TrainConfig()
    if args.config:
        cfg = load_config_file(args.config, base=cfg)
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic == "on"
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _load_train_dataset(args, cfg: TrainConfig) -> DatasetPair:
    if args.synthetic:
        return synth_shapes(args.synthetic_count, cfg.image_size, cfg.seed)
    if not args.data:
        raise ToolkitError("either --data ROOT or --synthetic is required")
    return load_unpaired_dataset(args.data, cfg.image_size, flip_augment=True, split="train")


def _load_test_dataset(args, image_size: int, seed: int) -> DatasetPair:
    if args.synthetic:
        count = max(args.synthetic_count // 2, 16)
        return synth_shapes(count, image_size, seed + SYNTH_TEST_SEED_OFFSET)
    if not args.data:
        raise ToolkitError("either --data ROOT or --synthetic is required")
    return load_unpaired_dataset(args.data, image_size, flip_augment=False, split="test")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_train_dataset(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(
        config_snapshot=config_to_meta(cfg),
        dataset_fingerprint=dataset.fingerprint(),
        toolkit_version=__version__,
        started_at=time.time(),
    )
    manifest.write(args.out)
    try:
        ckpt = fit(cfg, dataset, args.out)
    except ToolkitError as exc:
        manifest.finalize(args.out, status=f"failed: {exc}")
        raise
    manifest.finalize(args.out)
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_translate(args) -> int:
    _, meta = load_checkpoint(args.checkpoint)
    image_size = int(meta.get("image_size", 64))
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    dataset = _load_test_dataset(args, image_size, seed)
    images = dataset.domain_x if args.direction == "X2Y" else dataset.domain_y
    if args.limit:
        images = images[: args.limit]
    result = translate(args.checkpoint, images, args.direction, emit_attention=args.emit_attention)
    out_root = os.path.join(args.out, args.direction)
    os.makedirs(out_root, exist_ok=True)
    if args.emit_attention:
        translated, maps = result
    else:
        translated, maps = result, None
    from .data import _to_png  # PNG encoding shared with dataset export

    for i in range(translated.shape[0]):
        _to_png(translated[i]).save(os.path.join(out_root, f"{i:06d}_fake.png"))
        _to_png(images[i]).save(os.path.join(out_root, f"{i:06d}_real.png"))
        if maps is not None:
            att.save_heatmap_png(
                maps[i], os.path.join(out_root, f"{i:06d}_attn.png"), image=images[i : i + 1]
            )
    print(f"translated {translated.shape[0]} images -> {out_root}")
    return 0


def _evaluate_direction(
    direction: str,
    checkpoint: str,
    test_set: DatasetPair,
    clf,
    modes: list[KidMode],
    subset_size: int | None,
    reps: int,
    seed: int,
):
    sources = test_set.domain_x if direction == "X2Y" else test_set.domain_y
    targets = test_set.domain_y if direction == "X2Y" else test_set.domain_x
    target_label = DOMAIN_Y_LABEL if direction == "X2Y" else DOMAIN_X_LABEL
    translated = translate(checkpoint, sources, direction)
    fake_feats = extract_features(translated, clf)
    target_feats = extract_features(targets, clf)
    source_feats = extract_features(sources, clf)
    rng = np.random.default_rng(seed)
    row: dict = {"direction": direction}
    for mode in modes:
        report = kid_report_for_translation(
            fake_feats, target_feats, source_feats, mode, subset_size, reps, rng
        )
        tag = "kid_target" if mode is KidMode.TARGET_ONLY else "kid_joint"
        row[f"{tag}_mean_x100"] = f"{report.mean:.6f}"
        row[f"{tag}_std_x100"] = f"{report.std:.6f}"
        row["subset_size"] = report.subset_size
        row["repetitions"] = report.repetitions
        row["extractor_id"] = report.extractor_id
    row["accuracy"] = f"{classifier_accuracy(translated, target_label, clf):.6f}"
    return row


def cmd_evaluate(args) -> int:
    models, meta = load_checkpoint(args.checkpoint)
    del models
    image_size = int(meta.get("image_size", 64))
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    apply_thread_limits(bool(meta.get("deterministic", True)))
    test_set = _load_test_dataset(args, image_size, seed)
    train_set = _load_train_dataset(args, TrainConfig(image_size=image_size, seed=seed))
    clf = train_domain_classifier(train_set, seed=seed)
    modes = [KidMode.TARGET_ONLY]
    if args.mode == "both":
        modes.append(KidMode.SOURCE_AND_TARGET)
    attention_state = "enabled" if meta.get("attention_enabled") else "identity"
    rows = []
    for direction in ("X2Y", "Y2X"):
        row = _evaluate_direction(
            direction, args.checkpoint, test_set, clf, modes, args.subset_size, args.reps, seed
        )
        row["attention"] = attention_state
        rows.append(row)
    header = list(rows[0].keys())
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "evaluation.csv")
    _atomic_write_csv(report_path, header, [[r[k] for k in header] for r in rows])
    for row in rows:
        print(", ".join(f"{k}={row[k]}" for k in header))
    print(f"report: {report_path}")
    return 0


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    dataset = _load_train_dataset(args, base)
    test_set = _load_test_dataset(args, base.image_size, base.seed)
    fingerprint = dataset.fingerprint()
    os.makedirs(args.out, exist_ok=True)
    clf = train_domain_classifier(dataset, seed=base.seed)
    target_feats = extract_features(test_set.domain_y, clf)
    source_feats = extract_features(test_set.domain_x, clf)

    header = [
        "preset", "status", "kid_target_mean_x100", "kid_target_std_x100",
        "accuracy", "trace_l1_vs_cyclegan", "dataset_fingerprint",
    ]
    rows = []
    traces: dict[str, list[float]] = {}
    for preset in PRESET_NAMES:
        cfg = ablation_preset(
            preset,
            **{
                f.name: getattr(base, f.name)
                for f in dataclasses.fields(TrainConfig)
                if f.name not in ("attention_enabled", "attention_mode", "fm_loss_enabled", "fm_tap_layer")
            },
        )
        run_dir = os.path.join(args.out, preset.lower().replace("$", "").replace("/", "-"))
        try:
            ckpt = fit(cfg, dataset, run_dir)
            losses = read_loss_csv(os.path.join(run_dir, "losses.csv"))
            traces[preset] = [row["totalGen"] for row in losses]
            translated = translate(ckpt, test_set.domain_x, "X2Y")
            fake_feats = extract_features(translated, clf)
            rng = np.random.default_rng(base.seed)
            report = kid_report_for_translation(
                fake_feats, target_feats, source_feats, KidMode.TARGET_ONLY,
                args.subset_size, args.reps, rng,
            )
            acc = classifier_accuracy(translated, DOMAIN_Y_LABEL, clf)
            rows.append([preset, "ok", f"{report.mean:.6f}", f"{report.std:.6f}", f"{acc:.6f}", "", fingerprint])
        except ToolkitError as exc:
            rows.append([preset, f"failed: {exc}", "", "", "", "", fingerprint])
    ref = traces.get("CycleGAN")
    for row in rows:
        trace = traces.get(row[0])
        if ref is not None and trace is not None:
            dist = float(np.abs(np.array(trace) - np.array(ref)).sum())
            row[5] = f"{dist:.6f}"
    report_path = os.path.join(args.out, "ablation.csv")
    _atomic_write_csv(report_path, header, rows)
    for row in rows:
        print(", ".join(str(v) for v in row[:6]))
    print(f"report: {report_path}")
    return 0


def cmd_dump_attention(args) -> int:
    models, meta = load_checkpoint(args.checkpoint)
    image_size = int(meta.get("image_size", 64))
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    test_set = _load_test_dataset(args, image_size, seed)
    mode = att.AttentionMode(meta.get("attention_mode", "SUM"))
    method = att.UpsampleMethod(meta.get("upsample_method", "NEAREST"))
    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, test_set.n_x, test_set.n_y)
    with torch.no_grad():
        for i in range(count):
            for direction, imgs, disc in (
                ("X2Y", test_set.domain_x, models.D_X),
                ("Y2X", test_set.domain_y, models.D_Y),
            ):
                img = imgs[i : i + 1]
                _, amap = att.attend(disc, img, mode, method)
                att.save_heatmap_png(
                    amap,
                    os.path.join(args.out, f"{i:06d}_{direction}_real_attn.png"),
                    image=img,
                    colormap=args.colormap,
                )
    print(f"wrote {2 * count} attention panels -> {args.out}")
    return 0


def cmd_synth_export(args) -> int:
    seed = args.seed if args.seed is not None else 0
    train = synth_shapes(args.synthetic_count, args.image_size, seed)
    test = synth_shapes(
        max(args.synthetic_count // 2, 16), args.image_size, seed + SYNTH_TEST_SEED_OFFSET
    )
    export_dataset(train, args.out, split="train")
    export_dataset(test, args.out, split="test")
    print(f"exported {train.n_x}+{train.n_y} train and {test.n_x}+{test.n_y} test images -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spagan",
        description="Spatial-attention unpaired image-to-image translation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a test split with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=("X2Y", "Y2X"), default="X2Y")
    p.add_argument("--emit-attention", action="store_true")
    p.add_argument("--limit", type=int, default=0, help="translate at most N images")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="KID and classifier accuracy for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("target-only", "both"), default="both")
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run every ablation preset and consolidate results")
    _add_common(p)
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="write attention heatmap panels for test images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--colormap", choices=("gray", "heat"), default="gray")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("synth-export", help="export the synthetic dataset as PNG folders")
    _add_common(p)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
