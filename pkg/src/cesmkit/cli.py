"""Single executable exposing the pipeline as subcommands.

Exit codes: 0 success, 1 domain error (bad data, unreadable files,
infeasible splits...), 2 usage error.  Diagnostics go to stderr, data to
files or stdout.  Every randomized step takes an explicit seed; nothing is
seeded from the clock, so reruns with identical inputs and flags produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    CropSpec,
    apply_transform,
    breast_mask,
    extract_crop,
    read_annotations,
    sample_normal_crop,
    sample_transform,
    stratified_patient_split,
)
from .denoise import NlmParams, nl_means
from .errors import ToolkitError
from .evaluation import evaluate_runs, read_predictions, render_metrics_figure, render_report
from .gan import GeneratorModel, LossWeights, ToyDiscriminator, cyclegan_toy_step
from .grid import ImageGrid, load_image, save_png
from .ingest import (
    Energy,
    Label,
    StudyRecord,
    build_pair_manifest,
    parse_filename,
    read_manifest,
    render_filename,
    write_manifest,
)
from .registration import (
    SearchParams,
    Translation,
    apply_translation,
    emit_overlay,
    read_result,
    register_two_level,
    write_result,
)
from .translator import (
    FORMAT_VERSION,
    TrainConfig,
    UNetConfig,
    infer_translator,
    init_params,
    load_model,
    save_model,
    train_end2end,
    train_translator,
)
from .translator.gradcheck import run_gradcheck

log = logging.getLogger("cesmkit")

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".pgm"}
CROP_KINDS = ("LE", "LED", "DES")


@dataclass(frozen=True)
class GlobalOptions:
    seed: int = 0
    threads: int = 0
    verbosity: str = "normal"

    def __post_init__(self):
        if self.threads < 0:
            raise ToolkitError(f"threads must be >= 0, got {self.threads}")


def main(argv=None) -> int:
    code = dispatch(sys.argv[1:] if argv is None else argv)
    return code


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/diagnostics
        return int(exc.code or 0)
    opts = GlobalOptions(seed=args.seed, threads=args.threads, verbosity=args.verbosity)
    _setup_logging(opts.verbosity)
    try:
        return args.func(args, opts)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


def _setup_logging(verbosity: str) -> None:
    level = {"quiet": logging.ERROR, "normal": logging.INFO, "debug": logging.DEBUG}[verbosity]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cesmkit", description="LE/DES image pipeline toolkit"
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"cesmkit {__version__} (model format {FORMAT_VERSION})",
    )
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed (default 0)")
    parser.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    parser.add_argument(
        "--verbosity", choices=["quiet", "normal", "debug"], default="normal"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("pair-scan", help="scan a directory and build the pair manifest")
    p.add_argument("--dir", required=True, help="directory of study images")
    p.add_argument("--annotations", help="annotations CSV supplying labels")
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.set_defaults(func=cmd_pair_scan)

    p = sub.add_parser("register", help="align a floating DES image to its LE reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--flo", required=True)
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--viz", help="write an overlay PNG for visual QA")
    p.add_argument("--style", choices=["checkerboard", "redcyan"], default="checkerboard")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("denoise", help="non-local means denoising")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--h", dest="strength", type=float, default=10.0)
    p.add_argument("--template", type=int, default=7)
    p.add_argument("--search", type=int, default=21)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("crop", help="cut labeled LE/LED/DES crops")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--reg-dir", help="directory of registration JSONs named P<id>_<side>_<view>.json")
    p.add_argument("--led-dir", help="directory of denoised LE images named <LE stem>.png")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--normal-per-image", type=int, default=0,
                   help="random tissue crops per unannotated pair")
    p.add_argument("--min-tissue", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None, help="overrides the global seed")
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("split", help="patient-level stratified split")
    p.add_argument("--crops", required=True, help="crop directory holding index.csv")
    p.add_argument("--train", type=float, default=0.70)
    p.add_argument("--val", type=float, default=0.15)
    p.add_argument("--test", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="split manifest JSON (default <crops>/split.json)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="offline synchronized augmentation")
    p.add_argument("--crops", required=True, help="crop directory with <set>/<label> layout")
    p.add_argument("--set", dest="subset", default="train", choices=["train", "val", "test"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, required=True, help="augmented copies per crop")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-translator", help="train the LE-to-DES translator")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--train-dir", required=True)
    p.add_argument("--val-dir")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--mode", choices=["pretrain", "end2end", "cyclegan-toy"], default="pretrain")
    p.set_defaults(func=cmd_train_translator)

    p = sub.add_parser("infer-translator", help="produce a virtual DES image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer_translator)

    p = sub.add_parser("eval", help="aggregate accuracy/F1 over prediction runs")
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True, help="text report to write")
    p.add_argument("--per-run", action="store_true")
    p.add_argument("--fig", help="also render a metrics figure PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of translator ops")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


# --- handlers ------------------------------------------------------------


def cmd_pair_scan(args, opts) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        raise ToolkitError(f"not a directory: {root}")
    labels = _image_labels(args.annotations) if args.annotations else {}
    records = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in IMAGE_EXTS or not path.is_file():
            continue
        try:
            key = parse_filename(path.name)
        except ToolkitError:
            log.debug("skipping non-study file %s", path.name)
            continue
        label = labels.get((key.patient_id, key.side, key.view), Label.UNLABELED)
        records.append(StudyRecord(key, str(path), label))
    pairs, unmatched = build_pair_manifest(records)
    write_manifest(records, args.out)
    log.info("%d records, %d pairs, %d unmatched", len(records), len(pairs), len(unmatched))
    for rec in unmatched:
        log.info("unmatched: %s", render_filename(rec.key))
    return 0


def _image_labels(path):
    """Image-level labels from lesion annotations (malignant wins)."""
    labels: dict[tuple, Label] = {}
    for ann in read_annotations(path):
        key = (ann.patient_id, ann.side, ann.view)
        if ann.label is Label.MALIGNANT or key not in labels:
            labels[key] = ann.label
    return labels


def cmd_register(args, opts) -> int:
    ref = load_image(args.ref)
    flo = load_image(args.flo)
    result = register_two_level(ref, flo, SearchParams(bins=args.bins))
    write_result(result, args.out)
    log.info("best translation (%d, %d), mi %.6f", result.best.tx, result.best.ty, result.mi)
    if args.viz:
        aligned, _ = apply_translation(flo, result.best, (ref.height, ref.width))
        save_png(emit_overlay(ref, aligned, args.style), args.viz)
    return 0


def cmd_denoise(args, opts) -> int:
    img = load_image(args.input)
    out = nl_means(img, NlmParams(h=args.strength, template=args.template, search=args.search))
    save_png(out, args.out)
    return 0


def cmd_crop(args, opts) -> int:
    seed = opts.seed if args.seed is None else args.seed
    records = read_manifest(args.manifest)
    annotations = read_annotations(args.annotations)
    pairs, unmatched = build_pair_manifest(records)
    if unmatched:
        log.info("ignoring %d unmatched records", len(unmatched))
    out_dir = Path(args.out_dir)
    raw_dir = out_dir / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)

    index_rows = []
    for pair in pairs:
        key = pair.le.key
        le = load_image(pair.le.path)
        translation = _pair_translation(args.reg_dir, key)
        des_aligned, _ = apply_translation(load_image(pair.des.path), translation, (le.height, le.width))
        led = _led_image(args.led_dir, pair.le.path)
        members = {"LE": le, "DES": des_aligned}
        if led is not None:
            members["LED"] = led

        specs = [
            CropSpec(center=ann.center, size=args.size, label=ann.label, source=key)
            for ann in annotations
            if (ann.patient_id, ann.side, ann.view) == (key.patient_id, key.side, key.view)
        ]
        if not specs and args.normal_per_image > 0:
            mask = breast_mask(le)
            for k in range(args.normal_per_image):
                spec = sample_normal_crop(
                    le, mask,
                    rng_seed=[_nn(seed), key.patient_id, _side_idx(key), _view_idx(key), k],
                    min_tissue=args.min_tissue, size=args.size,
                )
                specs.append(spec)

        for idx, spec in enumerate(specs):
            stem = f"P{key.patient_id}_{key.side.value}_{key.view.value}_{idx}"
            for kind in CROP_KINDS:
                if kind not in members:
                    continue
                save_png(extract_crop(members[kind], spec), raw_dir / f"{stem}_{kind}.png")
            index_rows.append(
                [stem, key.patient_id, key.side.value, key.view.value, idx, spec.label.value]
            )

    with open(out_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["stem", "patient_id", "side", "view", "idx", "label"])
        writer.writerows(index_rows)
    log.info("wrote %d crops to %s", len(index_rows), raw_dir)
    return 0


def _nn(seed: int) -> int:
    return seed & 0x7FFFFFFFFFFFFFFF


def _side_idx(key) -> int:
    return 0 if key.side.value == "L" else 1


def _view_idx(key) -> int:
    return 0 if key.view.value == "CC" else 1


def _pair_translation(reg_dir, key) -> Translation:
    if not reg_dir:
        return Translation(0, 0)
    path = Path(reg_dir) / f"P{key.patient_id}_{key.side.value}_{key.view.value}.json"
    if not path.exists():
        log.warning("no registration result for %s, using identity", path.name)
        return Translation(0, 0)
    return read_result(path)


def _led_image(led_dir, le_path) -> ImageGrid | None:
    if not led_dir:
        return None
    stem = Path(le_path).stem
    path = Path(led_dir) / f"{stem}.png"
    if not path.exists():
        raise ToolkitError(f"denoised image missing: {path}")
    return load_image(path)


def _read_index(crops_dir: Path):
    import csv as _csv

    index_path = crops_dir / "index.csv"
    if not index_path.exists():
        raise ToolkitError(f"no index.csv under {crops_dir}")
    rows = []
    with open(index_path, newline="", encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            rows.append(row)
    return rows


def cmd_split(args, opts) -> int:
    seed = opts.seed if args.seed is None else args.seed
    crops_dir = Path(args.crops)
    rows = _read_index(crops_dir)
    records = [(int(r["patient_id"]), Label(r["label"])) for r in rows]
    manifest = stratified_patient_split(records, (args.train, args.val, args.test), seed)
    out = Path(args.out) if args.out else crops_dir / "split.json"
    out.write_text(manifest.to_json() + "\n", encoding="utf-8")

    for row in rows:
        subset = manifest.assignment[int(row["patient_id"])]
        dest = crops_dir / subset.value / row["label"]
        dest.mkdir(parents=True, exist_ok=True)
        for kind in CROP_KINDS:
            src = crops_dir / "raw" / f"{row['stem']}_{kind}.png"
            if src.exists():
                shutil.copyfile(src, dest / src.name)
    counts = {s.value: 0 for s in manifest.assignment.values()}
    for row in rows:
        counts[manifest.assignment[int(row["patient_id"])].value] += 1
    log.info("split sizes: %s", counts)
    return 0


def cmd_augment(args, opts) -> int:
    seed = opts.seed if args.seed is None else args.seed
    if args.count < 1:
        raise ToolkitError(f"count must be >= 1, got {args.count}")
    src_root = Path(args.crops) / args.subset
    if not src_root.is_dir():
        raise ToolkitError(f"no such subset directory: {src_root}")
    out_root = Path(args.out) / args.subset

    groups = _crop_groups(src_root)
    draw = 0
    written = 0
    for label_dir, stem, kinds in groups:
        for j in range(args.count):
            spec = sample_transform(seed, draw)
            draw += 1
            for kind in kinds:
                img = load_image(src_root / label_dir / f"{stem}_{kind}.png")
                dest = out_root / label_dir
                dest.mkdir(parents=True, exist_ok=True)
                save_png(apply_transform(img, spec), dest / f"{stem}_aug{j}_{kind}.png")
                written += 1
    log.info("wrote %d augmented images", written)
    return 0


def _crop_groups(root: Path):
    """(label_dir, stem, kinds) for every crop group under a subset dir."""
    groups = []
    for le_path in sorted(root.rglob("*_LE.png")):
        stem = le_path.name[: -len("_LE.png")]
        label_dir = str(le_path.parent.relative_to(root))
        kinds = [k for k in CROP_KINDS if (le_path.parent / f"{stem}_{k}.png").exists()]
        groups.append((label_dir, stem, kinds))
    return groups


def _scan_pairs(root: Path):
    pairs = []
    for le_path in sorted(root.rglob("*_LE.png")):
        des_path = le_path.parent / (le_path.name[: -len("_LE.png")] + "_DES.png")
        if des_path.exists():
            pairs.append((load_image(le_path), load_image(des_path)))
    if not pairs:
        raise ToolkitError(f"no LE/DES crop pairs under {root}")
    return pairs


def _scan_labeled(root: Path):
    samples = []
    for le_path in sorted(root.rglob("*_LE.png")):
        name = le_path.parent.name
        try:
            label = Label(name)
        except ValueError:
            raise ToolkitError(f"crop parent directory {name!r} is not a class label") from None
        if label is Label.UNLABELED:
            continue
        samples.append((load_image(le_path), 1 if label is Label.MALIGNANT else 0))
    if not samples:
        raise ToolkitError(f"no labeled LE crops under {root}")
    return samples


def _load_train_config(path) -> tuple[UNetConfig, TrainConfig]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        cfg = UNetConfig(
            base_channels=int(data.get("base_channels", 8)),
            depth=int(data.get("depth", 3)),
            dropout_p=float(data.get("dropout", 0.2)),
        )
        tc = TrainConfig(
            lr=float(data.get("lr", 5e-4)),
            epochs=int(data.get("epochs", 30)),
            batch_size=int(data.get("batch_size", 8)),
            seed=int(data.get("seed", 0)),
            loss=str(data.get("loss", "L1")),
        )
    except (TypeError, ValueError) as exc:
        raise ToolkitError(f"bad training config {os.fspath(path)!r}: {exc}") from None
    return cfg, tc


def cmd_train_translator(args, opts) -> int:
    cfg, tc = _load_train_config(args.config)
    train_root = Path(args.train_dir)
    if args.mode == "pretrain":
        train_pairs = _scan_pairs(train_root)
        val_pairs = _scan_pairs(Path(args.val_dir)) if args.val_dir else None
        params, history = train_translator(train_pairs, cfg, tc, val_pairs=val_pairs)
        log.info("final losses train %.6f val %.6f", history[-1][0], history[-1][1])
    elif args.mode == "end2end":
        samples = _scan_labeled(train_root)
        params, _head, history = train_end2end(samples, cfg, tc)
        log.info("final cross-entropy %.6f", history[-1])
    else:
        params = _train_cyclegan_toy(train_root, cfg, tc)
    save_model(params, cfg, args.out)
    log.info("model written to %s", args.out)
    return 0


def _train_cyclegan_toy(train_root: Path, cfg: UNetConfig, tc: TrainConfig):
    from .translator.train import pairs_to_batches

    pairs = _scan_pairs(train_root)
    xs, ys = pairs_to_batches(pairs)
    if xs.shape[2] > 64 or xs.shape[3] > 64:
        raise ToolkitError(f"cyclegan-toy needs crops of at most 64x64, got {xs.shape[2:]}" )
    g = GeneratorModel(cfg, init_params(cfg, seed=tc.seed))
    f = GeneratorModel(cfg, init_params(cfg, seed=tc.seed + 1))
    d_x = ToyDiscriminator(seed=tc.seed + 2)
    d_y = ToyDiscriminator(seed=tc.seed + 3)
    rng = np.random.default_rng([_nn(tc.seed), 5])
    n = xs.shape[0]
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            sel = order[start : start + tc.batch_size]
            report = cyclegan_toy_step(g, f, d_x, d_y, xs[sel], ys[sel], tc.lr, LossWeights())
        log.debug("epoch %d total %.4f cycle %.4f", epoch, report.total, report.cycle)
    return g.params


def cmd_infer_translator(args, opts) -> int:
    params, cfg = load_model(args.model)
    out = infer_translator(params, cfg, load_image(args.input))
    save_png(out, args.out)
    return 0


def cmd_eval(args, opts) -> int:
    runs = read_predictions(args.preds)
    report, results = evaluate_runs(runs)
    text = render_report(report, results, per_run=args.per_run)
    Path(args.out).write_text(text, encoding="utf-8")
    if args.fig:
        render_metrics_figure(results, report, args.fig)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args, opts) -> int:
    checks = run_gradcheck(trials=args.trials, seed=opts.seed)
    failed = 0
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: max rel err {c.max_rel_err:.3e} over {c.trials} trials")
        if not c.passed:
            failed += 1
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
