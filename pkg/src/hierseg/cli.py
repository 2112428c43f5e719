"""``hierseg`` command line: synthetic data, mask generation, training, evaluation,
observer comparison and overlay rendering.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
Results go to files; progress and errors go to stderr as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import yaml

from hierseg import data as D
from hierseg.hierarchy import HierarchyError, default_occlusal_hierarchy, load_hierarchy
from hierseg.io import read_png_gray, read_png_rgb, write_png, write_text
from hierseg.masks import MFP, MTP, MaskFormatError, MaskShapeError, decode_label_mask, render_overlay
from hierseg.metrics import (METRICS, AggregationError, aggregate_folds, binary_confusion, image_metrics,
                             mean_std, metric_values)
from hierseg.model import DualBranchNet, NetConfig, WeightFormatError, load_weights, predict, save_weights
from hierseg.training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("hierseg")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad paths, flags or files; maps to exit code 2."""


INPUT_ERRORS = (InputError, D.DatasetError, D.FoldConfigError, D.SynthConfigError, MaskFormatError,
                MaskShapeError, WeightFormatError, AggregationError, HierarchyError, OSError)

DEFAULTS: dict[str, dict] = {
    "synth": dict(patients=8, size=64, overlap=0.6, seed=0, out=None),
    "gen-masks": dict(data=None, out=None, seed=0),
    "train": dict(data=None, masks=None, out=None, folds=4, fold=None, epochs=50, batch_size=5, lr=1e-4,
                  patience=3, decay=2.0, min_lr=1e-6, seed=0, augment=True, optimizer="sgd",
                  reduction="sum", epsilon=1e-6, hierarchy=None),
    "eval": dict(data=None, masks=None, weights=None, out=None, seed=0, save_predictions=False),
    "compare": dict(reference=None, annotators=None, timing=None, out=None, seed=0),
    "render": dict(pred=None, target=None, images=None, out=None, cls="full", seed=0),
}
REQUIRED = {
    "synth": ("out",), "gen-masks": ("data",), "train": ("data", "out"),
    "eval": ("data", "weights", "out"), "compare": ("reference", "annotators", "out"),
    "render": ("pred", "target", "out"),
}


def _kv(**fields) -> str:
    return " ".join(f"{k}={v}" for k, v in fields.items())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file whose keys mirror the flag names")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierseg", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--overlap", type=float, help="target |AP & Td & Rd| / |AP|")

    p = sub.add_parser("gen-masks", help="derive MTP/MFP label masks from AP and OFR masks")
    _common(p)
    p.add_argument("--data")

    p = sub.add_parser("train", help="train one model per fold")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--masks", help="root holding mask_*.png (default: --data)")
    p.add_argument("--folds", type=int, help="number of patient-wise folds")
    p.add_argument("--fold", type=int, help="train only this fold")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--decay", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adamw"))
    p.add_argument("--reduction", choices=("sum", "mean"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--hierarchy", help="hierarchy YAML (default: bundled occlusal hierarchy)")

    p = sub.add_parser("eval", help="evaluate each fold's model on its validation patients")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--masks")
    p.add_argument("--weights", help="directory written by train")
    p.add_argument("--save-predictions", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("compare", help="score annotator FULL-contact masks against references")
    _common(p)
    p.add_argument("--reference")
    p.add_argument("--annotators", help="one subdirectory of masks per annotator")
    p.add_argument("--timing", help="CSV with columns annotator,image,seconds")

    p = sub.add_parser("render", help="red/green/yellow overlays of prediction vs target")
    _common(p)
    p.add_argument("--pred")
    p.add_argument("--target")
    p.add_argument("--images", help="photographs to composite under the overlay")
    p.add_argument("--class", dest="cls", choices=("full", "mtp", "mfp"))
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, Mapping):
            raise InputError(f"config {args.config} must be a mapping")
        for key, value in loaded.items():
            key = str(key).replace("-", "_")
            key = "cls" if key == "class" else key
            if key not in cfg:
                raise InputError(f"unknown key {key!r} in {args.config} for {command}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise InputError(f"{command}: missing required setting(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def write_run_record(out: Path, command: str, cfg: dict) -> None:
    lines = [f"command={command}"] + [f"{k}={cfg[k]}" for k in sorted(cfg)]
    write_text(out / f"{command}.config.txt", "\n".join(lines) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg: dict) -> None:
    out = Path(cfg["out"])
    synth = D.SynthConfig(patients=int(cfg["patients"]), size=int(cfg["size"]),
                          overlap=float(cfg["overlap"]), seed=int(cfg["seed"]))
    records = D.synth_generate(synth)
    D.write_dataset(records, out)
    write_run_record(out, "synth", cfg)
    n_img = sum(len(r.images) for r in records)
    print(_kv(patients=len(records), images=n_img, size=synth.size, out=out))


def cmd_gen_masks(cfg: dict) -> None:
    data = Path(cfg["data"])
    out = Path(cfg["out"]) if cfg.get("out") else data
    records = D.load_dataset(data)
    n = 0
    counts = np.zeros(3, dtype=np.int64)
    for rec in records:
        try:
            labels = D.pipeline_labels(rec)
        except MaskShapeError as exc:
            raise InputError(f"patient {rec.patient_id}: {exc}") from None
        D.write_label_masks(rec.patient_id, labels, out)
        for lab in labels.values():
            counts += np.bincount(lab.ravel(), minlength=3)
        n += len(labels)
    write_run_record(out, "gen-masks", cfg)
    print(_kv(masks=n, background_px=counts[0], mtp_px=counts[MTP], mfp_px=counts[MFP], out=out))


def read_folds(path: Path) -> dict[str, int]:
    folds = {}
    for line in path.read_text().splitlines():
        if line.strip():
            pid, _, fold = line.partition("=")
            folds[pid.strip()] = int(fold)
    return folds


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                       patience=int(cfg["patience"]), decay=float(cfg["decay"]), min_lr=float(cfg["min_lr"]),
                       seed=int(cfg["seed"]), augment=bool(cfg["augment"]), optimizer=str(cfg["optimizer"]),
                       reduction=str(cfg["reduction"]), epsilon=float(cfg["epsilon"]))


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    hierarchy = load_hierarchy(cfg["hierarchy"]) if cfg.get("hierarchy") else default_occlusal_hierarchy()
    records = D.load_dataset(cfg["data"], cfg.get("masks"), require_labels=True)
    k = int(cfg["folds"])
    folds = D.kfold_split([r.patient_id for r in records], k, int(cfg["seed"]))
    chosen = range(k) if cfg.get("fold") is None else [int(cfg["fold"])]
    if any(not 0 <= f < k for f in chosen):
        raise InputError(f"fold {cfg['fold']} outside 0..{k - 1}")
    try:
        tcfg = _train_config(cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None

    write_text(out / "folds.txt", "".join(f"{pid}={f}\n" for pid, f in sorted(folds.items())))
    write_run_record(out, "train", cfg)
    for fold in chosen:
        val_ids = [p for p, f in folds.items() if f == fold]
        train_ids = [p for p, f in folds.items() if f != fold]
        train_set = D.examples_for(records, train_ids)
        val_set = D.examples_for(records, val_ids)
        net = DualBranchNet(NetConfig(num_leaves=hierarchy.num_leaves), seed=tcfg.seed + fold)
        log.info(_kv(event="fold_start", fold=fold, train_images=len(train_set), val_images=len(val_set)))
        result = train(net, train_set, val_set, hierarchy, tcfg,
                       on_epoch=lambda r, f=fold: log.info(f"fold={f} " + r.to_line()))
        save_weights(result.net, out / f"fold{fold}.weights")
        write_text(out / f"fold{fold}.log", result.log_text())
        best = result.log[result.best_epoch - 1]
        print(_kv(fold=fold, best_epoch=result.best_epoch, val_dice_mtp=best.val_dice_mtp,
                  val_dice_mfp=best.val_dice_mfp, val_dice_full=best.val_dice_full,
                  weights=out / f"fold{fold}.weights"))


def evaluate_folds(records, fold_of_patient: Mapping[str, int],
                   predictors: Mapping[int, Callable[[np.ndarray], np.ndarray]]):
    """Score every validation image of every fold that has a predictor."""
    per_image, fold_of_image, predictions = {}, {}, {}
    for rec in records:
        fold = fold_of_patient.get(rec.patient_id)
        if fold not in predictors:
            continue
        if rec.labels is None:
            raise D.DatasetError(f"patient {rec.patient_id} has no label masks")
        for cond in sorted(rec.images):
            key = f"{rec.patient_id}/{cond}"
            pred = predictors[fold](rec.images[cond].astype(np.float64) / 255.0)
            per_image[key] = image_metrics(pred, rec.labels[cond])
            fold_of_image[key] = fold
            predictions[key] = pred
    return aggregate_folds(per_image, fold_of_image, folds=sorted(predictors)), predictions


def cmd_eval(cfg: dict) -> None:
    wdir = Path(cfg["weights"])
    out = Path(cfg["out"])
    folds_path = wdir / "folds.txt"
    if not folds_path.exists():
        raise InputError(f"missing fold assignment {folds_path}")
    folds = read_folds(folds_path)
    records = D.load_dataset(cfg["data"], cfg.get("masks"), require_labels=True)
    ids = {r.patient_id for r in records}
    if set(folds) != ids:
        raise InputError(f"fold assignment in {folds_path} does not match the dataset's patients")
    hierarchy = default_occlusal_hierarchy()
    predictors = {}
    for f in sorted(set(folds.values())):
        path = wdir / f"fold{f}.weights"
        if path.exists():
            net = load_weights(path, num_leaves=hierarchy.num_leaves)
            predictors[f] = lambda img, net=net: predict(net, img)
    if not predictors:
        raise InputError(f"no fold*.weights in {wdir} for the folds in {folds_path}")

    report, predictions = evaluate_folds(records, folds, predictors)
    write_text(out / "report.txt", report.to_table())
    write_text(out / "report.json", report.to_json())
    write_text(out / "per_image.jsonl", report.rows_jsonl())
    if cfg.get("save_predictions"):
        for key, pred in predictions.items():
            pid, cond = key.split("/")
            D.write_label_masks(pid, {cond: pred}, out / "predictions")
    write_run_record(out, "eval", cfg)
    for cls, per_metric in report.summary.items():
        print(_kv(**{"class": cls}, **{m.lower(): per_metric[m][0] for m in METRICS}))


def _mask_files(root: Path) -> dict[str, Path]:
    return {str(p.relative_to(root)): p for p in sorted(root.rglob("*.png"))}


def _read_full(path: Path) -> np.ndarray:
    try:
        return decode_label_mask(read_png_gray(path)) != 0
    except MaskFormatError as exc:
        raise MaskFormatError(f"{path}: {exc}") from None


def read_timing(path: Path) -> dict[str, list[float]]:
    times = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"annotator", "seconds"} <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns annotator,image,seconds")
        for row in reader:
            times[row["annotator"]].append(float(row["seconds"]))
    return times


def compare_annotators(reference: Mapping[str, np.ndarray], annotators: Mapping[str, Mapping[str, np.ndarray]],
                       timing: Mapping[str, list[float]] | None = None) -> dict[str, dict]:
    """Per-annotator FULL-contact metrics, mean and sample std over images."""
    table = {}
    for name, masks in annotators.items():
        unmatched = sorted(set(masks) ^ set(reference))
        if unmatched:
            raise InputError(f"annotator {name}: unmatched files {unmatched}")
        per_image = [metric_values(binary_confusion(masks[k], reference[k])) for k in sorted(reference)]
        row = {}
        for m in METRICS:
            mean, std, n = mean_std(r[m] for r in per_image)
            row[m] = {"mean": mean, "std": std, "n": n}
        if timing is not None and timing.get(name):
            row["seconds_per_image"] = float(np.mean(timing[name]))
        table[name] = row
    return table


def compare_table(table: Mapping[str, dict]) -> str:
    def cell(v):
        if v["mean"] is None:
            return "undefined"
        return f"{v['mean']:.3f} ({v['std']:.3f})"

    lines = [f"{'annotator':<16}" + "".join(f"{m:>18}" for m in METRICS) + f"{'time/image (s)':>16}"]
    for name, row in table.items():
        t = row.get("seconds_per_image")
        lines.append(f"{name:<16}" + "".join(f"{cell(row[m]):>18}" for m in METRICS)
                     + f"{('-' if t is None else f'{t:.2f}'):>16}")
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: dict) -> None:
    ref_root = Path(cfg["reference"])
    ann_root = Path(cfg["annotators"])
    for p in (ref_root, ann_root):
        if not p.is_dir():
            raise InputError(f"not a directory: {p}")
    reference = {k: _read_full(p) for k, p in _mask_files(ref_root).items()}
    if not reference:
        raise InputError(f"no PNG masks under {ref_root}")
    subdirs = sorted(p for p in ann_root.iterdir() if p.is_dir())
    sources = {p.name: p for p in subdirs} if subdirs else {ann_root.name: ann_root}
    annotators = {name: {k: _read_full(p) for k, p in _mask_files(root).items()} for name, root in sources.items()}
    for name, masks in annotators.items():
        for key in set(masks) & set(reference):
            if masks[key].shape != reference[key].shape:
                raise InputError(f"annotator {name}: {key} is {masks[key].shape}, reference {reference[key].shape}")
    timing = read_timing(Path(cfg["timing"])) if cfg.get("timing") else None
    table = compare_annotators(reference, annotators, timing)
    out = Path(cfg["out"])
    write_text(out / "compare.txt", compare_table(table))
    write_text(out / "compare.json", json.dumps(table, indent=2, sort_keys=True))
    write_run_record(out, "compare", cfg)
    for name, row in table.items():
        print(_kv(annotator=name, **{m.lower(): row[m]["mean"] for m in METRICS}))


def _select(labels: np.ndarray, cls: str) -> np.ndarray:
    return {"full": labels != 0, "mtp": labels == MTP, "mfp": labels == MFP}[cls]


def cmd_render(cfg: dict) -> None:
    pred_root, target_root = Path(cfg["pred"]), Path(cfg["target"])
    if pred_root.is_file():
        pairs = {pred_root.name: (pred_root, target_root)}
    else:
        preds = _mask_files(pred_root)
        if not preds:
            raise InputError(f"no PNG masks under {pred_root}")
        missing = [k for k in preds if not (target_root / k).exists()]
        if missing:
            raise InputError(f"no target mask for {missing}")
        pairs = {k: (p, target_root / k) for k, p in preds.items()}
    out = Path(cfg["out"])
    images = Path(cfg["images"]) if cfg.get("images") else None
    for key, (pp, tp) in pairs.items():
        pred = _select(decode_label_mask(read_png_gray(pp)), cfg["cls"])
        target = _select(decode_label_mask(read_png_gray(tp)), cfg["cls"])
        if pred.shape != target.shape:
            raise InputError(f"{key}: prediction {pred.shape} and target {target.shape} differ")
        base = None
        if images is not None:
            rel = Path(key)
            for cand in (images / rel.with_name(rel.name.replace("mask_", "image_", 1)), images / rel):
                if cand.exists():
                    base = read_png_rgb(cand)
                    break
            if base is not None and base.shape[:2] != pred.shape:
                raise InputError(f"{key}: photograph {base.shape[:2]} and masks {pred.shape} differ")
        write_png(out / Path(key).with_suffix(".overlay.png"), render_overlay(pred, target, base))
    write_run_record(out, "render", cfg)
    print(_kv(overlays=len(pairs), out=out))


COMMANDS = {"synth": cmd_synth, "gen-masks": cmd_gen_masks, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args.command, args)
        log.info(_kv(command=args.command, **cfg))
        COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(_kv(error="diverged", detail=repr(str(exc))), file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(_kv(error=type(exc).__name__, detail=repr(str(exc))), file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
