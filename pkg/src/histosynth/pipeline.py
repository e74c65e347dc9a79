"""Pseudo-labeling strategies and their evaluation reports.

Three ways to label the unlabeled pool:

* tutorship — translate labeled images into the unlabeled style, train a
  proxy segmenter on {translated image, original label} under k-fold CV,
  ensemble-predict on the raw unlabeled images;
* adaptation — translate unlabeled images into the labeled style and apply
  the segmenter pre-trained on labeled data;
* pretrained-baseline — apply the pre-trained segmenter directly.

Evaluation compares every strategy's masks against sequestered ground truth
and emits a per-method x per-class x per-metric report plus a qualitative
four-panel image grid.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import metrics
from .data import DatasetManifest, load_mask_png, save_image_png, save_mask_png, Image
from .errors import MissingBundle, MissingTruth
from .segmentation import (
    CLASS_NAMES,
    FOREGROUND_CLASSES,
    SegConfig,
    cross_validate,
    ensemble_predict,
    load_fold,
    predict,
    save_fold,
    write_cv_report,
)
from .translation import load_checkpoint, translate

METHOD_TUTORSHIP = "tutorship"
METHOD_ADAPTATION = "adaptation"
METHOD_BASELINE = "pretrained-baseline"

# overlay palette: background transparent, axon red, myelin blue
OVERLAY_COLORS = {1: (220, 50, 50), 2: (60, 90, 220)}
OVERLAY_ALPHA = 0.5
GRID_MARGIN = 2


@dataclass
class Experiment:
    """Everything a pseudo-labeling run needs, with truth kept out of reach.

    The unlabeled manifest must not carry masks; its ground truth lives in a
    separate manifest referenced by ``truth_path`` and is only read at
    evaluation time.
    """

    labeled_manifest: DatasetManifest
    unlabeled_manifest: DatasetManifest
    output_dir: Path
    seed: int = 0
    bundle_path: str = None
    segmenter_dir: str = None

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.labeled_manifest.pixel_size_um != self.unlabeled_manifest.pixel_size_um:
            raise ValueError(
                "labeled and unlabeled manifests must share a pixel size; "
                "resample the labeled pool first"
            )
        if not self.labeled_manifest.has_masks():
            raise ValueError("labeled manifest must carry a mask for every image")
        if any(e.mask is not None for e in self.unlabeled_manifest.entries):
            raise ValueError("unlabeled manifest must not carry masks")

    def load_bundle(self):
        if self.bundle_path is None:
            raise MissingBundle("experiment has no trained translation bundle")
        return load_checkpoint(self.bundle_path)

    def load_segmenter(self):
        if self.segmenter_dir is None:
            raise MissingBundle("experiment has no pre-trained segmenter directory")
        folds = sorted(Path(self.segmenter_dir).glob("fold_*.ckpt"))
        if not folds:
            raise MissingBundle(f"no fold checkpoints under {self.segmenter_dir}")
        return [load_fold(p) for p in folds]

    def unlabeled_images(self):
        man = self.unlabeled_manifest
        return [(e.image, man.load_image(e).data) for e in man.entries]

    def labeled_items(self):
        man = self.labeled_manifest
        return [(e.image, man.load_image(e).data, man.load_mask(e)) for e in man.entries]


@dataclass
class PseudoLabelSet:
    """One strategy's masks for every unlabeled image, plus provenance."""

    method: str
    image_names: list
    masks: list
    provenance: dict = field(default_factory=dict)
    translated_images: list = None  # same order as image_names, when a path translates
    per_fold_masks: dict = None  # fold index -> list of masks (tutorship only)

    def __post_init__(self):
        if len(self.image_names) != len(self.masks):
            raise ValueError("one mask per unlabeled image required")


def _rel(path, base) -> str:
    """Workspace-relative rendering of a path, keeping reruns byte-identical."""
    if path is None:
        return None
    try:
        return str(Path(path).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return Path(path).name


def _bundle_translator(exp: Experiment, direction: str, seed_offset: int):
    bundle = exp.load_bundle()

    def translator(img: np.ndarray, index: int) -> np.ndarray:
        return translate(bundle, img, direction, seed=exp.seed + seed_offset + index)

    return translator


def run_pretrained_baseline(exp: Experiment, folds=None) -> PseudoLabelSet:
    """Applies the pre-trained segmenter directly to the raw unlabeled pool."""
    folds = folds if folds is not None else exp.load_segmenter()
    names, masks = [], []
    for name, img in exp.unlabeled_images():
        names.append(name)
        masks.append(ensemble_predict(folds, img))
    return PseudoLabelSet(
        method=METHOD_BASELINE,
        image_names=names,
        masks=masks,
        provenance={"segmenter_dir": _rel(exp.segmenter_dir, exp.output_dir), "n_folds": len(folds)},
    )


def run_adaptation(exp: Experiment, folds=None, translator=None) -> PseudoLabelSet:
    """Translates unlabeled images into the labeled style, then applies the
    pre-trained segmenter. Masks stay in the source image geometry."""
    folds = folds if folds is not None else exp.load_segmenter()
    if translator is None:
        translator = _bundle_translator(exp, "B2A", seed_offset=50_000)
    names, masks, translated = [], [], []
    for i, (name, img) in enumerate(exp.unlabeled_images()):
        moved = translator(img, i)
        names.append(name)
        translated.append(moved)
        masks.append(ensemble_predict(folds, moved))
    return PseudoLabelSet(
        method=METHOD_ADAPTATION,
        image_names=names,
        masks=masks,
        provenance={"bundle": _rel(exp.bundle_path, exp.output_dir),
                    "segmenter_dir": _rel(exp.segmenter_dir, exp.output_dir)},
        translated_images=translated,
    )


def run_tutorship(
    exp: Experiment, seg_config: SegConfig = None, translator=None, save_dir=None
) -> PseudoLabelSet:
    """Trains a proxy segmenter on translated labeled images, predicts on the
    raw unlabeled pool, and keeps per-fold predictions for spread reporting."""
    if translator is None:
        translator = _bundle_translator(exp, "A2B", seed_offset=60_000)
    seg_config = seg_config or SegConfig(seed=exp.seed)

    synthetic_items = []
    synthetic_images = []
    for i, (name, img, mask) in enumerate(exp.labeled_items()):
        moved = translator(img, i)
        synthetic_items.append((moved, mask))
        synthetic_images.append((name, moved))
    fold_results, _ = cross_validate(seg_config, synthetic_items)

    if save_dir is not None:
        save_dir = Path(save_dir)
        save_dir.mkdir(parents=True, exist_ok=True)
        for r in fold_results:
            save_fold(r, save_dir / f"fold_{r.fold_index}.ckpt")
        write_cv_report(fold_results, save_dir / "cv_report.csv")

    names, masks = [], []
    per_fold = {r.fold_index: [] for r in fold_results}
    fold_models = {r.fold_index: r.build_model() for r in fold_results}
    for name, img in exp.unlabeled_images():
        names.append(name)
        masks.append(ensemble_predict(fold_results, img))
        for idx, model in fold_models.items():
            per_fold[idx].append(predict(model, img))
    return PseudoLabelSet(
        method=METHOD_TUTORSHIP,
        image_names=names,
        masks=masks,
        provenance={
            "bundle": _rel(exp.bundle_path, exp.output_dir),
            "synthetic_size": len(synthetic_items),
            "n_folds": len(fold_results),
        },
        translated_images=[img for _, img in synthetic_images],
        per_fold_masks=per_fold,
    )


def load_truth(exp: Experiment):
    """Loads the sequestered ground truth aligned with the unlabeled manifest."""
    man = exp.unlabeled_manifest
    if man.truth_path is None:
        raise MissingTruth("unlabeled manifest does not reference a truth manifest")
    truth_file = (man.root or Path(".")) / man.truth_path
    if not truth_file.exists():
        raise MissingTruth(f"truth manifest {truth_file} not found")
    truth_man = DatasetManifest.load(truth_file)
    by_image = {e.image: e for e in truth_man.entries}
    gts = []
    for e in man.entries:
        if e.image not in by_image:
            raise MissingTruth(f"no ground truth for {e.image}")
        gts.append(truth_man.load_mask(by_image[e.image]))
    return gts


def _per_image_scores(masks, gts, cls):
    out = {"dice": [], "sensitivity": [], "specificity": []}
    for pred, gt in zip(masks, gts):
        c = metrics.confusion(pred, gt, cls)
        out["dice"].append(metrics.dice(c))
        out["sensitivity"].append(metrics.sensitivity(c))
        out["specificity"].append(metrics.specificity(c))
    return out


def evaluate_pseudo_labels(sets, truth_masks, experiment_name: str = "experiment") -> dict:
    """Per method x class x metric report with mean ± std formatting.

    Methods with per-fold predictions aggregate across folds (each fold first
    averaged over images); the others aggregate across images. The best mean
    per (class, metric) block is flagged.
    """
    truth_masks = list(truth_masks)
    if not truth_masks:
        raise MissingTruth("no ground-truth masks provided")
    rows = []
    for pls in sets:
        if len(pls.masks) != len(truth_masks):
            raise ValueError(f"{pls.method}: {len(pls.masks)} masks vs {len(truth_masks)} truths")
        for cls in FOREGROUND_CLASSES:
            if pls.per_fold_masks:
                axis = "folds"
                fold_means = {m: [] for m in ("dice", "sensitivity", "specificity")}
                for fold_idx in sorted(pls.per_fold_masks):
                    scores = _per_image_scores(pls.per_fold_masks[fold_idx], truth_masks, cls)
                    for m, vals in scores.items():
                        fold_means[m].append(float(np.mean(vals)))
                per_metric = fold_means
            else:
                axis = "images"
                per_metric = _per_image_scores(pls.masks, truth_masks, cls)
            for metric_name, values in per_metric.items():
                mean, std = metrics.aggregate(values)
                rows.append(
                    {
                        "experiment": experiment_name,
                        "method": pls.method,
                        "class": CLASS_NAMES[cls],
                        "metric": metric_name,
                        "mean": mean,
                        "std": std,
                        "formatted": metrics.format_mean_std(mean, std),
                        "aggregated_over": axis,
                        "best": False,
                    }
                )

    for cls_name in CLASS_NAMES.values():
        for metric_name in ("dice", "sensitivity", "specificity"):
            block = [r for r in rows if r["class"] == cls_name and r["metric"] == metric_name]
            if block:
                max(block, key=lambda r: r["mean"])["best"] = True

    summary = {}
    for r in rows:
        summary.setdefault(r["class"], {}).setdefault(r["method"], {})[r["metric"]] = r["formatted"]
    return {
        "experiment": experiment_name,
        "std_kind": "population",
        "rows": rows,
        "summary": summary,
    }


def write_report(report: dict, csv_path=None, json_path=None):
    if csv_path is not None:
        import csv as csv_mod

        with open(csv_path, "w", newline="") as f:
            writer = csv_mod.writer(f)
            writer.writerow(["experiment", "method", "class", "metric", "mean", "std",
                             "aggregated_over", "best"])
            for r in report["rows"]:
                writer.writerow(
                    [r["experiment"], r["method"], r["class"], r["metric"],
                     f"{r['mean']:.6f}", f"{r['std']:.6f}", r["aggregated_over"],
                     int(r["best"])]
                )
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)


def _to_rgb(img: np.ndarray) -> np.ndarray:
    gray = np.clip(np.asarray(img, dtype=np.float32), 0, 1)
    return np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)


def _overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rgb = _to_rgb(img).astype(np.float32)
    for cls, color in OVERLAY_COLORS.items():
        sel = mask == cls
        for c in range(3):
            rgb[:, :, c][sel] = (1 - OVERLAY_ALPHA) * rgb[:, :, c][sel] + OVERLAY_ALPHA * color[c]
    return rgb.astype(np.uint8)


def emit_qualitative_grid(exp: Experiment, sets, n_examples: int, path, folds=None):
    """Four-panel grid per example: original | translated | pre-trained
    prediction | pseudo label (with class-color overlays). One block of rows
    per strategy; example selection is deterministic given the seed."""
    sets = list(sets)
    if n_examples < 1 or not sets:
        raise ValueError("need at least one example and one pseudo-label set")
    folds = folds if folds is not None else exp.load_segmenter()
    images = exp.unlabeled_images()
    n_examples = min(n_examples, len(images))
    rng = np.random.default_rng(exp.seed)
    chosen = sorted(rng.choice(len(images), size=n_examples, replace=False).tolist())

    h, w = images[chosen[0]][1].shape
    rows = len(sets) * n_examples
    canvas = np.full(
        (rows * h + (rows + 1) * GRID_MARGIN, 4 * w + 5 * GRID_MARGIN, 3), 255, dtype=np.uint8
    )
    row = 0
    for pls in sets:
        for idx in chosen:
            name, img = images[idx]
            baseline_pred = ensemble_predict(folds, img)
            translated = (
                pls.translated_images[idx]
                if pls.translated_images is not None and idx < len(pls.translated_images)
                else img
            )
            panels = [
                _to_rgb(img),
                _to_rgb(translated),
                _overlay(img, baseline_pred),
                _overlay(img, pls.masks[idx]),
            ]
            y0 = GRID_MARGIN + row * (h + GRID_MARGIN)
            for p, panel in enumerate(panels):
                x0 = GRID_MARGIN + p * (w + GRID_MARGIN)
                ph, pw = panel.shape[:2]
                canvas[y0 : y0 + ph, x0 : x0 + pw] = panel
            row += 1
    PILImage.fromarray(canvas, mode="RGB").save(path)
    return path


def save_pseudo_label_set(pls: PseudoLabelSet, out_dir, pixel_size_um: float = None):
    """Persists masks (and any translated images) as PNG plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, mask in zip(pls.image_names, pls.masks):
        stem = Path(name).stem
        mask_name = f"{stem}_pseudo.png"
        save_mask_png(mask, out_dir / mask_name)
        entries.append({"image": name, "mask": mask_name})
    if pls.translated_images is not None:
        tdir = out_dir / "translated"
        tdir.mkdir(exist_ok=True)
        for i, img in enumerate(pls.translated_images):
            stem = Path(pls.image_names[i]).stem if i < len(pls.image_names) else f"extra_{i}"
            save_image_png(Image(data=img, pixel_size_um=pixel_size_um or 1.0), tdir / f"{stem}_translated.png")
    if pls.per_fold_masks:
        for fold_idx, fold_masks in sorted(pls.per_fold_masks.items()):
            fdir = out_dir / f"fold_{fold_idx}"
            fdir.mkdir(exist_ok=True)
            for name, mask in zip(pls.image_names, fold_masks):
                save_mask_png(mask, fdir / f"{Path(name).stem}_pseudo.png")
    with open(out_dir / "set.json", "w") as f:
        json.dump(
            {
                "method": pls.method,
                "provenance": pls.provenance,
                "entries": entries,
                "n_folds": len(pls.per_fold_masks) if pls.per_fold_masks else 0,
                "has_translated": pls.translated_images is not None,
            },
            f, indent=2, sort_keys=True,
        )


def load_pseudo_label_set(out_dir) -> PseudoLabelSet:
    out_dir = Path(out_dir)
    with open(out_dir / "set.json") as f:
        meta = json.load(f)
    names = [e["image"] for e in meta["entries"]]
    masks = [load_mask_png(out_dir / e["mask"]) for e in meta["entries"]]
    per_fold = None
    if meta.get("n_folds", 0):
        per_fold = {}
        for fold_idx in range(meta["n_folds"]):
            fdir = out_dir / f"fold_{fold_idx}"
            per_fold[fold_idx] = [
                load_mask_png(fdir / f"{Path(n).stem}_pseudo.png") for n in names
            ]
    translated = None
    if meta.get("has_translated"):
        from .data import load_image_png

        tdir = out_dir / "translated"
        translated = [
            load_image_png(tdir / f"{Path(n).stem}_translated.png", 1.0).data for n in names
        ]
    return PseudoLabelSet(
        method=meta["method"],
        image_names=names,
        masks=masks,
        provenance=meta.get("provenance", {}),
        translated_images=translated,
        per_fold_masks=per_fold,
    )
