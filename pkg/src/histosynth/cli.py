"""Command-line interface: one workspace directory per experiment.

Workspace layout:

    <out>/data/           PNGs + manifests (generate-phantom)
    <out>/translation/    bundle checkpoints + training/validation logs
    <out>/segmentation/   pre-trained segmenter fold checkpoints + CV report
    <out>/pseudolabels/<method>/   masks, per-fold masks, translated images
    <out>/reports/        evaluation CSV/JSON + qualitative grid PNG

Every command is deterministic for a fixed config and seed.
"""
import json
from pathlib import Path

import click
import numpy as np

from .configs import PRESET_NAMES, ExperimentConfig, preset_experiment
from .data import DatasetManifest, load_image_png, save_image_png, Image
from .diffusion import make_schedule
from .pipeline import (
    METHOD_ADAPTATION,
    METHOD_BASELINE,
    METHOD_TUTORSHIP,
    Experiment,
    emit_qualitative_grid,
    evaluate_pseudo_labels,
    load_pseudo_label_set,
    load_truth,
    run_adaptation,
    run_pretrained_baseline,
    run_tutorship,
    save_pseudo_label_set,
    write_report,
)
from .phantoms import build_experiment
from .segmentation import cross_validate, save_fold, write_cv_report
from .translation import TranslationTrainer, build_bundle, load_checkpoint
from .translation import translate as translate_image

METHODS = (METHOD_TUTORSHIP, METHOD_ADAPTATION, "baseline")


def _load_config(config_path, seed):
    cfg = ExperimentConfig.load(config_path)
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
        cfg.segmentation.seed = seed
    return cfg


def _workspace(out):
    ws = Path(out)
    ws.mkdir(parents=True, exist_ok=True)
    return ws


def _experiment(cfg, ws) -> Experiment:
    data_dir = ws / "data"
    man_l = DatasetManifest.load(data_dir / "l_manifest.json")
    man_u = DatasetManifest.load(data_dir / "u_manifest.json")
    bundle_path = ws / "translation" / "best.ckpt"
    seg_dir = ws / "segmentation"
    return Experiment(
        labeled_manifest=man_l,
        unlabeled_manifest=man_u,
        output_dir=ws,
        seed=cfg.seed,
        bundle_path=str(bundle_path) if bundle_path.exists() else None,
        segmenter_dir=str(seg_dir) if any(seg_dir.glob("fold_*.ckpt")) else None,
    )


@click.group()
def main():
    """Unpaired phantom translation and pseudo-label generation."""


@main.command("make-config")
@click.option("--preset", type=click.Choice(PRESET_NAMES), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True, help="Config JSON to write.")
def make_config(preset, seed, out_path):
    """Writes one of the preset experiment configs."""
    cfg = preset_experiment(preset, seed=seed)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    cfg.save(out_path)
    click.echo(f"wrote {preset} config to {out_path}")


@main.command("generate-phantom")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", "out", type=click.Path(), required=True, help="Workspace directory.")
def generate_phantom_cmd(config_path, seed, out):
    """Generates the labeled pool, unlabeled pool, and sequestered truth."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    man_l, man_u = build_experiment(
        cfg.spec_L, cfg.styles_L, cfg.spec_U, cfg.styles_U,
        counts=cfg.counts, seed=cfg.seed, out_dir=ws / "data",
    )
    click.echo(
        f"generated {len(man_l.entries)} labeled and {len(man_u.entries)} unlabeled images "
        f"in {ws / 'data'}"
    )


@main.command("train-translation")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
def train_translation_cmd(config_path, seed, out):
    """Trains the translation bundle on the unpaired train splits."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    data_dir = ws / "data"
    man_l = DatasetManifest.load(data_dir / "l_manifest.json")
    man_u = DatasetManifest.load(data_dir / "u_manifest.json")

    imgs_l = [man_l.load_image(e).data for e in man_l.subset("train").entries]
    imgs_u = [man_u.load_image(e).data for e in man_u.subset("train").entries]
    val_l = [man_l.load_image(e).data for e in man_l.subset("val").entries]

    schedule = make_schedule(
        T=cfg.schedule["T"], beta_min=cfg.schedule["beta_min"], beta_max=cfg.schedule["beta_max"]
    )
    bundle = build_bundle(arch=cfg.arch, schedule=schedule, weights=cfg.loss_weights, seed=cfg.seed)
    train_cfg = cfg.train
    train_cfg.checkpoint_dir = str(ws / "translation")
    trainer = TranslationTrainer(bundle, train_cfg)
    records, best_epoch = trainer.fit(imgs_l, imgs_u, val_l, log_dir=ws / "translation")
    last = records[-1]
    click.echo(
        f"trained {train_cfg.epochs} epochs; best epoch {best_epoch} "
        f"(final cycle SSIM {last.ssim_mean:.3f} ± {last.ssim_std:.3f})"
    )


@main.command("train-segmentation")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
def train_segmentation_cmd(config_path, seed, out):
    """Cross-validates the pre-trained segmenter on the labeled pool."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    man_l = DatasetManifest.load(ws / "data" / "l_manifest.json")
    items = [(man_l.load_image(e).data, man_l.load_mask(e)) for e in man_l.entries]
    results, aggregates = cross_validate(cfg.segmentation, items)
    seg_dir = ws / "segmentation"
    seg_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        save_fold(r, seg_dir / f"fold_{r.fold_index}.ckpt")
    write_cv_report(results, seg_dir / "cv_report.csv")
    axon_mean, axon_std = aggregates["dice_axon"]
    click.echo(f"cross-validated {len(results)} folds; axon dice {axon_mean:.3f} ± {axon_std:.3f}")


@main.command("translate")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--direction", type=click.Choice(["LtoU", "UtoL"]), required=True)
@click.option("--output", "output_path", type=click.Path(), required=True)
def translate_cmd(config_path, seed, out, image_path, direction, output_path):
    """Translates a single PNG through the trained bundle."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    bundle = load_checkpoint(ws / "translation" / "best.ckpt")
    img = load_image_png(image_path, pixel_size_um=1.0)
    moved = translate_image(
        bundle, img.data, "A2B" if direction == "LtoU" else "B2A", seed=cfg.seed
    )
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    save_image_png(Image(data=moved, pixel_size_um=img.pixel_size_um), output_path)
    click.echo(f"translated {image_path} {direction} -> {output_path}")


@main.command("pseudolabel")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
@click.option("--method", type=click.Choice(METHODS), required=True)
def pseudolabel_cmd(config_path, seed, out, method):
    """Generates pseudo labels for the unlabeled pool with one strategy."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    exp = _experiment(cfg, ws)
    if method == METHOD_TUTORSHIP:
        pls = run_tutorship(
            exp, seg_config=cfg.segmentation, save_dir=ws / "pseudolabels" / "tutorship_folds"
        )
    elif method == METHOD_ADAPTATION:
        pls = run_adaptation(exp)
    else:
        pls = run_pretrained_baseline(exp)
    out_dir = ws / "pseudolabels" / pls.method
    save_pseudo_label_set(pls, out_dir, pixel_size_um=exp.unlabeled_manifest.pixel_size_um)
    click.echo(f"wrote {len(pls.masks)} pseudo labels to {out_dir}")


@main.command("evaluate")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
def evaluate_cmd(config_path, seed, out):
    """Scores every generated pseudo-label set against the sequestered truth."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    exp = _experiment(cfg, ws)
    sets = []
    for method in (METHOD_TUTORSHIP, METHOD_ADAPTATION, METHOD_BASELINE):
        set_dir = ws / "pseudolabels" / method / "set.json"
        if set_dir.exists():
            sets.append(load_pseudo_label_set(set_dir.parent))
    if not sets:
        raise click.ClickException("no pseudo-label sets found; run `pseudolabel` first")
    truth = load_truth(exp)
    report = evaluate_pseudo_labels(sets, truth, experiment_name=cfg.name)
    reports_dir = ws / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, csv_path=reports_dir / "evaluation.csv",
                 json_path=reports_dir / "evaluation.json")
    for r in report["rows"]:
        if r["metric"] == "dice":
            flag = " *" if r["best"] else ""
            click.echo(f"{r['method']:>20}  {r['class']:>6}  dice {r['formatted']}{flag}")
    click.echo(f"wrote {reports_dir / 'evaluation.csv'}")


@main.command("report")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), required=True)
def report_cmd(config_path, seed, out):
    """Emits the qualitative four-panel grid for every pseudo-label set."""
    cfg = _load_config(config_path, seed)
    ws = _workspace(out)
    exp = _experiment(cfg, ws)
    sets = []
    for method in (METHOD_TUTORSHIP, METHOD_ADAPTATION, METHOD_BASELINE):
        set_json = ws / "pseudolabels" / method / "set.json"
        if set_json.exists():
            sets.append(load_pseudo_label_set(set_json.parent))
    if not sets:
        raise click.ClickException("no pseudo-label sets found; run `pseudolabel` first")
    reports_dir = ws / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    grid_path = reports_dir / "qualitative_grid.png"
    emit_qualitative_grid(exp, sets, cfg.n_grid_examples, grid_path)
    click.echo(f"wrote {grid_path}")


if __name__ == "__main__":
    main()
