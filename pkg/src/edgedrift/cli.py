"""Command line for the full pipeline.

Orchestrates dataset generation, the three training stages, evaluation and
field-error analysis.  Each training run lives in a run directory whose
``manifest.json`` records completed stages, checkpoint paths and metric
summaries; later stages read the manifest instead of scanning for files, and
stages can only complete in order warm-up -> localizer -> joint.

Configuration precedence is CLI flags > ``--config`` file (JSON or YAML) >
built-in defaults; every training command writes the effective config to the
run directory.  Exit codes: 0 on success, 2 on a contract violation, 3 when a
precondition is refused (missing prerequisite stage, unforced overwrite, held
lock).
"""

import csv
import functools
import json
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import yaml

from edgedrift.data import Dataset, load_dataset
from edgedrift.density import local_edge_density
from edgedrift.errors import ContractViolation
from edgedrift.evaluation import (
    DEFAULT_THRESHOLDS,
    DEFAULT_TOLERANCE,
    RAW,
    evaluate,
)
from edgedrift.fields import sample_with_field
from edgedrift.models import extract_confident, load_checkpoint
from edgedrift.training import (
    TrainConfig,
    joint_train,
    select_warmup,
    train_localizer,
    warmup_train,
)

MANIFEST = "manifest.json"
LOCK_FILE = ".lock"
STAGE_NAMES = {1: "warmup", 2: "localizer", 3: "joint"}


class Refusal(Exception):
    """A precondition is not met; the command declines to run (exit code 3)."""


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Refusal as exc:
            click.echo(f"refused: {exc}", err=True)
            sys.exit(3)
        except ContractViolation as exc:
            click.echo(f"contract violation: {exc}", err=True)
            sys.exit(2)

    return wrapper


@contextmanager
def _run_lock(run_dir):
    """One command per run directory; remove the lock file if a crash left it."""
    path = run_dir / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise Refusal(
            f"{path} exists: another command is using this run directory "
            "(delete the file if it is stale)"
        )
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _new_manifest(run_dir, data_dir):
    return {
        "run_id": run_dir.resolve().name,
        "dataset": str(Path(data_dir).resolve()),
        "stages": {str(k): {"name": STAGE_NAMES[k], "completed": False} for k in (1, 2, 3)},
        "evaluations": [],
    }


def _load_manifest(run_dir):
    path = run_dir / MANIFEST
    if not path.exists():
        raise Refusal(f"no manifest at {path}; run `edgedrift warmup --out {run_dir}` first")
    return json.loads(path.read_text())


def _save_manifest(run_dir, manifest):
    done = [manifest["stages"][str(k)]["completed"] for k in (1, 2, 3)]
    if (done[1] and not done[0]) or (done[2] and not done[1]):
        raise ContractViolation("stages must complete in order 1 -> 2 -> 3")
    text = json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False)
    (run_dir / MANIFEST).write_text(text + "\n")


def _require_stage(manifest, stage, command):
    entry = manifest["stages"][str(stage)]
    if not entry["completed"]:
        raise Refusal(
            f"stage {stage} ({entry['name']}) has not completed; "
            f"run `edgedrift {command}` first"
        )
    return entry


def _refuse_redo(manifest, stage, force):
    if manifest["stages"][str(stage)]["completed"] and not force:
        raise Refusal(
            f"stage {stage} ({STAGE_NAMES[stage]}) already completed in this run "
            "directory; pass --force to redo it"
        )


def _reset_stages(manifest, from_stage):
    """Redoing a stage invalidates everything downstream of it."""
    for k in range(from_stage, 4):
        manifest["stages"][str(k)] = {"name": STAGE_NAMES[k], "completed": False}
    manifest["evaluations"] = []
    manifest.pop("field_analysis", None)


def _effective_config(config_path, seed=None, tau=None, alpha4=None, beta2=None, window_n=None):
    data = {}
    if config_path is not None:
        text = Path(config_path).read_text()
        if Path(config_path).suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    cfg = TrainConfig.from_dict(data)
    plain = {k: v for k, v in {"seed": seed, "density_window": window_n}.items() if v is not None}
    if plain:
        cfg = replace(cfg, **plain)
    wopts = {"confidence": tau, "density": alpha4, "unmatched": beta2}
    wupd = {k: v for k, v in wopts.items() if v is not None}
    if wupd:
        cfg = replace(cfg, weights=replace(cfg.weights, **wupd))
    return cfg


def _echo_config(run_dir, cfg):
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    (run_dir / "config.json").write_text(text + "\n")
    click.echo(text)


def _curve_dir(run_dir):
    d = run_dir / "curves"
    d.mkdir(exist_ok=True)
    return d


def _plot_dir(root):
    d = root / "plots"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _last_metrics(curve):
    def _finite(x):
        return float(x) if np.isfinite(x) else None

    out = {}
    for split in {p.split for p in curve.points}:
        epochs, ods = curve.series(split, "ods_f")
        _, maps = curve.series(split, "map_score")
        _, losses = curve.series(split, "loss")
        out[split] = {
            "epoch": epochs[-1],
            "ods_f": _finite(ods[-1]),
            "map": _finite(maps[-1]),
            "loss": _finite(losses[-1]),
        }
    return out


def _plot_curve(curve, path, selected_epoch=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for split in sorted({p.split for p in curve.points}):
        epochs, ods = curve.series(split, "ods_f")
        ax.plot(epochs, ods, marker="o", markersize=3, label=split)
    if selected_epoch is not None:
        ax.axvline(selected_epoch, color="gray", linestyle="--", label="selected epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("ODS-F")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_series(xs, ys, xlabel, ylabel, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", markersize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_histogram(values, xlabel, png_path, csv_path, bins=24):
    counts, edges = np.histogram(values, bins=bins)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("pixels")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])


def _plot_pr(report, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    for k in range(report.precision.shape[0]):
        if not report.valid_classes[k]:
            continue
        ax.plot(report.recall[k], report.precision[k], label=f"class {k}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _gt_stack(record, split):
    labels = record.clean_labels if split == "val-clean" else record.noisy_labels
    if labels is None:
        raise ContractViolation(
            f"scene {record.scene_id} has no labels for split {split!r}"
        )
    return labels


@click.group()
def main():
    """Edge detection under spatially misaligned labels."""


@main.command()
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True,
              help="Dataset directory to create.")
@click.option("--scenes", type=int, default=200, show_default=True,
              help="Number of training scenes.")
@click.option("--val-scenes", type=int, default=None,
              help="Scenes per validation split [default: scenes // 5, at least 1].")
@click.option("--size", type=int, default=96, show_default=True)
@click.option("--classes", type=int, default=3, show_default=True)
@click.option("--noise", type=float, default=2.5, show_default=True,
              help="Mean label shift at edge pixels, in pixels.")
@click.option("--complexity", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--force", is_flag=True, help="Replace an existing dataset directory.")
@_guarded
def generate(out_dir, scenes, val_scenes, size, classes, noise, complexity, seed, force):
    """Write a synthetic dataset with train / val-noisy / val-clean splits."""
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise Refusal(f"{out_dir} exists and is not empty; pass --force to replace it")
        shutil.rmtree(out_dir)
    if val_scenes is None:
        val_scenes = max(1, scenes // 5)
    dataset = Dataset.generate(
        seed, n_train=scenes, n_val=val_scenes, size=size,
        num_classes=classes, complexity=complexity, noise_level=noise,
    )
    dataset.write(out_dir)
    plots = _plot_dir(out_dir)
    mags = []
    densities = []
    for rec in dataset.split("train"):
        edge = rec.clean_labels.any(axis=-1)  # the mask the mean is calibrated on
        m = np.hypot(rec.field.delta_i, rec.field.delta_j)[edge]
        mags.append(m)
        densities.append(local_edge_density(edge).values[edge])
    mags = np.concatenate(mags)
    densities = np.concatenate(densities)
    _plot_histogram(
        mags, "label shift (px)", plots / "shift_histogram.png", plots / "shift_histogram.csv"
    )
    order = np.argsort(densities)
    chunks = np.array_split(order, 12)
    xs = [float(densities[c].mean()) for c in chunks if len(c)]
    ys = [float(mags[c].mean()) for c in chunks if len(c)]
    _plot_series(xs, ys, "local edge density", "mean shift (px)", plots / "density_vs_shift.png")
    counts = {s: len(dataset.split(s)) for s in dataset.splits}
    click.echo(f"wrote {sum(counts.values())} scenes to {out_dir}: {counts}")
    click.echo(f"mean edge shift {mags.mean():.3f} px (target {noise})")


@main.command()
@click.option("--data", "data_dir", type=click.Path(path_type=Path, exists=True),
              required=True, help="Dataset directory from `generate`.")
@click.option("--out", "run_dir", type=click.Path(path_type=Path), required=True,
              help="Run directory; holds the manifest, checkpoints and curves.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON or YAML file of training-config overrides.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--force", is_flag=True, help="Redo the stage (resets later stages).")
@_guarded
def warmup(data_dir, run_dir, config_path, seed, force):
    """Stage 1: train the detector on the noisy labels as given."""
    run_dir.mkdir(parents=True, exist_ok=True)
    with _run_lock(run_dir):
        if (run_dir / MANIFEST).exists():
            manifest = _load_manifest(run_dir)
            _refuse_redo(manifest, 1, force)
            manifest["dataset"] = str(data_dir.resolve())
        else:
            manifest = _new_manifest(run_dir, data_dir)
        _reset_stages(manifest, 1)
        cfg = _effective_config(config_path, seed=seed)
        _echo_config(run_dir, cfg)
        dataset = load_dataset(manifest["dataset"])
        detector, _, curve = warmup_train(dataset, cfg, checkpoint_dir=run_dir / "checkpoints")
        curve_path = _curve_dir(run_dir) / "warmup.csv"
        curve.save_csv(curve_path)
        selected = select_warmup(curve)
        _plot_curve(curve, _plot_dir(run_dir) / "warmup_curves.png", selected)
        manifest["stages"]["1"] = {
            "name": "warmup",
            "completed": True,
            "config": cfg.to_dict(),
            "selected_epoch": selected,
            "selected_checkpoint": f"checkpoints/stage1/epoch_{selected}.ckpt",
            "final_checkpoint": f"checkpoints/stage1/epoch_{cfg.warmup_epochs}.ckpt",
            "curve": "curves/warmup.csv",
            "metrics": _last_metrics(curve),
        }
        _save_manifest(run_dir, manifest)
        click.echo(f"warm-up done; selected epoch {selected} of {cfg.warmup_epochs}")


@main.command("train-localizer")
@click.option("--out", "run_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--tau", type=float, default=None,
              help="Confidence threshold for the detector's trusted pixels.")
@click.option("--alpha4", type=float, default=None, help="Density-prior loss weight.")
@click.option("--window-n", type=int, default=None,
              help="Window size for the local edge density target.")
@click.option("--force", is_flag=True)
@_guarded
def train_localizer_cmd(run_dir, config_path, seed, tau, alpha4, window_n, force):
    """Stage 2: fit the shift localizer against the frozen warm-up detector."""
    with _run_lock(run_dir):
        manifest = _load_manifest(run_dir)
        stage1 = _require_stage(manifest, 1, "warmup")
        _refuse_redo(manifest, 2, force)
        _reset_stages(manifest, 2)
        cfg = _effective_config(config_path, seed=seed, tau=tau, alpha4=alpha4, window_n=window_n)
        _echo_config(run_dir, cfg)
        dataset = load_dataset(manifest["dataset"])
        detector, _ = load_checkpoint(run_dir / stage1["selected_checkpoint"], "edge_detector")
        _, info = train_localizer(detector, dataset, cfg, checkpoint_dir=run_dir / "checkpoints")
        epochs = list(range(1, cfg.localizer_epochs + 1))
        curve_path = _curve_dir(run_dir) / "localizer.csv"
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, loss in zip(epochs, info["losses"]):
                w.writerow([e, repr(loss)])
        _plot_series(epochs, info["losses"], "epoch", "field loss",
                     _plot_dir(run_dir) / "localizer_loss.png")
        manifest["stages"]["2"] = {
            "name": "localizer",
            "completed": True,
            "config": cfg.to_dict(),
            "checkpoint": f"checkpoints/stage2/epoch_{cfg.localizer_epochs}.ckpt",
            "curve": "curves/localizer.csv",
            "losses": info["losses"],
            "skipped_sup": info["skipped_sup"],
        }
        _save_manifest(run_dir, manifest)
        click.echo(
            f"localizer done; final loss {info['losses'][-1]:.4f}, "
            f"{info['skipped_sup']} items without shift supervision"
        )


@main.command()
@click.option("--out", "run_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--beta2", type=float, default=None,
              help="Weight of the unmatched-pixel suppression loss.")
@click.option("--force", is_flag=True)
@_guarded
def joint(run_dir, config_path, seed, beta2, force):
    """Stage 3: fine-tune the detector through the frozen localizer's warp."""
    with _run_lock(run_dir):
        manifest = _load_manifest(run_dir)
        stage1 = _require_stage(manifest, 1, "warmup")
        stage2 = _require_stage(manifest, 2, "train-localizer")
        _refuse_redo(manifest, 3, force)
        _reset_stages(manifest, 3)
        cfg = _effective_config(config_path, seed=seed, beta2=beta2)
        _echo_config(run_dir, cfg)
        dataset = load_dataset(manifest["dataset"])
        detector, _ = load_checkpoint(run_dir / stage1["selected_checkpoint"], "edge_detector")
        localizer, _ = load_checkpoint(run_dir / stage2["checkpoint"], "field_localizer")
        _, curve = joint_train(detector, localizer, dataset, cfg,
                               checkpoint_dir=run_dir / "checkpoints")
        curve_path = _curve_dir(run_dir) / "joint.csv"
        curve.save_csv(curve_path)
        _plot_curve(curve, _plot_dir(run_dir) / "joint_curves.png")
        manifest["stages"]["3"] = {
            "name": "joint",
            "completed": True,
            "config": cfg.to_dict(),
            "checkpoint": f"checkpoints/stage3/epoch_{cfg.joint_epochs}.ckpt",
            "curve": "curves/joint.csv",
            "metrics": _last_metrics(curve),
        }
        _save_manifest(run_dir, manifest)
        click.echo(f"joint training done after {cfg.joint_epochs} epochs")


@main.command("evaluate")
@click.option("--out", "run_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "val-noisy", "val-clean"]),
              default="val-clean", show_default=True)
@click.option("--setting", type=click.Choice(["Thin", "Raw"], case_sensitive=False),
              default="Thin", show_default=True)
@click.option("--model", type=click.Choice(["warmup", "joint"]), default=None,
              help="Checkpoint to evaluate [default: joint when complete, else warmup].")
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True,
              help="Match tolerance as a fraction of the image diagonal.")
@click.option("--thresholds", type=int, default=DEFAULT_THRESHOLDS, show_default=True)
@_guarded
def evaluate_cmd(run_dir, split, setting, model, tolerance, thresholds):
    """Score a trained detector against a split's labels."""
    setting = setting.capitalize()
    with _run_lock(run_dir):
        manifest = _load_manifest(run_dir)
        if model is None:
            model = "joint" if manifest["stages"]["3"]["completed"] else "warmup"
        if model == "warmup":
            ckpt = _require_stage(manifest, 1, "warmup")["selected_checkpoint"]
        else:
            ckpt = _require_stage(manifest, 3, "joint")["checkpoint"]
        detector, _ = load_checkpoint(run_dir / ckpt, "edge_detector")
        dataset = load_dataset(manifest["dataset"])
        records = dataset.split(split)
        preds = [detector.detect(rec.image) for rec in records]
        gts = [_gt_stack(rec, split) for rec in records]
        report = evaluate(preds, gts, setting=setting, tolerance=tolerance,
                          num_thresholds=thresholds)
        eval_dir = run_dir / "eval"
        eval_dir.mkdir(exist_ok=True)
        stem = f"{model}_{split}_{setting.lower()}"
        (eval_dir / f"{stem}.txt").write_text(report.to_text() + "\n")
        report.save_pr_csv(eval_dir / f"{stem}_pr.csv")
        _plot_pr(report, _plot_dir(run_dir) / f"pr_{stem}.png")
        summary = {
            "model": model,
            "split": split,
            "setting": setting,
            "tolerance": tolerance,
            "ods_f": report.ods_f_mean,
            "ois_f": report.ois_f_mean,
            "map": report.map_mean,
            "report": f"eval/{stem}.txt",
        }
        manifest["evaluations"] = [
            e for e in manifest["evaluations"]
            if (e["model"], e["split"], e["setting"]) != (model, split, setting)
        ] + [summary]
        _save_manifest(run_dir, manifest)
        click.echo(report.to_text())


@main.command("analyze-field")
@click.option("--out", "run_dir", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "val-noisy", "val-clean"]),
              default="train", show_default=True)
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True)
@_guarded
def analyze_field(run_dir, split, tolerance):
    """Report the localizer's field error and the fit of the warped prediction."""
    with _run_lock(run_dir):
        manifest = _load_manifest(run_dir)
        stage1 = _require_stage(manifest, 1, "warmup")
        stage2 = _require_stage(manifest, 2, "train-localizer")
        detector, _ = load_checkpoint(run_dir / stage1["selected_checkpoint"], "edge_detector")
        localizer, _ = load_checkpoint(run_dir / stage2["checkpoint"], "field_localizer")
        tau = stage2["config"]["weights"]["confidence"]
        dataset = load_dataset(manifest["dataset"])
        records = dataset.split(split)
        preds, warped, gts = [], [], []
        errors, magnitudes = [], []
        for rec in records:
            probs = detector.detect(rec.image)
            raster = extract_confident(probs, tau).raster()
            field = localizer.localize(
                rec.image.astype(np.float32),
                raster.astype(np.float32),
                rec.noisy_labels.astype(np.float32),
            )
            edge = rec.noisy_labels.any(axis=-1)
            magnitudes.append(np.hypot(field.delta_i, field.delta_j)[edge])
            if rec.field is not None:
                errors.append(
                    np.hypot(field.delta_i - rec.field.delta_i, field.delta_j - rec.field.delta_j)[edge]
                )
            preds.append(probs)
            warped.append(sample_with_field(probs.astype(np.float64), field))
            gts.append(rec.noisy_labels)
        raw_report = evaluate(preds, gts, setting=RAW, tolerance=tolerance)
        warped_report = evaluate(warped, gts, setting=RAW, tolerance=tolerance)
        magnitudes = np.concatenate(magnitudes)
        stats = {
            "split": split,
            "scenes": len(records),
            "mean_field_magnitude_px": float(magnitudes.mean()),
            "ods_f_raw": raw_report.ods_f_mean,
            "ods_f_warped": warped_report.ods_f_mean,
            "ods_f_gain": warped_report.ods_f_mean - raw_report.ods_f_mean,
        }
        plots = _plot_dir(run_dir)
        if errors:
            errors = np.concatenate(errors)
            stats["mean_endpoint_error_px"] = float(errors.mean())
            _plot_histogram(errors, "field error (px)",
                            plots / "field_error_histogram.png",
                            plots / "field_error_histogram.csv")
        else:
            _plot_histogram(magnitudes, "field magnitude (px)",
                            plots / "field_magnitude_histogram.png",
                            plots / "field_magnitude_histogram.csv")
        (run_dir / "field_analysis.json").write_text(json.dumps(stats, indent=2) + "\n")
        manifest["field_analysis"] = stats
        _save_manifest(run_dir, manifest)
        for key, value in stats.items():
            click.echo(f"{key}: {value}")


if __name__ == "__main__":
    main()
