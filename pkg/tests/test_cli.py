"""CLI: stage ordering, manifest bookkeeping, refusal semantics, artifacts."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from edgedrift.cli import main
from edgedrift.data import load_dataset

TINY_CONFIG = {
    "warmup_epochs": 5,
    "localizer_epochs": 1,
    "joint_epochs": 1,
    "batch_size": 2,
    "crop": 32,
    "augment": False,
    "eval_limit": 1,
    "eval_thresholds": 5,
}


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, runner):
    """Dataset plus a run taken through all three stages."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    steps = [
        ["generate", "--out", str(data), "--scenes", "3", "--val-scenes", "1",
         "--size", "32", "--classes", "1", "--noise", "1.5", "--seed", "3"],
        ["warmup", "--data", str(data), "--out", str(run), "--config", str(cfg)],
        ["train-localizer", "--out", str(run), "--config", str(cfg)],
        ["joint", "--out", str(run), "--config", str(cfg)],
    ]
    for step in steps:
        result = runner.invoke(main, step)
        assert result.exit_code == 0, f"{step[0]} failed:\n{result.output}"
    return {"root": root, "data": data, "run": run, "cfg": cfg}


def read_manifest(run):
    return json.loads((run / "manifest.json").read_text())


class TestGenerate:
    def test_writes_three_splits_and_plots(self, workspace):
        ds = load_dataset(workspace["data"])
        assert {s: len(r) for s, r in ds.splits.items()} == {
            "train": 3, "val-noisy": 1, "val-clean": 1,
        }
        plots = workspace["data"] / "plots"
        assert (plots / "shift_histogram.png").exists()
        assert (plots / "density_vs_shift.png").exists()

    def test_refuses_nonempty_dir_without_force(self, workspace, runner):
        result = runner.invoke(main, [
            "generate", "--out", str(workspace["data"]), "--scenes", "1",
            "--size", "32", "--classes", "1", "--seed", "3",
        ])
        assert result.exit_code == 3
        assert "refused" in result.output

    def test_rerun_same_seed_identical_bytes(self, runner, tmp_path):
        out = tmp_path / "d"
        args = ["generate", "--out", str(out), "--scenes", "2", "--val-scenes", "1",
                "--size", "32", "--classes", "1", "--noise", "1.0", "--seed", "11"]
        assert runner.invoke(main, args).exit_code == 0
        first = {
            p.relative_to(out): p.read_bytes()
            for p in sorted(out.rglob("*"))
            if p.is_file() and "plots" not in p.parts
        }
        assert runner.invoke(main, args + ["--force"]).exit_code == 0
        for rel, blob in first.items():
            assert (out / rel).read_bytes() == blob, rel

    def test_zero_noise_val_splits_have_equal_labels(self, runner, tmp_path):
        out = tmp_path / "z"
        result = runner.invoke(main, [
            "generate", "--out", str(out), "--scenes", "1", "--val-scenes", "1",
            "--size", "32", "--classes", "1", "--noise", "0", "--seed", "2",
        ])
        assert result.exit_code == 0
        ds = load_dataset(out)
        for split in ("val-noisy", "val-clean"):
            for rec in ds.split(split):
                assert np.array_equal(rec.noisy_labels, rec.clean_labels)


class TestStageOrdering:
    def test_localizer_before_warmup_refused(self, runner, tmp_path):
        run = tmp_path / "r"
        run.mkdir()
        result = runner.invoke(main, ["train-localizer", "--out", str(run)])
        assert result.exit_code == 3
        assert "warmup" in result.output

    def test_joint_before_localizer_refused(self, workspace, runner, tmp_path):
        run = tmp_path / "r2"
        result = runner.invoke(main, [
            "warmup", "--data", str(workspace["data"]), "--out", str(run),
            "--config", str(workspace["cfg"]),
        ])
        assert result.exit_code == 0
        result = runner.invoke(main, ["joint", "--out", str(run)])
        assert result.exit_code == 3
        assert "train-localizer" in result.output

    def test_redo_without_force_refused(self, workspace, runner):
        result = runner.invoke(main, [
            "warmup", "--data", str(workspace["data"]),
            "--out", str(workspace["run"]), "--config", str(workspace["cfg"]),
        ])
        assert result.exit_code == 3
        assert "--force" in result.output

    def test_lock_file_blocks_second_command(self, workspace, runner):
        lock = workspace["run"] / ".lock"
        lock.write_text("held\n")
        try:
            result = runner.invoke(main, [
                "evaluate", "--out", str(workspace["run"]), "--thresholds", "5",
            ])
            assert result.exit_code == 3
            assert "lock" in result.output.lower()
        finally:
            lock.unlink()


class TestManifest:
    def test_stages_recorded_in_order(self, workspace):
        man = read_manifest(workspace["run"])
        assert [man["stages"][k]["completed"] for k in ("1", "2", "3")] == [True] * 3
        assert man["stages"]["1"]["selected_epoch"] <= TINY_CONFIG["warmup_epochs"]
        ckpt = workspace["run"] / man["stages"]["1"]["selected_checkpoint"]
        assert ckpt.exists()
        assert (workspace["run"] / man["stages"]["3"]["checkpoint"]).exists()

    def test_effective_config_echoed(self, workspace):
        cfg = json.loads((workspace["run"] / "config.json").read_text())
        assert cfg["warmup_epochs"] == TINY_CONFIG["warmup_epochs"]

    def test_cli_flag_overrides_config_file(self, workspace, runner, tmp_path):
        run = tmp_path / "r3"
        result = runner.invoke(main, [
            "warmup", "--data", str(workspace["data"]), "--out", str(run),
            "--config", str(workspace["cfg"]), "--seed", "42",
        ])
        assert result.exit_code == 0
        cfg = json.loads((run / "config.json").read_text())
        assert cfg["seed"] == 42
        assert cfg["warmup_epochs"] == TINY_CONFIG["warmup_epochs"]

    def test_curve_csv_has_row_per_epoch_per_split(self, workspace):
        lines = (workspace["run"] / "curves" / "warmup.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * TINY_CONFIG["warmup_epochs"]

    def test_bad_config_key_is_contract_violation(self, workspace, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"warmup_epoch": 3}')
        run = tmp_path / "r4"
        result = runner.invoke(main, [
            "warmup", "--data", str(workspace["data"]), "--out", str(run),
            "--config", str(bad),
        ])
        assert result.exit_code == 2
        assert "contract violation" in result.output


class TestEvaluateCommand:
    @pytest.mark.parametrize("setting", ["thin", "raw"])
    def test_both_settings_produce_reports(self, workspace, runner, setting):
        result = runner.invoke(main, [
            "evaluate", "--out", str(workspace["run"]), "--split", "val-clean",
            "--setting", setting, "--thresholds", "5",
        ])
        assert result.exit_code == 0
        stem = f"joint_val-clean_{setting}"
        assert (workspace["run"] / "eval" / f"{stem}.txt").exists()
        assert (workspace["run"] / "eval" / f"{stem}_pr.csv").exists()
        man = read_manifest(workspace["run"])
        entries = [e for e in man["evaluations"] if e["setting"].lower() == setting]
        assert len(entries) == 1 and entries[0]["model"] == "joint"

    def test_warmup_model_selectable(self, workspace, runner):
        result = runner.invoke(main, [
            "evaluate", "--out", str(workspace["run"]), "--model", "warmup",
            "--split", "val-noisy", "--setting", "Raw", "--thresholds", "5",
        ])
        assert result.exit_code == 0
        assert (workspace["run"] / "eval" / "warmup_val-noisy_raw.txt").exists()


class TestAnalyzeField:
    def test_stats_and_histogram_emitted(self, workspace, runner):
        result = runner.invoke(main, ["analyze-field", "--out", str(workspace["run"])])
        assert result.exit_code == 0
        stats = json.loads((workspace["run"] / "field_analysis.json").read_text())
        for key in ("mean_endpoint_error_px", "mean_field_magnitude_px",
                    "ods_f_warped", "ods_f_raw"):
            assert key in stats
        assert (workspace["run"] / "plots" / "field_error_histogram.png").exists()
        man = read_manifest(workspace["run"])
        assert man["field_analysis"]["scenes"] == 3
