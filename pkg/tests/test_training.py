"""Training stages: config, curves, warm-up selection, stage isolation."""

import math

import numpy as np
import pytest

from edgedrift.data import Dataset
from edgedrift.errors import ContractViolation
from edgedrift.losses import LossWeights
from edgedrift.models import EdgeDetector, FieldLocalizer, load_checkpoint
from edgedrift.training import (
    LearningCurve,
    TrainConfig,
    full_scale_config,
    joint_train,
    label_correction_baseline,
    restore_params,
    select_warmup,
    snapshot_params,
    train_localizer,
    warmup_train,
)


def tiny_dataset(seed=1, n_train=2, n_val=1, num_classes=1):
    return Dataset.generate(
        seed, n_train=n_train, n_val=n_val, size=32, num_classes=num_classes,
        complexity=0.0, noise_level=1.5,
    )


def tiny_config(**kw):
    base = dict(
        warmup_epochs=3,
        localizer_epochs=2,
        joint_epochs=2,
        batch_size=2,
        crop=32,
        augment=False,
        eval_limit=2,
        eval_thresholds=5,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.warmup_epochs == 30
        assert cfg.weights == LossWeights()

    def test_validation(self):
        with pytest.raises(ContractViolation):
            TrainConfig(warmup_epochs=0)
        with pytest.raises(ContractViolation):
            TrainConfig(joint_lr=0.0)
        with pytest.raises(ContractViolation):
            TrainConfig(crop=33)
        with pytest.raises(ContractViolation):
            TrainConfig(momentum=1.0)
        with pytest.raises(ContractViolation):
            TrainConfig(eval_setting="thin")

    def test_dict_roundtrip(self):
        cfg = TrainConfig(warmup_lr=0.1, weights=LossWeights(sup=0.5))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ContractViolation, match="unknown config"):
            TrainConfig.from_dict({"warmup_epoch": 3})
        with pytest.raises(ContractViolation, match="unknown loss weight"):
            TrainConfig.from_dict({"weights": {"supp": 1.0}})

    def test_full_scale_profile(self):
        cfg = full_scale_config()
        assert cfg.warmup_lr == pytest.approx(5e-8)
        assert cfg.localizer_lr == pytest.approx(2.5e-8)
        assert cfg.crop == 472


class TestLearningCurve:
    def test_add_series_roundtrip(self, tmp_path):
        c = LearningCurve()
        c.add(1, "train", 0.5, 0.4, 1.0)
        c.add(2, "train", 0.6, 0.5, 0.8)
        c.add(1, "val-clean", 0.7, 0.6, math.nan)
        epochs, ods = c.series("train")
        assert epochs == [1, 2] and ods == [0.5, 0.6]
        path = tmp_path / "curve.csv"
        c.save_csv(path)
        back = LearningCurve.load_csv(path)
        assert back.series("train") == c.series("train")
        assert back.series("val-clean", "map_score") == ([1], [0.6])

    def test_epochs_must_increase_per_split(self):
        c = LearningCurve()
        c.add(2, "train", 0.5, 0.4, 1.0)
        with pytest.raises(ContractViolation):
            c.add(2, "train", 0.6, 0.5, 0.9)
        c.add(2, "val-clean", 0.6, 0.5, 0.9)  # other split unaffected

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("epoch,ods\n1,0.5\n")
        with pytest.raises(ContractViolation):
            LearningCurve.load_csv(p)


def curve_from(ods_values):
    c = LearningCurve()
    for e, v in enumerate(ods_values, start=1):
        c.add(e, "train", v, 0.0, 0.0)
    return c


class TestSelectWarmup:
    def test_flat_then_jump_returns_jump_epoch(self):
        ods = [0.3] * 19 + [0.4] * 11
        assert select_warmup(curve_from(ods)) == 20

    def test_linear_falls_back_to_midpoint(self):
        ods = [0.3 + 0.01 * t for t in range(30)]
        assert select_warmup(curve_from(ods)) == 16

    def test_flat_falls_back_to_midpoint(self):
        assert select_warmup(curve_from([0.5] * 21)) == 11

    def test_knee_found_by_curvature(self):
        # slope 0.015 (below the jump threshold) then flat: the bend is the
        # most curved point of the smoothed series
        ods = [0.3 + 0.015 * min(t, 15) for t in range(30)]
        got = select_warmup(curve_from(ods))
        assert 14 <= got <= 19

    def test_too_short_rejected(self):
        with pytest.raises(ContractViolation):
            select_warmup(curve_from([0.1, 0.2, 0.3, 0.4]))


class TestWarmup:
    def test_loss_decreases_on_single_scene(self):
        ds = tiny_dataset(n_train=1, n_val=1)
        cfg = tiny_config(warmup_epochs=12, batch_size=1, eval_limit=0)
        _, _, curve = warmup_train(ds, cfg)
        _, losses = curve.series("train", "loss")
        assert losses[-1] < losses[0]

    def test_deterministic(self):
        ds = tiny_dataset()
        a = warmup_train(ds, tiny_config())[2].series("train", "loss")
        b = warmup_train(ds, tiny_config())[2].series("train", "loss")
        assert a == b
        c = warmup_train(ds, tiny_config(seed=5))[2].series("train", "loss")
        assert a != c

    def test_snapshots_and_checkpoints(self, tmp_path):
        ds = tiny_dataset()
        det, snaps, curve = warmup_train(ds, tiny_config(), checkpoint_dir=tmp_path)
        assert [e for e, _ in snaps] == [1, 2, 3]
        files = sorted(p.name for p in (tmp_path / "stage1").iterdir())
        assert files == ["epoch_1.ckpt", "epoch_2.ckpt", "epoch_3.ckpt"]
        loaded, extra = load_checkpoint(tmp_path / "stage1" / "epoch_3.ckpt")
        assert extra["epoch"] == 3
        for k, v in loaded.params().items():
            assert np.array_equal(v, det.params()[k])
        # restoring an earlier snapshot really rewinds the parameters
        restore_params(det, snaps[0][1])
        assert any(
            not np.array_equal(det.params()[k], loaded.params()[k])
            for k in det.params()
        )

    def test_records_clean_validation_metrics(self):
        ds = tiny_dataset()
        _, _, curve = warmup_train(ds, tiny_config())
        assert curve.series("val-clean")[0] == [1, 2, 3]

    def test_divergence_aborts(self):
        ds = tiny_dataset()
        det = EdgeDetector(1, seed=0)
        det.params()["conv3.w"][:] = np.nan  # NaN logits reach the loss
        with pytest.raises(ContractViolation, match="diverged"):
            warmup_train(ds, tiny_config(), detector=det)

    def test_empty_split_rejected(self):
        ds = tiny_dataset()
        ds.splits["train"] = []
        with pytest.raises(ContractViolation):
            warmup_train(ds, tiny_config())


class TestTrainLocalizer:
    def test_detector_frozen_and_localizer_updates(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        before = snapshot_params(det)
        loc_init = FieldLocalizer(1, seed=0)
        head_before = snapshot_params(loc_init)
        loc, info = train_localizer(det, ds, cfg, localizer=loc_init)
        for k, v in det.params().items():
            assert np.array_equal(v, before[k])
        assert len(info["losses"]) == cfg.localizer_epochs
        assert any(
            not np.array_equal(loc.params()[k], head_before[k]) for k in head_before
        )

    def test_deterministic(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        a = train_localizer(det, ds, cfg)[1]["losses"]
        b = train_localizer(det, ds, cfg)[1]["losses"]
        assert a == b

    def test_no_confident_pixels_skips_supervision(self):
        ds = tiny_dataset()
        cfg = tiny_config(localizer_epochs=1)
        det = EdgeDetector(1, seed=0)
        det.params()["conv3.b"][:] = -25.0  # probabilities ~0 everywhere
        _, info = train_localizer(det, ds, cfg)
        assert info["skipped_sup"] == len(ds.split("train"))

    def test_checkpoints_written(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        train_localizer(det, ds, cfg, checkpoint_dir=tmp_path)
        files = sorted(p.name for p in (tmp_path / "stage2").iterdir())
        assert files == ["epoch_1.ckpt", "epoch_2.ckpt"]
        loaded, _ = load_checkpoint(tmp_path / "stage2" / "epoch_2.ckpt")
        assert loaded.kind == "field_localizer"


class TestJointTrain:
    def test_localizer_frozen_detector_moves(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        loc, _ = train_localizer(det, ds, cfg)
        loc_before = snapshot_params(loc)
        det_before = snapshot_params(det)
        det, curve = joint_train(det, loc, ds, cfg)
        for k, v in loc.params().items():
            assert np.array_equal(v, loc_before[k])
        assert any(
            not np.array_equal(det.params()[k], det_before[k]) for k in det_before
        )
        assert curve.series("train")[0] == [1, 2]

    def test_deterministic(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        loc, _ = train_localizer(det, ds, cfg)
        snap = snapshot_params(det)
        a = joint_train(det, loc, ds, cfg)[1].series("train", "loss")
        restore_params(det, snap)
        b = joint_train(det, loc, ds, cfg)[1].series("train", "loss")
        assert a == b


class TestLabelCorrectionBaseline:
    def test_returns_fresh_detector_and_leaves_inputs_alone(self):
        ds = tiny_dataset()
        cfg = tiny_config()
        det, _, _ = warmup_train(ds, cfg)
        loc, _ = train_localizer(det, ds, cfg)
        det_before = snapshot_params(det)
        noisy_before = [r.noisy_labels.copy() for r in ds.split("train")]
        fixed_det, snaps, curve = label_correction_baseline(det, loc, ds, cfg)
        for k, v in det.params().items():
            assert np.array_equal(v, det_before[k])
        for rec, before in zip(ds.split("train"), noisy_before):
            assert np.array_equal(rec.noisy_labels, before)
        assert fixed_det is not det
        assert len(snaps) == cfg.warmup_epochs
        assert curve.series("train")[0] == [1, 2, 3]
