"""Scene generation, label corruption statistics, and dataset IO."""

import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from edgedrift.data import (
    Dataset,
    corrupt_labels,
    gather_labels,
    generate_scene,
    load_dataset,
    push_labels,
    rethin,
    save_dataset,
)
from edgedrift.density import local_edge_density
from edgedrift.errors import ContractViolation
from edgedrift.fields import DisplacementField
from edgedrift.matching import min_distance_match


def has_solid_block(mask):
    # a 2x2 all-ones block is the standard thinness violation
    m = mask.astype(bool)
    return bool(np.any(m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]))


class TestGenerateScene:
    def test_deterministic_per_seed(self):
        a = generate_scene(11, size=64)
        b = generate_scene(11, size=64)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.clean_labels, b.clean_labels)
        assert np.array_equal(a.noisy_labels, b.noisy_labels)
        assert np.array_equal(a.true_field.delta_i, b.true_field.delta_i)
        assert np.array_equal(a.true_field.delta_j, b.true_field.delta_j)

    def test_seeds_differ(self):
        a = generate_scene(1, size=64)
        b = generate_scene(2, size=64)
        assert not np.array_equal(a.image, b.image)

    def test_shapes_and_ranges(self):
        sc = generate_scene(4, size=64, num_classes=2)
        assert sc.image.shape == (64, 64, 3)
        assert sc.image.dtype == np.float32
        assert sc.image.min() >= 0.0 and sc.image.max() <= 1.0
        assert sc.clean_labels.shape == (64, 64, 2)
        assert sc.clean_labels.dtype == np.uint8
        assert set(np.unique(sc.clean_labels)) <= {0, 1}
        assert set(np.unique(sc.noisy_labels)) <= {0, 1}
        assert sc.clean_labels.any()

    def test_labels_are_thin(self):
        for seed in (0, 5):
            sc = generate_scene(seed, size=64, num_classes=3)
            for k in range(3):
                assert not has_solid_block(sc.clean_labels[:, :, k])
                assert not has_solid_block(sc.noisy_labels[:, :, k])

    def test_complexity_zero_single_convex_shape(self):
        sc = generate_scene(3, size=64, num_classes=3, complexity=0.0)
        assert sc.clean_labels[:, :, 1:].sum() == 0
        curve = sc.clean_labels[:, :, 0].astype(bool)
        _, n = ndimage.label(curve, structure=np.ones((3, 3), dtype=bool))
        assert n == 1
        # rasterizer oracle: the curve is a closed ring containing only
        # boundary pixels of the region it encloses
        filled = ndimage.binary_fill_holes(curve)
        assert filled.sum() > 4 * curve.sum()
        boundary = filled & ~ndimage.binary_erosion(filled, np.ones((3, 3), dtype=bool))
        assert np.all(curve <= boundary)
        assert local_edge_density(curve).values.max() <= 0.2

    def test_size_guards(self):
        with pytest.raises(ContractViolation):
            generate_scene(0, size=63)
        with pytest.raises(ContractViolation):
            generate_scene(0, size=16)
        with pytest.raises(ContractViolation):
            generate_scene(0, size=64, num_classes=0)


class TestWarpOps:
    def test_constant_shift_oracle(self):
        # field (0, +2) reads two columns to the right: the curve lands two
        # columns to the left, exactly
        lab = np.zeros((16, 16, 1), dtype=np.uint8)
        lab[3:12, 9, 0] = 1
        field = DisplacementField(np.zeros((16, 16)), np.full((16, 16), 2.0))
        out = gather_labels(lab, field)
        assert np.array_equal(out[:, 7, 0], lab[:, 9, 0])
        assert out.sum() == lab.sum()

    def test_push_inverts_constant_gather(self):
        lab = np.zeros((20, 20, 1), dtype=np.uint8)
        lab[4:16, 10, 0] = 1
        field = DisplacementField(np.full((20, 20), 1.0), np.full((20, 20), -3.0))
        assert np.array_equal(push_labels(gather_labels(lab, field), field), lab)

    def test_rethin_thins_doubled_curve(self):
        lab = np.zeros((12, 12), dtype=np.uint8)
        lab[2:10, 5] = 1
        lab[2:10, 6] = 1
        thin = rethin(lab)
        assert not has_solid_block(thin)
        assert thin.sum() >= 6


class TestCorruptLabels:
    def test_zero_noise_identity(self):
        sc = generate_scene(6, size=64, noise_level=0.0)
        assert np.array_equal(sc.noisy_labels, sc.clean_labels)
        assert np.all(sc.true_field.delta_i == 0)
        assert np.all(sc.true_field.delta_j == 0)

    def test_noisy_reconstructs_from_field(self):
        # the stored field is exactly the one that produced the labels
        for seed in (0, 1, 2):
            sc = generate_scene(seed, size=64, noise_level=2.5)
            rebuilt = rethin(gather_labels(sc.clean_labels, sc.true_field))
            assert np.array_equal(rebuilt, sc.noisy_labels)

    def test_mean_magnitude_calibrated(self):
        for noise in (1.0, 2.5):
            sc = generate_scene(8, size=64, noise_level=noise)
            mag = sc.true_field.magnitude()
            edge = sc.clean_labels.any(axis=-1)
            assert abs(mag[edge].mean() - noise) < 1e-6 * noise

    def test_large_shift_fraction_in_band(self):
        # at mean shift 2.5 px, between 10% and 40% of edge pixels move > 2 px
        for seed in range(4):
            sc = generate_scene(seed, size=96, noise_level=2.5)
            mag = sc.true_field.magnitude()
            edge = sc.clean_labels.any(axis=-1)
            frac = (mag[edge] > 2.0).mean()
            assert 0.10 <= frac <= 0.40, f"seed {seed}: frac {frac:.3f}"

    def test_density_correlation_positive(self):
        mags, denss = [], []
        for seed in range(5):
            sc = generate_scene(seed, size=64, noise_level=2.5)
            edge = sc.clean_labels.any(axis=-1)
            mags.append(sc.true_field.magnitude()[edge])
            denss.append(local_edge_density(edge).values[edge])
        r = np.corrcoef(np.concatenate(mags), np.concatenate(denss))[0, 1]
        assert r > 0.03

    def test_field_is_smooth(self):
        sc = generate_scene(9, size=64, noise_level=2.5)
        fi, fj = sc.true_field.delta_i, sc.true_field.delta_j
        for plane in (fi, fj):
            for axis in (0, 1):
                d = np.abs(np.diff(plane, axis=axis))
                assert d.mean() < 0.5
                assert d.max() < 6.0 * 2.5

    def test_input_guards(self):
        sc = generate_scene(2, size=64, noise_level=0.0)
        dens = local_edge_density(sc.clean_labels.any(axis=-1)).values
        with pytest.raises(ContractViolation):
            corrupt_labels(sc.clean_labels, dens, -1.0, 0)
        with pytest.raises(ContractViolation):
            corrupt_labels(sc.clean_labels, dens[:10], 1.0, 0)
        with pytest.raises(ContractViolation):
            corrupt_labels(sc.clean_labels[:, :, 0], dens, 1.0, 0)


class TestShiftRecovery:
    def test_constant_subpixel_fields(self):
        # a segment displaced along its normal: nearest-pixel assignment
        # rounds the shift, matching recovers it within sqrt(2)/2 < 0.75
        cases = []
        seg = np.zeros((64, 64, 1), dtype=np.uint8)
        seg[10:54, 30, 0] = 1
        cases.append((seg, 0.0, 1.7))
        cases.append((seg, 0.0, -2.6))
        diag = np.zeros((64, 64, 1), dtype=np.uint8)
        for t in range(10, 54):
            diag[t, t, 0] = 1
        cases.append((diag, -1.556, 1.556))
        for clean, ci, cj in cases:
            field = DisplacementField(np.full((64, 64), ci), np.full((64, 64), cj))
            noisy = gather_labels(clean, field)
            src = np.argwhere(clean[:, :, 0] != 0)
            kept, shifts = min_distance_match(src, noisy[:, :, 0], max_radius=10.0)
            assert len(kept) > 30
            # gather reads from p + c, so the curve itself moves by -c
            err = np.hypot(shifts[:, 0] + ci, shifts[:, 1] + cj)
            assert err.mean() < 0.75, f"shift ({ci},{cj}): mean {err.mean():.3f}"

    def test_random_field_recovery_small_scenes(self):
        # matched shifts at noisy pixels agree with the applied rounded shift
        for noise in (1.0, 2.5, 3.0):
            errs = []
            for seed in (0, 1, 2):
                sc = generate_scene(seed, size=64, complexity=0.0, noise_level=noise)
                H, Wd = sc.true_field.shape
                ati = np.clip(
                    np.round(np.arange(H)[:, None] + sc.true_field.delta_i), 0, H - 1
                ).astype(np.int64)
                atj = np.clip(
                    np.round(np.arange(Wd)[None, :] + sc.true_field.delta_j), 0, Wd - 1
                ).astype(np.int64)
                src = np.argwhere(sc.noisy_labels[:, :, 0] != 0)
                kept, shifts = min_distance_match(src, sc.clean_labels[:, :, 0], max_radius=10.0)
                p = src[kept]
                errs.append(
                    np.hypot(
                        shifts[:, 0] - (ati[p[:, 0], p[:, 1]] - p[:, 0]),
                        shifts[:, 1] - (atj[p[:, 0], p[:, 1]] - p[:, 1]),
                    )
                )
            err = np.concatenate(errs)
            assert err.mean() < 0.75, f"noise {noise}: mean {err.mean():.3f}"


class TestDatasetIO:
    def make(self):
        return Dataset.generate(3, n_train=2, n_val=1, size=64, num_classes=2, noise_level=2.0)

    def test_roundtrip(self, tmp_path):
        ds = self.make()
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.meta == ds.meta
        for split in ("train", "val-noisy", "val-clean"):
            assert len(back.split(split)) == len(ds.split(split))
            for a, b in zip(ds.split(split), back.split(split)):
                assert a.scene_id == b.scene_id
                assert np.array_equal(a.image, b.image)
                assert np.array_equal(a.clean_labels, b.clean_labels)
                assert np.array_equal(a.noisy_labels, b.noisy_labels)
                assert np.array_equal(a.field.delta_i, b.field.delta_i)
                assert np.array_equal(a.field.delta_j, b.field.delta_j)

    def test_write_is_byte_deterministic(self, tmp_path):
        a_dir = tmp_path / "a"
        b_dir = tmp_path / "b"
        save_dataset(self.make(), a_dir)
        save_dataset(self.make(), b_dir)
        a_files = sorted(p.relative_to(a_dir) for p in a_dir.rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(b_dir) for p in b_dir.rglob("*") if p.is_file())
        assert a_files == b_files
        for rel in a_files:
            assert (a_dir / rel).read_bytes() == (b_dir / rel).read_bytes(), rel

    def test_split_scenes_disjoint(self):
        ds = self.make()
        ids = [r.scene_id for s in ("train", "val-noisy", "val-clean") for r in ds.split(s)]
        assert len(ids) == len(set(ids)) == 4

    def test_missing_meta_is_descriptive(self, tmp_path):
        ds = self.make()
        save_dataset(ds, tmp_path)
        (tmp_path / "meta.json").unlink()
        with pytest.raises(ContractViolation, match="meta.json"):
            load_dataset(tmp_path)

    def test_missing_class_png_is_descriptive(self, tmp_path):
        save_dataset(self.make(), tmp_path)
        victim = tmp_path / "labels_noisy" / "scene_0000_k1.png"
        victim.unlink()
        with pytest.raises(ContractViolation, match="scene_0000_k1.png"):
            load_dataset(tmp_path)

    def test_field_files_optional(self, tmp_path):
        save_dataset(self.make(), tmp_path)
        for p in (tmp_path / "fields").iterdir():
            p.unlink()
        back = load_dataset(tmp_path)
        assert all(r.field is None for r in back.split("train"))
        assert back.split("train")[0].clean_labels is not None

    def test_external_png_pair_loads(self, tmp_path):
        # real-data mode: an image plus per-class label PNGs, nothing else
        (tmp_path / "images").mkdir()
        (tmp_path / "labels_noisy").mkdir()
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
        Image.fromarray(img, mode="RGB").save(tmp_path / "images" / "ext_000.png")
        lab = np.zeros((32, 32), dtype=np.uint8)
        lab[5:20, 9] = 255
        Image.fromarray(lab, mode="L").save(tmp_path / "labels_noisy" / "ext_000_k0.png")
        (tmp_path / "meta.json").write_text(json.dumps({"num_classes": 1, "size": 32}))
        (tmp_path / "manifest.jsonl").write_text(json.dumps({"id": "ext_000", "split": "train"}) + "\n")
        ds = load_dataset(tmp_path)
        rec = ds.split("train")[0]
        assert rec.clean_labels is None
        assert rec.field is None
        assert rec.noisy_labels.shape == (32, 32, 1)
        assert rec.noisy_labels.sum() == 15

    def test_unknown_split_rejected(self):
        with pytest.raises(ContractViolation):
            Dataset({"bogus": []}, {"num_classes": 1})
        with pytest.raises(ContractViolation):
            self.make().split("nope")
