import numpy as np
import pytest

from edgedrift import matching
from edgedrift.errors import ContractViolation
from edgedrift.matching import ConfidentSet


def brute_force_match(src, target_map, max_radius):
    """Independent oracle: exhaustive nearest search with row-major ties."""
    tgt = np.argwhere(target_map != 0)
    kept, shifts = [], []
    for n, (si, sj) in enumerate(src):
        best = None
        for ti, tj in tgt:
            d2 = (ti - si) ** 2 + (tj - sj) ** 2
            key = (d2, ti, tj)
            if best is None or key < best:
                best = key
        if best is not None and best[0] <= max_radius**2:
            kept.append(n)
            shifts.append([best[1] - si, best[2] - sj])
    return np.array(kept, dtype=np.int64), np.array(shifts, dtype=np.float64).reshape(-1, 2)


class TestMinDistanceMatch:
    def test_hand_solved_grid(self):
        target = np.zeros((6, 6), dtype=np.uint8)
        target[1, 1] = 1
        target[4, 5] = 1
        src = np.array([[0, 0], [5, 5], [3, 3]])
        kept, shifts = matching.min_distance_match(src, target, max_radius=10)
        assert kept.tolist() == [0, 1, 2]
        assert shifts[0].tolist() == [1.0, 1.0]  # (0,0) -> (1,1)
        assert shifts[1].tolist() == [-1.0, 0.0]  # (5,5) -> (4,5)
        # (3,3): d2 to (1,1) is 8, to (4,5) is 5 -> (4,5)
        assert shifts[2].tolist() == [1.0, 2.0]

    def test_tie_breaks_to_smallest_row_major_target(self):
        target = np.zeros((3, 3), dtype=np.uint8)
        target[0, 1] = 1  # d 1 from center
        target[1, 0] = 1  # d 1 from center
        target[2, 1] = 1  # d 1
        target[1, 2] = 1  # d 1
        kept, shifts = matching.min_distance_match(np.array([[1, 1]]), target)
        assert kept.tolist() == [0]
        assert shifts[0].tolist() == [-1.0, 0.0]  # (0, 1) wins row-major

    def test_sources_beyond_radius_dropped(self):
        target = np.zeros((8, 8), dtype=np.uint8)
        target[0, 0] = 1
        src = np.array([[0, 1], [7, 7]])
        kept, shifts = matching.min_distance_match(src, target, max_radius=3)
        assert kept.tolist() == [0]
        assert shifts.shape == (1, 2)

    def test_empty_target_gives_empty_result(self):
        kept, shifts = matching.min_distance_match(
            np.array([[1, 1]]), np.zeros((4, 4), dtype=np.uint8)
        )
        assert len(kept) == 0 and shifts.shape == (0, 2)

    def test_shift_sign_moves_source_onto_target(self):
        # a noisy pixel at (5, 5) whose true edge sits at (3, 5) gets
        # shift (-2, 0): anchoring that at the noisy pixel undoes the offset
        target = np.zeros((8, 8), dtype=np.uint8)
        target[3, 5] = 1
        kept, shifts = matching.min_distance_match(np.array([[5, 5]]), target)
        assert shifts[0].tolist() == [-2.0, 0.0]

    def test_agrees_with_brute_force_on_random_grids(self):
        rng = np.random.default_rng(12)
        for _ in range(40):
            H, W = rng.integers(4, 20), rng.integers(4, 20)
            target = (rng.random((H, W)) < 0.08).astype(np.uint8)
            n = int(rng.integers(1, 30))
            src = np.column_stack([rng.integers(0, H, n), rng.integers(0, W, n)])
            radius = float(rng.choice([1.5, 3.0, 10.0]))
            kept_a, shifts_a = matching.min_distance_match(src, target, radius)
            kept_b, shifts_b = brute_force_match(src, target, radius)
            assert np.array_equal(kept_a, kept_b)
            assert np.array_equal(shifts_a, shifts_b)

    def test_bad_source_shape_rejected(self):
        with pytest.raises(ContractViolation):
            matching.min_distance_match(np.zeros((3, 3)), np.zeros((3, 3)))


class TestBuildShiftTable:
    def test_per_class_matching_with_confidences(self):
        H, W, C = 6, 6, 2
        labels = np.zeros((H, W, C), dtype=np.uint8)
        labels[2, 2, 0] = 1
        labels[4, 4, 1] = 1
        pixels = np.array([[2, 3, 0], [1, 4, 1]], dtype=np.int64)
        confident = ConfidentSet(pixels, np.array([0.9, 0.7]), (H, W, C))
        table = matching.build_shift_table(labels, confident, max_radius=5)
        assert len(table) == 2
        rows = {tuple(p): (s, c) for p, s, c in zip(
            table.pixels.tolist(), table.shifts.tolist(), table.confidences.tolist()
        )}
        assert rows[(2, 2, 0)] == ([0.0, 1.0], 0.9)
        assert rows[(4, 4, 1)] == ([-3.0, 0.0], 0.7)

    def test_class_isolation(self):
        # a source of class 0 never matches a confident pixel of class 1
        labels = np.zeros((5, 5, 2), dtype=np.uint8)
        labels[2, 2, 0] = 1
        confident = ConfidentSet(
            np.array([[2, 3, 1]], dtype=np.int64), np.array([0.8]), (5, 5, 2)
        )
        table = matching.build_shift_table(labels, confident)
        assert len(table) == 0

    def test_roundtrip_through_csv(self, tmp_path):
        table = matching.ShiftTable(
            np.array([[1, 2, 0], [3, 4, 1]], dtype=np.int64),
            np.array([[0.5, -1.0], [2.0, 0.25]]),
            np.array([0.75, 0.5]),
        )
        p = tmp_path / "table.csv"
        matching.save_shift_table(p, table)
        back = matching.load_shift_table(p)
        assert np.array_equal(back.pixels, table.pixels)
        assert np.array_equal(back.shifts, table.shifts)
        assert np.array_equal(back.confidences, table.confidences)


class TestShiftStatistics:
    def test_histogram_and_fraction(self):
        shifts = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 3.0]])
        hist = matching.shift_statistics(shifts, bin_width=1.0)
        assert hist.mean == pytest.approx((5 + 0 + 3) / 3)
        assert hist.fraction_gt(2.0) == pytest.approx(2 / 3)
        assert hist.fraction_gt(10.0) == 0.0
        assert hist.counts.sum() == 3
        assert len(hist.bin_edges) == len(hist.counts) + 1

    def test_empty_input(self):
        hist = matching.shift_statistics(np.empty((0, 2)))
        assert hist.mean == 0.0
        assert hist.fraction_gt(1.0) == 0.0
        assert hist.counts.sum() == 0

    def test_confident_set_raster(self):
        cs = ConfidentSet(
            np.array([[0, 1, 0], [2, 2, 1]], dtype=np.int64),
            np.array([0.5, 0.9]),
            (3, 3, 2),
        )
        r = cs.raster()
        assert r[0, 1, 0] == 1 and r[2, 2, 1] == 1 and r.sum() == 2
        m = cs.class_mask(1)
        assert m[2, 2] == 1 and m.sum() == 1
