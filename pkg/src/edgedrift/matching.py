"""Nearest-correspondence search between pixel sets.

Shifts follow the repo convention: shift = target - source, i.e. the offset
that moves a source pixel onto its matched target.  Anchoring a field at
source pixels with these shifts makes the gather warp read from the targets.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from edgedrift.errors import ContractViolation

DEFAULT_MAX_RADIUS = 10.0


@dataclass(frozen=True)
class ConfidentSet:
    """Pixels whose predicted edge probability cleared the confidence cut."""

    pixels: np.ndarray  # (n, 3) int64 rows of (i, j, k)
    confidences: np.ndarray  # (n,) float64
    shape: tuple  # (H, W, C) of the originating prediction

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[1] != 3:
            raise ContractViolation(f"pixels must be (n, 3), got {self.pixels.shape}")
        if len(self.confidences) != len(self.pixels):
            raise ContractViolation("confidences length does not match pixels")

    def __len__(self):
        return len(self.pixels)

    def raster(self):
        """Binary (H, W, C) map with a 1 at every confident pixel."""
        out = np.zeros(self.shape, dtype=np.uint8)
        if len(self.pixels):
            out[self.pixels[:, 0], self.pixels[:, 1], self.pixels[:, 2]] = 1
        return out

    def class_mask(self, k):
        """Binary (H, W) map of the confident pixels of one class."""
        out = np.zeros(self.shape[:2], dtype=np.uint8)
        sel = self.pixels[:, 2] == k
        if sel.any():
            out[self.pixels[sel, 0], self.pixels[sel, 1]] = 1
        return out


@dataclass(frozen=True)
class ShiftTable:
    """Per-pixel shift records: (i, j, k) -> (delta_i, delta_j), confidence."""

    pixels: np.ndarray  # (n, 3) int64
    shifts: np.ndarray  # (n, 2) float64
    confidences: np.ndarray  # (n,) float64

    def __len__(self):
        return len(self.pixels)

    def magnitudes(self):
        return np.hypot(self.shifts[:, 0], self.shifts[:, 1])


def save_shift_table(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "delta_i", "delta_j", "confidence"])
        for (i, j, k), (di, dj), c in zip(
            table.pixels.tolist(), table.shifts.tolist(), table.confidences.tolist()
        ):
            w.writerow([i, j, k, repr(di), repr(dj), repr(c)])


def load_shift_table(path):
    pixels, shifts, confs = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != ["i", "j", "k"]:
            raise ContractViolation(f"unrecognized shift table header {header}")
        for row in r:
            pixels.append([int(row[0]), int(row[1]), int(row[2])])
            shifts.append([float(row[3]), float(row[4])])
            confs.append(float(row[5]))
    return ShiftTable(
        np.array(pixels, dtype=np.int64).reshape(-1, 3),
        np.array(shifts, dtype=np.float64).reshape(-1, 2),
        np.array(confs, dtype=np.float64),
    )


def min_distance_match(source_pixels, target_map, max_radius=DEFAULT_MAX_RADIUS):
    """Match each source pixel to its nearest target pixel.

    source_pixels: (n, 2) integer (i, j) coordinates.
    target_map: (H, W) binary map of candidate targets.
    Ties break toward the smallest row-major target coordinate.  Sources with
    no target within max_radius are dropped.

    Returns (kept, shifts): indices into source_pixels and the matching
    (target - source) offsets, both in source order.
    """
    src = np.asarray(source_pixels)
    if src.ndim != 2 or src.shape[1] != 2:
        raise ContractViolation(f"source pixels must be (n, 2), got {src.shape}")
    tgt = np.argwhere(np.asarray(target_map) != 0)  # row-major sorted
    if len(src) == 0 or len(tgt) == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, 2), dtype=np.float64)

    tree = cKDTree(tgt)
    d, _ = tree.query(src, k=1)
    ball = tree.query_ball_point(src, d * (1 + 1e-12) + 1e-9)

    kept, shifts = [], []
    r2 = float(max_radius) ** 2
    src_i = src.astype(np.int64)
    for n, cand in enumerate(ball):
        cand = np.asarray(cand, dtype=np.int64)
        diff = tgt[cand] - src_i[n]
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
        best = int(d2.min())
        if best > r2:
            continue
        winner = cand[d2 == best].min()  # smallest row-major target index
        kept.append(n)
        shifts.append(tgt[winner] - src_i[n])
    return (
        np.array(kept, dtype=np.int64),
        np.array(shifts, dtype=np.float64).reshape(-1, 2),
    )


def build_shift_table(source_labels, confident, max_radius=DEFAULT_MAX_RADIUS):
    """Shift supervision: match labelled pixels to confident pixels per class.

    source_labels: (H, W, C) binary map (typically the noisy labels).
    confident: ConfidentSet from the same prediction shape.
    Each matched source pixel contributes a record whose shift points at its
    nearest confident pixel of the same class.
    """
    lab = np.asarray(source_labels)
    if lab.shape != confident.shape:
        raise ContractViolation(
            f"label shape {lab.shape} does not match confident set shape {confident.shape}"
        )
    conf_map = np.zeros(confident.shape[:2], dtype=np.float64)
    all_pixels, all_shifts, all_confs = [], [], []
    for k in range(lab.shape[2]):
        src = np.argwhere(lab[:, :, k] != 0)
        if len(src) == 0:
            continue
        mask = confident.class_mask(k)
        sel = confident.pixels[:, 2] == k
        conf_map[:] = 0.0
        conf_map[confident.pixels[sel, 0], confident.pixels[sel, 1]] = (
            confident.confidences[sel]
        )
        kept, shifts = min_distance_match(src, mask, max_radius)
        if len(kept) == 0:
            continue
        hit = src[kept]
        tgt = hit + shifts.astype(np.int64)
        all_pixels.append(np.column_stack([hit, np.full(len(hit), k, dtype=np.int64)]))
        all_shifts.append(shifts)
        all_confs.append(conf_map[tgt[:, 0], tgt[:, 1]])
    if not all_pixels:
        return ShiftTable(
            np.empty((0, 3), dtype=np.int64),
            np.empty((0, 2), dtype=np.float64),
            np.empty(0, dtype=np.float64),
        )
    return ShiftTable(
        np.concatenate(all_pixels),
        np.concatenate(all_shifts),
        np.concatenate(all_confs),
    )


@dataclass(frozen=True)
class ShiftHistogram:
    """Distribution of shift magnitudes."""

    bin_edges: np.ndarray  # (B + 1,)
    counts: np.ndarray  # (B,) int64
    magnitudes: np.ndarray  # (n,) raw values

    @property
    def mean(self):
        return float(self.magnitudes.mean()) if len(self.magnitudes) else 0.0

    def fraction_gt(self, threshold):
        """Fraction of shifts strictly larger than threshold; 0 when empty."""
        if len(self.magnitudes) == 0:
            return 0.0
        return float(np.mean(self.magnitudes > threshold))


def shift_statistics(shifts, bin_width=0.5):
    """Histogram the magnitudes of (n, 2) shift vectors."""
    shifts = np.asarray(shifts, dtype=np.float64).reshape(-1, 2)
    if bin_width <= 0:
        raise ContractViolation("bin_width must be positive")
    mags = np.hypot(shifts[:, 0], shifts[:, 1])
    if len(mags) == 0:
        return ShiftHistogram(np.array([0.0, bin_width]), np.zeros(1, dtype=np.int64), mags)
    nbins = max(1, int(np.ceil((mags.max() + 1e-12) / bin_width)))
    edges = np.arange(nbins + 1) * bin_width
    counts, _ = np.histogram(mags, bins=edges)
    return ShiftHistogram(edges, counts.astype(np.int64), mags)
