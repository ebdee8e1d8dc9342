"""Correspondence-based edge metrics and displacement-error analysis.

Predictions are scored against ground truth by one-to-one matching of edge
pixels within a distance tolerance, swept over probability thresholds.  Two
settings: "Thin" thins each binarized prediction before matching, "Raw"
matches it as-is.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree
from skimage.morphology import thin as _thin

from edgedrift.errors import ContractViolation

THIN = "Thin"
RAW = "Raw"
SETTINGS = (THIN, RAW)
DEFAULT_TOLERANCE = 0.0075  # fraction of the image diagonal
PAIR_CUTOFF = 5000  # candidate-pair count above which matching goes greedy
DEFAULT_THRESHOLDS = 99


def thin(edges):
    """Thin a binary edge map to 1-px width; idempotent, topology-preserving."""
    m = np.asarray(edges)
    if m.ndim != 2:
        raise ContractViolation(f"edge map must be 2-D, got shape {m.shape}")
    return _thin(m != 0).astype(np.uint8)


def match_edges(pred, gt, tolerance_px):
    """One-to-one match between predicted and ground-truth edge pixels.

    Pairs at Euclidean distance <= tolerance_px are candidates; the match
    maximizes cardinality (optimal assignment up to PAIR_CUTOFF candidate
    pairs, deterministic nearest-first greedy beyond).

    Returns (matched_pred, matched_gt, used_greedy); the counts are equal
    because the assignment is one-to-one.
    """
    if tolerance_px <= 0:
        raise ContractViolation("tolerance_px must be positive")
    pred_px = np.argwhere(np.asarray(pred) != 0)
    gt_px = np.argwhere(np.asarray(gt) != 0)
    matched, used_greedy = _match_pixels(pred_px, gt_px, float(tolerance_px))
    return matched, matched, used_greedy


def _match_pixels(pred_px, gt_px, tol_px, gt_tree=None):
    if len(pred_px) == 0 or len(gt_px) == 0:
        return 0, False
    tree = gt_tree if gt_tree is not None else cKDTree(gt_px)
    balls = tree.query_ball_point(pred_px, r=tol_px)
    n_pairs = sum(len(b) for b in balls)
    if n_pairs == 0:
        return 0, False
    if n_pairs <= PAIR_CUTOFF:
        rows = np.repeat(np.arange(len(pred_px)), [len(b) for b in balls])
        cols = np.concatenate([np.sort(b) for b in balls if b]).astype(np.int64)
        graph = csr_matrix(
            (np.ones(n_pairs, dtype=np.int8), (rows, cols)),
            shape=(len(pred_px), len(gt_px)),
        )
        assignment = maximum_bipartite_matching(graph, perm_type="column")
        return int((assignment != -1).sum()), False
    # nearest-first greedy, deterministic tie-break on (distance, pred, gt)
    pairs = []
    for p, ball in enumerate(balls):
        for g in ball:
            d = gt_px[g] - pred_px[p]
            pairs.append((float(d[0] * d[0] + d[1] * d[1]), p, g))
    pairs.sort()
    pred_free = np.ones(len(pred_px), dtype=bool)
    gt_free = np.ones(len(gt_px), dtype=bool)
    matched = 0
    for _, p, g in pairs:
        if pred_free[p] and gt_free[g]:
            pred_free[p] = gt_free[g] = False
            matched += 1
    return matched, True


def _f_score(precision, recall):
    denom = precision + recall
    return np.where(denom > 0, 2.0 * precision * recall / np.maximum(denom, 1e-300), 0.0)


def _average_precision(precision, recall):
    """Area under the PR curve with monotone precision interpolation."""
    order = np.argsort(recall, kind="stable")
    r = recall[order]
    p = precision[order]
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    widths = np.diff(np.concatenate([[0.0], r]))
    return float(np.sum(widths * envelope))


@dataclass(frozen=True)
class EvalReport:
    """Dataset-scale edge metrics for one setting and tolerance."""

    setting: str
    tolerance: float  # fraction of the image diagonal
    thresholds: np.ndarray  # (T,)
    precision: np.ndarray  # (C, T) dataset-scale
    recall: np.ndarray  # (C, T)
    ods_f: np.ndarray  # (C,)
    ods_threshold: np.ndarray  # (C,)
    ois_f: np.ndarray  # (C,)
    average_precision: np.ndarray  # (C,)
    valid_classes: np.ndarray  # (C,) bool, False when no image had gt pixels
    excluded: int  # (image, class) tallies skipped for empty gt
    used_greedy: bool  # True when any tally exceeded the optimal-match cutoff

    @property
    def ods_f_mean(self):
        return self._mean(self.ods_f)

    @property
    def ois_f_mean(self):
        return self._mean(self.ois_f)

    @property
    def map_mean(self):
        return self._mean(self.average_precision)

    def _mean(self, values):
        if not self.valid_classes.any():
            return 0.0
        return float(values[self.valid_classes].mean())

    def to_text(self):
        lines = [
            f"setting: {self.setting}",
            f"tolerance: {self.tolerance:.6g} of image diagonal",
            f"matcher: {'greedy on some tallies' if self.used_greedy else 'optimal'}",
            f"excluded empty-gt tallies: {self.excluded}",
        ]
        for k in range(len(self.ods_f)):
            if not self.valid_classes[k]:
                lines.append(f"class {k}: no ground-truth pixels in any image")
                continue
            lines.append(
                f"class {k}: ODS-F {self.ods_f[k]:.4f} @ t={self.ods_threshold[k]:.2f}"
                f"  OIS-F {self.ois_f[k]:.4f}  AP {self.average_precision[k]:.4f}"
            )
        lines.append(
            f"mean: ODS-F {self.ods_f_mean:.4f}  OIS-F {self.ois_f_mean:.4f}"
            f"  mAP {self.map_mean:.4f}"
        )
        return "\n".join(lines) + "\n"

    def save_pr_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "threshold", "precision", "recall"])
            for k in range(self.precision.shape[0]):
                for t in range(self.precision.shape[1]):
                    w.writerow(
                        [
                            k,
                            repr(float(self.thresholds[t])),
                            repr(float(self.precision[k, t])),
                            repr(float(self.recall[k, t])),
                        ]
                    )


def _as_stack(arr, name):
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ContractViolation(f"{name} must be (H, W) or (H, W, C), got {a.shape}")
    return a


def evaluate(
    predictions,
    gts,
    setting=THIN,
    tolerance=DEFAULT_TOLERANCE,
    num_thresholds=DEFAULT_THRESHOLDS,
):
    """Score probability maps against binary ground truth.

    predictions: list of (H, W, C) probability maps in [0, 1].
    gts: aligned list of (H, W, C) binary label maps.
    tolerance: matching radius as a fraction of each image's diagonal.
    """
    if setting not in SETTINGS:
        raise ContractViolation(f"setting must be one of {SETTINGS}, got {setting!r}")
    if tolerance <= 0:
        raise ContractViolation("tolerance must be positive")
    if len(predictions) == 0 or len(predictions) != len(gts):
        raise ContractViolation(
            f"need aligned non-empty lists, got {len(predictions)} predictions"
            f" and {len(gts)} ground truths"
        )
    preds = [_as_stack(p, "prediction") for p in predictions]
    labs = [_as_stack(g, "ground truth") for g in gts]
    C = preds[0].shape[2]
    for p, g in zip(preds, labs):
        if p.shape != g.shape or p.shape[2] != C:
            raise ContractViolation(
                f"prediction shape {p.shape} does not match ground truth {g.shape}"
            )

    T = int(num_thresholds)
    thresholds = np.arange(1, T + 1, dtype=np.float64) / (T + 1)
    agg = np.zeros((3, C, T), dtype=np.int64)  # matched, total_pred, total_gt
    per_image_f = [[] for _ in range(C)]
    excluded = 0
    used_greedy = False

    for pred, gt in zip(preds, labs):
        H, W = pred.shape[:2]
        tol_px = float(tolerance) * float(np.hypot(H, W))
        for k in range(C):
            gt_px = np.argwhere(gt[:, :, k] != 0)
            if len(gt_px) == 0:
                excluded += 1
                continue
            gt_tree = cKDTree(gt_px)
            counts = np.zeros((2, T), dtype=np.int64)  # matched, total_pred
            for t in range(T):
                mask = pred[:, :, k] >= thresholds[t]
                if setting == THIN:
                    mask = _thin(mask)
                pred_px = np.argwhere(mask)
                matched, greedy = _match_pixels(pred_px, gt_px, tol_px, gt_tree)
                used_greedy = used_greedy or greedy
                counts[0, t] = matched
                counts[1, t] = len(pred_px)
            agg[0, k] += counts[0]
            agg[1, k] += counts[1]
            agg[2, k] += len(gt_px)
            p_img = np.where(counts[1] > 0, counts[0] / np.maximum(counts[1], 1), 0.0)
            r_img = counts[0] / len(gt_px)
            per_image_f[k].append(float(_f_score(p_img, r_img).max()))

    precision = np.where(agg[1] > 0, agg[0] / np.maximum(agg[1], 1), 0.0)
    recall = np.where(agg[2] > 0, agg[0] / np.maximum(agg[2], 1), 0.0)
    valid = np.array([len(per_image_f[k]) > 0 for k in range(C)])
    ods_f = np.zeros(C)
    ods_threshold = np.zeros(C)
    ois_f = np.zeros(C)
    ap = np.zeros(C)
    for k in range(C):
        if not valid[k]:
            continue
        f = _f_score(precision[k], recall[k])
        best = int(np.argmax(f))
        ods_f[k] = float(f[best])
        ods_threshold[k] = float(thresholds[best])
        ois_f[k] = float(np.mean(per_image_f[k]))
        ap[k] = _average_precision(precision[k], recall[k])
    return EvalReport(
        setting=setting,
        tolerance=float(tolerance),
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        ods_f=ods_f,
        ods_threshold=ods_threshold,
        ois_f=ois_f,
        average_precision=ap,
        valid_classes=valid,
        excluded=excluded,
        used_greedy=used_greedy,
    )


@dataclass(frozen=True)
class TransitionReport:
    """Error between a predicted displacement field and matched references."""

    mean_error: float
    bin_edges: np.ndarray  # (B + 1,)
    counts: np.ndarray  # (B,) int64
    errors: np.ndarray  # (n,) raw per-pixel errors


def analyze_transition(field, pixels, reference_shifts, bins=24):
    """Per-pixel Euclidean error of a field against matched reference shifts.

    pixels: (n, 2) integer coordinates where the references are anchored
    (typically the matched sources from min_distance_match).
    reference_shifts: (n, 2) offsets the field should reproduce there.
    """
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    ref = np.asarray(reference_shifts, dtype=np.float64).reshape(-1, 2)
    if len(px) != len(ref):
        raise ContractViolation("pixels and reference_shifts lengths differ")
    if len(px) == 0:
        raise ContractViolation("no reference pixels to analyze")
    err = np.hypot(
        field.delta_i[px[:, 0], px[:, 1]] - ref[:, 0],
        field.delta_j[px[:, 0], px[:, 1]] - ref[:, 1],
    )
    hi = max(float(err.max()), 1e-9)
    counts, edges = np.histogram(err, bins=bins, range=(0.0, hi))
    return TransitionReport(float(err.mean()), edges, counts.astype(np.int64), err)
