"""Synthetic scenes with exact boundary annotations and controlled label drift.

Corruption follows the repo's field convention: the returned field phi lives
on the noisy grid and noisy(p) = clean(round(p + phi(p))), so the field that
generated the labels is exactly the field that undoes them.  Shift magnitude
grows with local edge density (busy regions drift more) and is rescaled so
the mean magnitude on edge pixels equals noise_level.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon
from skimage.morphology import thin as _thin
from skimage.transform import resize

from scipy.special import expit

from edgedrift.density import local_edge_density
from edgedrift.errors import ContractViolation
from edgedrift.fields import DisplacementField, load_field, save_field

PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.30, 0.75, 0.35],
        [0.25, 0.40, 0.85],
        [0.80, 0.70, 0.20],
        [0.60, 0.30, 0.75],
    ]
)

SPLITS = ("train", "val-noisy", "val-clean")

# Magnitude mode mixture for corrupt_labels: careful regions drift about
# BUMP_LO units, sloppy regions BUMP_HI.  The sloppy mode covers an exact
# per-scene fraction of edge pixels (quantile threshold on a smooth field),
# with higher local density pulling pixels toward the sloppy mode and
# scaling magnitude on top.
BUMP_LO = 1.0
BUMP_HI = 4.0
OCCUPANCY_FRACTION = 0.22
BUMP_WIDTH = 0.08
BUMP_DENSITY_PULL = 0.8
SIGN_SOFTNESS = 0.35
# Per-image magnitude remap targets: after A * r^gamma, edge-pixel magnitudes
# have mean == noise_level and this fraction above 0.8 * noise_level.
# Magnitudes are then soft-capped at CAP_RATIO * noise_level.
FRAC_ABOVE_TARGET = 0.26
FRAC_THRESHOLD_RATIO = 0.8
CAP_RATIO = 3.5


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 8 bit
    clean_labels: np.ndarray  # (H, W, C) uint8, 1-px boundaries
    noisy_labels: np.ndarray  # (H, W, C) uint8
    true_field: DisplacementField
    seed: int
    noise_level: float


def _random_mask(rng, size):
    mask = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        r = int(rng.uniform(0.15, 0.85) * size)
        c = int(rng.uniform(0.15, 0.85) * size)
        ra = max(3, rng.uniform(0.08, 0.28) * size)
        rb = max(3, rng.uniform(0.08, 0.28) * size)
        rot = rng.uniform(0, np.pi)
        rr, cc = draw_ellipse(r, c, ra, rb, shape=mask.shape, rotation=rot)
    else:
        cy = rng.uniform(0.2, 0.8) * size
        cx = rng.uniform(0.2, 0.8) * size
        n = int(rng.integers(3, 8))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(0.08, 0.26, n) * size
        rr, cc = draw_polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=mask.shape)
    mask[rr, cc] = True
    return mask


def _boundary(mask):
    er = ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))
    return mask & ~er


def generate_scene(seed, size=96, num_classes=3, complexity=1.0, noise_level=2.5):
    """Deterministic scene: occluding colored shapes on a smooth background.

    complexity 0 draws a single convex shape for class 0; larger values add
    more (and more overlapping) shapes per class.  Labels are the 1-px-wide
    boundaries of each shape's visible region, one channel per class.
    """
    if size % 2 or size < 32:
        raise ContractViolation(f"size must be even and >= 32, got {size}")
    if num_classes < 1:
        raise ContractViolation("need at least one class")
    rng = np.random.default_rng(seed)

    coarse = rng.uniform(0.25, 0.75, (3, 3, 3))
    image = resize(coarse, (size, size), order=1, anti_aliasing=False)

    if complexity <= 0:
        plan = [(0, 1)]
    else:
        plan = [(k, 1 + int(rng.poisson(complexity))) for k in range(num_classes)]
    shapes = []  # (class, mask)
    for k, count in plan:
        for _ in range(count):
            if complexity <= 0:
                mask = np.zeros((size, size), dtype=bool)
                r = int(rng.uniform(0.3, 0.7) * size)
                c = int(rng.uniform(0.3, 0.7) * size)
                rr, cc = draw_ellipse(
                    r, c, 0.22 * size, 0.16 * size, shape=mask.shape,
                    rotation=rng.uniform(0, np.pi),
                )
                mask[rr, cc] = True
            else:
                mask = _random_mask(rng, size)
            if mask.any():
                shapes.append((k, mask))

    order = rng.permutation(len(shapes))
    shape_map = np.zeros((size, size), dtype=np.int64)  # 0 = background
    for rank, idx in enumerate(order):
        shape_map[shapes[idx][1]] = rank + 1

    yy, xx = np.mgrid[0:size, 0:size] / size
    for rank, idx in enumerate(order):
        k, _ = shapes[idx]
        visible = shape_map == rank + 1
        if not visible.any():
            continue
        color = np.clip(PALETTE[k % len(PALETTE)] + rng.normal(0, 0.08, 3), 0.05, 0.95)
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * yy + np.sin(theta) * xx) * rng.uniform(0.0, 0.25)
        image[visible] = color + ramp[visible, None]

    image = image + rng.normal(0, 0.02, image.shape)
    image = (np.clip(image, 0, 1) * 255).round().astype(np.uint8) / np.float32(255)

    clean = np.zeros((size, size, num_classes), dtype=np.uint8)
    for rank, idx in enumerate(order):
        k, _ = shapes[idx]
        visible = shape_map == rank + 1
        if visible.any():
            clean[:, :, k] |= _boundary(visible).astype(np.uint8)
    clean = rethin(clean)

    density = local_edge_density(clean.any(axis=-1))
    noisy, field = corrupt_labels(clean, density.values, noise_level, seed)
    return SyntheticScene(
        image.astype(np.float32), clean, noisy, field, int(seed), float(noise_level)
    )


def gather_labels(labels, field):
    """Nearest-neighbour gather: out[p] = labels[round(p + field[p])], clamped."""
    lab = np.asarray(labels)
    H, W = lab.shape[:2]
    ii = np.clip(np.round(np.arange(H)[:, None] + field.delta_i), 0, H - 1).astype(np.intp)
    jj = np.clip(np.round(np.arange(W)[None, :] + field.delta_j), 0, W - 1).astype(np.intp)
    return lab[ii, jj]


def push_labels(labels, field):
    """Scatter each on-pixel p to round(p + field[p]); the reverse of gather."""
    lab = np.asarray(labels)
    H, W = lab.shape[:2]
    out = np.zeros_like(lab)
    src = np.argwhere(lab.any(axis=-1) if lab.ndim == 3 else lab != 0)
    if len(src) == 0:
        return out
    ti = np.clip(np.round(src[:, 0] + field.delta_i[src[:, 0], src[:, 1]]), 0, H - 1).astype(np.intp)
    tj = np.clip(np.round(src[:, 1] + field.delta_j[src[:, 0], src[:, 1]]), 0, W - 1).astype(np.intp)
    out[ti, tj] = lab[src[:, 0], src[:, 1]]
    return out


def rethin(labels):
    """Thin each channel back to 1-px width (no 2x2 solid blocks survive)."""
    lab = np.asarray(labels)
    if lab.ndim == 2:
        return _thin(lab != 0).astype(np.uint8)
    out = np.zeros_like(lab, dtype=np.uint8)
    for k in range(lab.shape[2]):
        out[:, :, k] = _thin(lab[:, :, k] != 0)
    return out


def corrupt_labels(
    clean_labels,
    density,
    noise_level,
    seed,
    smooth_sigma=8.0,
    base=0.7,
    gain=0.3,
):
    """Displace labels by a smooth density-correlated field.

    Returns (noisy_labels, field) where noisy = rethin(gather(clean, field)).
    The field points along the local curve normal (annotators wobble across a
    contour, not along it, and sliding along the curve would be unobservable
    anyway).  Magnitudes are bimodal: a smooth occupancy field switches
    between a careful mode and a sloppy mode roughly BUMP_HI/BUMP_LO larger,
    with high density (normalized to unit max) pulling pixels toward the
    sloppy mode and scaling magnitude by base + gain * density on top.  The
    field is rescaled so the mean magnitude over edge pixels equals
    noise_level.
    """
    clean = np.asarray(clean_labels)
    if clean.ndim != 3:
        raise ContractViolation(f"expected (H, W, C) labels, got {clean.shape}")
    H, W, _ = clean.shape
    dens = np.asarray(density, dtype=np.float64)
    if dens.shape != (H, W):
        raise ContractViolation(f"density shape {dens.shape} does not match labels")
    if noise_level < 0:
        raise ContractViolation("noise_level must be non-negative")

    edge = clean.any(axis=-1)
    if noise_level == 0 or not edge.any():
        field = DisplacementField.zeros(H, W)
        return clean.astype(np.uint8).copy(), field

    rng = np.random.default_rng(seed)
    # Normal orientation (mod pi) of the nearest curve.  Double-angle
    # encoding lets opposite-side gradients reinforce instead of cancel,
    # which fills in the ridge top where the raw gradient vanishes.
    s = ndimage.gaussian_filter(edge.astype(np.float64), 2.0)
    gi, gj = np.gradient(s)
    d1 = ndimage.gaussian_filter(gi * gi - gj * gj, 6.0)
    d2 = ndimage.gaussian_filter(2.0 * gi * gj, 6.0)
    psi = 0.5 * np.arctan2(d2, d1)
    ni, nj = np.cos(psi), np.sin(psi)

    def smooth_unit(sigma):
        z = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma)
        return z / max(np.sqrt(np.mean(z**2)), 1e-12)

    peak = dens.max()
    densn = dens / peak if peak > 0 else np.zeros_like(dens)
    pull = BUMP_DENSITY_PULL * (densn - densn[edge].mean())
    u = smooth_unit(1.5 * smooth_sigma) + pull
    occupancy = expit((u - np.quantile(u[edge], 1.0 - OCCUPANCY_FRACTION)) / BUMP_WIDTH)
    mag = BUMP_LO + (BUMP_HI - BUMP_LO) * occupancy
    sgn = np.tanh(smooth_unit(smooth_sigma) / SIGN_SOFTNESS)
    amp = sgn * mag * (base + gain * densn)
    # Final light smoothing irons out the orientation-wrap lines where psi
    # jumps by pi; the scale factor is applied afterwards so the edge-pixel
    # mean still comes out exact.
    di = ndimage.gaussian_filter(amp * ni, 1.0)
    dj = ndimage.gaussian_filter(amp * nj, 1.0)
    r = np.hypot(di, dj)
    r_edge = r[edge]
    if r_edge.mean() < 1e-12:
        return clean.astype(np.uint8).copy(), DisplacementField.zeros(H, W)
    # Remap magnitudes through A * min(r, q99.5)^gamma; gamma is bisected so
    # the fraction of edge magnitudes above the threshold hits the target
    # while A keeps the edge mean exactly at noise_level.  frac is monotone
    # decreasing in gamma (more skew pushes mass below the mean).
    r_cap = np.quantile(r_edge, 0.995)
    r_edge = np.minimum(r_edge, r_cap)
    threshold = FRAC_THRESHOLD_RATIO * noise_level
    limit = CAP_RATIO * noise_level

    def solve_scale(gamma):
        # Fixed-point for mean(limit * tanh(a * m / limit)) == noise_level;
        # convergence is slow once the cap saturates, hence the iteration
        # count and the relative-change exit.
        m = r_edge**gamma
        a = noise_level / m.mean()
        for _ in range(200):
            step = noise_level / (limit * np.tanh(a * m / limit)).mean()
            a *= step
            if abs(step - 1.0) < 1e-8:
                break
        return a

    def frac_above(gamma):
        a = solve_scale(gamma)
        return (limit * np.tanh(a * r_edge**gamma / limit) > threshold).mean()

    lo_g, hi_g = 0.5, 4.0
    if frac_above(lo_g) <= FRAC_ABOVE_TARGET:
        gamma = lo_g
    elif frac_above(hi_g) >= FRAC_ABOVE_TARGET:
        gamma = hi_g
    else:
        for _ in range(30):
            gamma = 0.5 * (lo_g + hi_g)
            if frac_above(gamma) > FRAC_ABOVE_TARGET:
                lo_g = gamma
            else:
                hi_g = gamma
    a = solve_scale(gamma)
    # pixels above the cap quantile keep the capped magnitude exactly, so the
    # edge-pixel mean stays pinned to noise_level
    r_capped = np.maximum(np.minimum(r, r_cap), 1e-12)
    mag = limit * np.tanh(a * r_capped**gamma / limit)
    ratio = mag / np.maximum(r, 1e-12)

    field = DisplacementField(di * ratio, dj * ratio)
    noisy = rethin(gather_labels(clean, field))
    return noisy, field


@dataclass
class SceneRecord:
    """One stored scene; clean labels and the field are absent in real-data
    mode where only images and (noisy) annotations exist."""

    scene_id: str
    image: np.ndarray
    clean_labels: np.ndarray | None
    noisy_labels: np.ndarray | None
    field: DisplacementField | None


class Dataset:
    """Scenes grouped into train / val-noisy / val-clean splits."""

    def __init__(self, splits, meta):
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise ContractViolation(f"unknown splits {sorted(unknown)}")
        self.splits = splits
        self.meta = meta

    @classmethod
    def generate(
        cls,
        seed,
        n_train,
        n_val,
        size=96,
        num_classes=3,
        complexity=1.0,
        noise_level=2.5,
    ):
        rng = np.random.default_rng(seed)
        counts = {"train": n_train, "val-noisy": n_val, "val-clean": n_val}
        splits = {}
        index = 0
        for split in SPLITS:
            records = []
            for _ in range(counts[split]):
                scene_seed = int(rng.integers(0, 2**63 - 1))
                scene = generate_scene(scene_seed, size, num_classes, complexity, noise_level)
                records.append(
                    SceneRecord(
                        f"scene_{index:04d}",
                        scene.image,
                        scene.clean_labels,
                        scene.noisy_labels,
                        scene.true_field,
                    )
                )
                index += 1
            splits[split] = records
        meta = {
            "complexity": complexity,
            "noise_level": noise_level,
            "num_classes": num_classes,
            "seed": seed,
            "size": size,
            "version": 1,
        }
        return cls(splits, meta)

    def split(self, name):
        if name not in self.splits:
            raise ContractViolation(f"no split named {name!r}")
        return self.splits[name]

    @property
    def num_classes(self):
        return self.meta["num_classes"]

    def write(self, root):
        root = Path(root)
        for sub in ("images", "labels_clean", "labels_noisy", "fields"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        lines = []
        for split in SPLITS:
            for rec in self.splits.get(split, []):
                sid = rec.scene_id
                img = (rec.image * 255).round().astype(np.uint8)
                Image.fromarray(img, mode="RGB").save(root / "images" / f"{sid}.png")
                for kind, labels in (("labels_clean", rec.clean_labels), ("labels_noisy", rec.noisy_labels)):
                    if labels is None:
                        continue
                    for k in range(labels.shape[2]):
                        Image.fromarray(labels[:, :, k] * np.uint8(255), mode="L").save(
                            root / kind / f"{sid}_k{k}.png"
                        )
                if rec.field is not None:
                    save_field(root / "fields" / f"{sid}.field", rec.field)
                lines.append(json.dumps({"id": sid, "split": split}, sort_keys=True))
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        (root / "meta.json").write_text(json.dumps(self.meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, root):
        root = Path(root)
        missing = [n for n in ("meta.json", "manifest.jsonl", "images") if not (root / n).exists()]
        if missing:
            raise ContractViolation(f"{root} is not a dataset, missing: {', '.join(missing)}")
        meta = json.loads((root / "meta.json").read_text())
        C = meta["num_classes"]

        def read_labels(sub, sid):
            # A label kind is all-or-nothing per dataset: absent directory or
            # absent first file means this kind was never written (real-data
            # mode); a partial class set is corruption worth flagging.
            paths = [root / sub / f"{sid}_k{k}.png" for k in range(C)]
            present = [p for p in paths if p.exists()]
            if not present:
                return None
            if len(present) < C:
                lost = [str(p) for p in paths if not p.exists()]
                raise ContractViolation(f"{root} is malformed, missing: {', '.join(lost)}")
            return np.stack(
                [np.asarray(Image.open(p)) > 127 for p in paths], axis=-1
            ).astype(np.uint8)

        splits = {s: [] for s in SPLITS}
        for line in (root / "manifest.jsonl").read_text().splitlines():
            entry = json.loads(line)
            sid, split = entry["id"], entry["split"]
            img_path = root / "images" / f"{sid}.png"
            if not img_path.exists():
                raise ContractViolation(f"{root} is malformed, missing: {img_path}")
            image = np.asarray(Image.open(img_path), dtype=np.float32) / np.float32(255)
            clean = read_labels("labels_clean", sid)
            noisy = read_labels("labels_noisy", sid)
            if clean is None and noisy is None:
                raise ContractViolation(
                    f"{root} is malformed, scene {sid} has neither clean nor noisy labels"
                )
            field_path = root / "fields" / f"{sid}.field"
            field = load_field(field_path) if field_path.exists() else None
            splits[split].append(SceneRecord(sid, image, clean, noisy, field))
        return cls(splits, meta)


def save_dataset(dataset, root):
    dataset.write(root)


def load_dataset(root):
    return Dataset.load(root)
