"""Three-stage training: warm up the detector on the labels as given, fit the
displacement localizer to explain label drift, then retrain the detector
through the frozen localizer.

Conventions:
- objectives are normalized per pixel (summed losses divided by B*H*W*C) so
  learning rates stay comparable across image and batch sizes;
- warped probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before the
  cross-entropy terms, with gradients passed straight through the clamp;
- each stage touches only its own model: the warm-up and joint stages never
  write localizer parameters, the localizer stage never writes detector
  parameters.
"""

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from edgedrift import losses as L
from edgedrift.data import Dataset, push_labels, rethin
from edgedrift.density import DEFAULT_WINDOW, density_loss, density_loss_grad, local_edge_density
from edgedrift.errors import ContractViolation
from edgedrift.evaluation import THIN, SETTINGS, evaluate, thin
from edgedrift.fields import (
    DisplacementField,
    normalized_magnitude,
    normalized_magnitude_vjp,
    sample_with_field,
    sampler_vjp,
    unmatched_mask,
)
from edgedrift.matching import (
    ConfidentSet,
    DEFAULT_MAX_RADIUS,
    ShiftTable,
    build_shift_table,
)
from edgedrift.models import (
    EdgeDetector,
    FieldLocalizer,
    extract_confident,
    save_checkpoint,
)
from edgedrift.nn import SGD, grads_finite

PROB_CLAMP = 1e-5
SELECT_MIN_EPOCHS = 5
SELECT_BURN_IN = 5
SELECT_JUMP = 0.02
SELECT_WINDOW = 3
CONSISTENCY_RADIUS = 4.0  # neighbourhood for the shift-consistency test, px


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the three stages plus curve-evaluation knobs."""

    warmup_epochs: int = 30
    localizer_epochs: int = 10
    joint_epochs: int = 10
    warmup_lr: float = 0.2
    localizer_lr: float = 0.05
    joint_lr: float = 0.05
    momentum: float = 0.9
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    batch_size: int = 8
    crop: int = 64  # even square crop; clamped to the scene size
    augment: bool = True  # random crops and flips
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    density_window: int = DEFAULT_WINDOW  # window for the local-density target
    density_unit_rescale: bool = True  # scale the density target to unit peak
    match_radius: float = DEFAULT_MAX_RADIUS  # shift-table search radius, px
    thin_matching: bool = False  # skeletonize the confident raster for matching
    consistency_px: float = 0.0  # drop shifts this far from the local median, 0 keeps all
    rematch_every: int = 0  # epochs between rebuilding tables against the field, 0 never
    field_cap: float = 0.0  # tanh bound on localizer offsets, 0 disables
    field_smooth: float = 0.0  # Gaussian sigma on localizer offsets, 0 disables
    clip_norm: float = 0.0  # global gradient-norm clip per step, 0 disables
    eval_limit: int = 16  # scenes per split scored for the learning curve
    eval_thresholds: int = 25
    eval_setting: str = THIN
    eval_tolerance: float = 0.022  # fraction of the image diagonal

    def __post_init__(self):
        for name in ("warmup_epochs", "localizer_epochs", "joint_epochs"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        for name in ("warmup_lr", "localizer_lr", "joint_lr"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractViolation(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay <= 0:
            raise ContractViolation("lr_decay must be positive")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.crop < 2 or self.crop % 2:
            raise ContractViolation(f"crop must be even and >= 2, got {self.crop}")
        if self.density_window < 1 or self.density_window % 2 == 0:
            raise ContractViolation(
                f"density_window must be odd and positive, got {self.density_window}"
            )
        if self.match_radius <= 0:
            raise ContractViolation("match_radius must be positive")
        if self.rematch_every < 0:
            raise ContractViolation("rematch_every must be >= 0")
        if self.eval_setting not in SETTINGS:
            raise ContractViolation(f"eval_setting must be one of {SETTINGS}")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        weights = d.pop("weights", None)
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ContractViolation(f"unknown config keys: {sorted(bad)}")
        cfg = replace(cls(), **d)
        if weights is not None:
            cfg = replace(cfg, weights=L.LossWeights.from_dict(weights))
        return cfg


def full_scale_config():
    """The published full-scale recipe, for reference only.

    These rates are tied to pretrained backbone logits and 472-px crops; they
    are far too small for the nets and scenes in this repo.
    """
    return TrainConfig(
        warmup_epochs=30,
        localizer_epochs=10,
        joint_epochs=10,
        warmup_lr=5e-8,
        localizer_lr=2.5e-8,
        joint_lr=2.5e-8,
        crop=472,
        batch_size=8,
    )


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    split: str
    ods_f: float
    map_score: float
    loss: float


class LearningCurve:
    """Per-epoch metric records; epochs strictly increase within each split."""

    def __init__(self, points=()):
        self.points = []
        for p in points:
            self.add(p.epoch, p.split, p.ods_f, p.map_score, p.loss)

    def add(self, epoch, split, ods_f, map_score, loss):
        last = max((p.epoch for p in self.points if p.split == split), default=0)
        if epoch <= last:
            raise ContractViolation(
                f"epoch {epoch} for split {split!r} does not increase past {last}"
            )
        self.points.append(CurvePoint(int(epoch), split, float(ods_f), float(map_score), float(loss)))

    def series(self, split, metric="ods_f"):
        """(epochs, values) for one split, in epoch order."""
        rows = sorted((p.epoch, getattr(p, metric)) for p in self.points if p.split == split)
        return [e for e, _ in rows], [v for _, v in rows]

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "split", "ods_f", "map", "loss"])
            for p in self.points:
                w.writerow([p.epoch, p.split, repr(p.ods_f), repr(p.map_score), repr(p.loss)])

    @classmethod
    def load_csv(cls, path):
        curve = cls()
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != ["epoch", "split", "ods_f", "map", "loss"]:
                raise ContractViolation(f"unrecognized curve header {header}")
            for row in r:
                curve.add(int(row[0]), row[1], float(row[2]), float(row[3]), float(row[4]))
        return curve


def snapshot_params(model):
    return {k: v.copy() for k, v in model.params().items()}


def restore_params(model, snapshot):
    params = model.params()
    if set(params) != set(snapshot):
        raise ContractViolation("snapshot parameter names do not match the model")
    for k, p in params.items():
        p[:] = snapshot[k]


def _augmented(rng, arrays, crop, augment):
    """Aligned random crop and flips across a list of (H, W, ...) arrays."""
    H, W = arrays[0].shape[:2]
    if not augment:
        return list(arrays)
    c = min(crop, H, W)
    oi = int(rng.integers(0, H - c + 1))
    oj = int(rng.integers(0, W - c + 1))
    out = [a[oi : oi + c, oj : oj + c] for a in arrays]
    if rng.random() < 0.5:
        out = [a[::-1] for a in out]
    if rng.random() < 0.5:
        out = [a[:, ::-1] for a in out]
    return [np.ascontiguousarray(a) for a in out]


def _curve_metrics(detector, records, against_clean, config):
    take = records[: config.eval_limit]
    preds = [detector.detect(r.image) for r in take]
    gts = [(r.clean_labels if against_clean else r.noisy_labels) for r in take]
    rep = evaluate(
        preds,
        gts,
        setting=config.eval_setting,
        tolerance=config.eval_tolerance,
        num_thresholds=config.eval_thresholds,
    )
    return rep.ods_f_mean, rep.map_mean


def _record_epoch(curve, detector, dataset, config, epoch, train_loss):
    if config.eval_limit <= 0:
        curve.add(epoch, "train", math.nan, math.nan, train_loss)
        return
    ods, ap = _curve_metrics(detector, dataset.split("train"), False, config)
    curve.add(epoch, "train", ods, ap, train_loss)
    val = dataset.split("val-clean")
    if val and all(r.clean_labels is not None for r in val[: config.eval_limit]):
        ods, ap = _curve_metrics(detector, val, True, config)
        curve.add(epoch, "val-clean", ods, ap, math.nan)


def _abort_if_diverged(loss, model, stage, epoch):
    if not np.isfinite(loss) or not grads_finite(model.grads()):
        raise ContractViolation(
            f"{stage} training diverged (non-finite loss or gradient) at epoch {epoch}"
        )


def _clip_grads(grads, clip_norm):
    """Scale all gradients down when their global norm exceeds clip_norm."""
    if clip_norm <= 0:
        return
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale


def warmup_train(dataset, config, detector=None, checkpoint_dir=None):
    """Stage 1: fit the detector to the labels as given.

    Returns (detector, snapshots, curve) where snapshots is a list of
    (epoch, parameter copies) taken after every epoch.  The curve records
    train-split metrics against the training labels and, when clean
    validation labels exist, val-clean metrics.
    """
    records = dataset.split("train")
    if not records:
        raise ContractViolation("training split is empty")
    if detector is None:
        detector = EdgeDetector(dataset.num_classes, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = SGD(detector.params(), config.warmup_lr, config.momentum)
    curve = LearningCurve()
    snapshots = []
    stage_dir = _stage_dir(checkpoint_dir, 1)
    for epoch in range(1, config.warmup_epochs + 1):
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            imgs, labs = [], []
            for rec in batch:
                img, lab = _augmented(
                    rng, (rec.image, rec.noisy_labels), config.crop, config.augment
                )
                imgs.append(img)
                labs.append(lab)
            images = np.stack(imgs).astype(np.float32)
            labels = np.stack(labs).astype(np.float64)
            probs = detector.forward(images)
            n = probs.size
            loss = L.edge_loss(probs, labels) / n
            detector.zero_grad()
            # d(sum BCE)/d logits = probs - labels, done in logit space for
            # stability at saturated probabilities
            glogits = ((probs.astype(np.float64) - labels) / n).astype(np.float32)
            detector.backward_from_logits(glogits)
            _abort_if_diverged(loss, detector, "warm-up", epoch)
            _clip_grads(detector.grads(), config.clip_norm)
            opt.step(detector.grads())
            epoch_loss += loss
            batches += 1
        opt.lr *= config.lr_decay
        _record_epoch(curve, detector, dataset, config, epoch, epoch_loss / batches)
        snapshots.append((epoch, snapshot_params(detector)))
        if stage_dir is not None:
            save_checkpoint(stage_dir / f"epoch_{epoch}.ckpt", detector, {"epoch": epoch})
    return detector, snapshots, curve


def select_warmup(curve):
    """Pick the warm-up epoch at the onset of the late metric surge.

    Uses the train-split ODS-F series: smooths with a trailing 3-epoch mean,
    then returns the first epoch past the burn-in whose smoothed per-epoch
    jump is >= SELECT_JUMP.  Without such a jump, falls back to the epoch of
    maximum curvature of the smoothed series; a flat or linear series
    resolves to the middle epoch by convention.
    """
    epochs, ods = curve.series("train", "ods_f")
    if len(epochs) < SELECT_MIN_EPOCHS:
        raise ContractViolation(
            f"need at least {SELECT_MIN_EPOCHS} recorded epochs, got {len(epochs)}"
        )
    o = np.asarray(ods, dtype=np.float64)
    smoothed = np.array(
        [o[max(0, t - SELECT_WINDOW + 1) : t + 1].mean() for t in range(len(o))]
    )
    jumps = np.diff(smoothed)
    for t in range(SELECT_BURN_IN, len(smoothed)):
        if jumps[t - 1] >= SELECT_JUMP:
            return epochs[t]
    # skip the partial-window entries so a linear series reads as zero curvature
    full = smoothed[SELECT_WINDOW - 1 :]
    curvature = np.abs(np.diff(full, 2)) if len(full) >= 3 else np.empty(0)
    if len(curvature) == 0 or curvature.max() <= 1e-9:
        return epochs[len(epochs) // 2]
    return epochs[int(np.argmax(curvature)) + SELECT_WINDOW]


def _stage_dir(checkpoint_dir, stage):
    if checkpoint_dir is None:
        return None
    d = Path(checkpoint_dir) / f"stage{stage}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _clamped_probs(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def train_localizer(detector, dataset, config, localizer=None, checkpoint_dir=None):
    """Stage 2: fit the localizer to explain the gap between the detector's
    confident pixels and the training labels.  The detector stays frozen.

    Returns (localizer, info) with info = {"losses": per-epoch means,
    "skipped_sup": batches that had no shift supervision}.
    """
    records = dataset.split("train")
    if not records:
        raise ContractViolation("training split is empty")
    if localizer is None:
        localizer = FieldLocalizer(
            dataset.num_classes,
            seed=config.seed,
            cap=config.field_cap,
            output_smooth=config.field_smooth,
        )
    rng = np.random.default_rng(config.seed)
    opt = SGD(localizer.params(), config.localizer_lr, config.momentum)
    weights = config.weights
    stage_dir = _stage_dir(checkpoint_dir, 2)
    losses_per_epoch = []
    skipped_sup = 0
    cache = [None] * len(records)  # per-scene detector outputs when static
    for epoch in range(1, config.localizer_epochs + 1):
        if (
            config.rematch_every > 0
            and not config.augment
            and epoch > 1
            and (epoch - 1) % config.rematch_every == 0
        ):
            for idx, fixed in enumerate(cache):
                if fixed is None:
                    continue
                rec = records[idx]
                probs, raster, _, dens = fixed
                confident = extract_confident(probs, weights.confidence)
                fld = localizer.localize(rec.image, raster, rec.noisy_labels)
                table = _consistent_table(
                    _offset_table(
                        rec.noisy_labels,
                        _matching_confident(confident, probs, config),
                        fld,
                        config,
                    ),
                    config,
                )
                cache[idx] = (probs, raster, table, dens)
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        items = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            localizer.zero_grad()
            batch_n = len(batch)
            for idx in batch:
                rec = records[idx]
                if config.augment:
                    img, noisy = _augmented(
                        rng, (rec.image, rec.noisy_labels), config.crop, True
                    )
                    probs = detector.detect(img)
                    fixed = None
                else:
                    if cache[idx] is None:
                        probs = detector.detect(rec.image)
                        confident = extract_confident(probs, weights.confidence)
                        table = _consistent_table(
                            build_shift_table(
                                rec.noisy_labels,
                                _matching_confident(confident, probs, config),
                                config.match_radius,
                            ),
                            config,
                        )
                        dens = _density_target(rec.noisy_labels, config)
                        cache[idx] = (probs, confident.raster(), table, dens)
                    img, noisy = rec.image, rec.noisy_labels
                    fixed = cache[idx]
                if fixed is None:
                    confident = extract_confident(probs, weights.confidence)
                    raster = confident.raster()
                    table = _consistent_table(
                        build_shift_table(
                            noisy, _matching_confident(confident, probs, config), config.match_radius
                        ),
                        config,
                    )
                    dens = _density_target(noisy, config)
                else:
                    probs, raster, table, dens = fixed
                loss, gstack, had_sup = _localizer_item_grads(
                    localizer, img, raster, noisy, probs, table, dens, weights, batch_n
                )
                if not had_sup:
                    skipped_sup += 1
                localizer.backward(gstack[None].astype(np.float32))
                epoch_loss += loss
                items += 1
            _abort_if_diverged(epoch_loss, localizer, "localizer", epoch)
            _clip_grads(localizer.grads(), config.clip_norm)
            opt.step(localizer.grads())
        opt.lr *= config.lr_decay
        losses_per_epoch.append(epoch_loss / items)
        if stage_dir is not None:
            save_checkpoint(stage_dir / f"epoch_{epoch}.ckpt", localizer, {"epoch": epoch})
    return localizer, {"losses": losses_per_epoch, "skipped_sup": skipped_sup}


def _density_target(noisy_labels, config):
    dens = local_edge_density(noisy_labels.any(axis=-1), config.density_window).values
    if config.density_unit_rescale:
        peak = dens.max()
        if peak > 0:
            dens = dens / peak
    return dens


def _offset_table(noisy_labels, confident, fld, config):
    """Shift table matched in the residual frame of the current field.

    Each noisy pixel searches for confident pixels around its estimated
    source instead of around itself.  Once the field is partly learned this
    recovers the matches that a plain nearest-pixel search truncates or
    sends to the wrong curve.
    """
    pixels, shifts, confs = [], [], []
    for k in range(noisy_labels.shape[-1]):
        src = np.argwhere(noisy_labels[..., k] != 0)
        sel = confident.pixels[:, 2] == k
        tgt = confident.pixels[sel, :2].astype(np.float64)
        conf_k = confident.confidences[sel]
        if not len(src) or not len(tgt):
            continue
        est = src + np.stack(
            [fld.delta_i[src[:, 0], src[:, 1]], fld.delta_j[src[:, 0], src[:, 1]]],
            axis=-1,
        )
        dist, j = cKDTree(tgt).query(est, k=1, distance_upper_bound=config.match_radius)
        ok = np.isfinite(dist)
        if not ok.any():
            continue
        ks = np.full((int(ok.sum()), 1), k, dtype=np.int64)
        pixels.append(np.concatenate([src[ok], ks], axis=1))
        shifts.append(tgt[j[ok]] - src[ok])
        confs.append(conf_k[j[ok]])
    if not pixels:
        return ShiftTable(np.zeros((0, 3), np.int64), np.zeros((0, 2)), np.zeros(0))
    return ShiftTable(
        np.concatenate(pixels),
        np.concatenate(shifts).astype(np.float64),
        np.concatenate(confs).astype(np.float64),
    )


def _consistent_table(table, config):
    """Drop shift-table rows that disagree with their neighbourhood median.

    Min-distance matching occasionally latches onto the wrong curve.  Those
    records contradict the locally smooth corruption, while genuine large
    shifts agree with their neighbours, so a local median test separates them.
    """
    tol = config.consistency_px
    if tol <= 0 or len(table) < 4:
        return table
    pts = table.pixels[:, :2].astype(np.float64)
    tree = cKDTree(pts)
    keep = np.ones(len(table), dtype=bool)
    for n, idx in enumerate(tree.query_ball_point(pts, CONSISTENCY_RADIUS)):
        others = [m for m in idx if m != n]
        if len(others) < 3:
            continue
        med = np.median(table.shifts[others], axis=0)
        if math.hypot(*(table.shifts[n] - med)) > tol:
            keep[n] = False
    if keep.all():
        return table
    return ShiftTable(table.pixels[keep], table.shifts[keep], table.confidences[keep])


def _matching_confident(confident, probs, config):
    """Confident set used for shift supervision; optionally skeletonized.

    A soft detector marks a band several pixels wide as confident, and
    matching against the band underestimates every shift by roughly the band
    half-width.  Thinning recovers the ridge line without touching the raster
    fed to the localizer.
    """
    if not config.thin_matching:
        return confident
    raster = confident.raster()
    kept = np.zeros_like(raster)
    for k in range(raster.shape[-1]):
        kept[..., k] = thin(raster[..., k])
    pixels = np.argwhere(kept)
    confs = (
        probs[pixels[:, 0], pixels[:, 1], pixels[:, 2]]
        if len(pixels)
        else np.zeros(0, dtype=np.float64)
    )
    return ConfidentSet(pixels=pixels, confidences=confs, shape=confident.shape)


def _localizer_item_grads(localizer, img, raster, noisy, probs, table, dens, weights, batch_n):
    """Loss terms and field-stack gradient for one image; grads are scaled by
    1/batch_n so accumulating over the batch averages them."""
    stack = localizer.forward(
        img[None].astype(np.float32), raster[None].astype(np.float32), noisy[None].astype(np.float32)
    )[0].astype(np.float64)
    field = _field_from_stack(stack)
    gstack = np.zeros_like(stack)
    scale = 1.0 / batch_n

    had_sup = len(table) > 0
    if had_sup:
        pi, pj = table.pixels[:, 0], table.pixels[:, 1]
        pred_shifts = stack[pi, pj, :]
        sup = L.sup_loss(pred_shifts, table.shifts)
        gsup = L.sup_loss_grad(pred_shifts, table.shifts) * (weights.sup * scale)
        np.add.at(gstack, (pi, pj), gsup)
    else:
        sup = 0.0

    warped = sample_with_field(probs.astype(np.float64), field)
    sim = L.sim_loss(warped, noisy)
    gw = L.sim_loss_grad(warped, noisy) * (weights.sim * scale)
    _, gfield = sampler_vjp(probs.astype(np.float64), field, gw)
    gstack += gfield

    if weights.smooth != 0.0:
        smooth = L.smooth_loss(stack)
        gstack += L.smooth_loss_grad(stack) * (weights.smooth * scale)
    else:
        smooth = None

    mag = normalized_magnitude(field)
    dns = density_loss(mag, dens)
    gmag = density_loss_grad(mag, dens) * (weights.density * scale)
    gstack += normalized_magnitude_vjp(field, gmag)

    return L.field_loss(sup, sim, smooth, dns, weights), gstack, had_sup


def _field_from_stack(stack):
    return DisplacementField(stack[..., 0], stack[..., 1])


def joint_train(detector, localizer, dataset, config, checkpoint_dir=None):
    """Stage 3: retrain the detector through the frozen localizer.

    Per image: warp the prediction by the localized field, fit the warped map
    to the labels as given, and push probability down at pixels the warp
    never reads.  Updates the detector in place; returns (detector, curve).
    """
    records = dataset.split("train")
    if not records:
        raise ContractViolation("training split is empty")
    rng = np.random.default_rng(config.seed)
    opt = SGD(detector.params(), config.joint_lr, config.momentum)
    weights = config.weights
    curve = LearningCurve()
    stage_dir = _stage_dir(checkpoint_dir, 3)
    for epoch in range(1, config.joint_epochs + 1):
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            imgs, labs = [], []
            for rec in batch:
                img, lab = _augmented(
                    rng, (rec.image, rec.noisy_labels), config.crop, config.augment
                )
                imgs.append(img)
                labs.append(lab)
            images = np.stack(imgs).astype(np.float32)
            probs = detector.forward(images)
            gprobs = np.zeros(probs.shape, dtype=np.float64)
            batch_loss = 0.0
            for b, rec in enumerate(batch):
                p = probs[b].astype(np.float64)
                noisy = labs[b].astype(np.float64)
                confident = extract_confident(p, weights.confidence)
                fld = localizer.localize(images[b], confident.raster(), labs[b])
                n = p.size
                warped = _clamped_probs(sample_with_field(p, fld))
                e_loss = L.edge_loss(warped, noisy) / n
                gw = L.edge_loss_grad(warped, noisy) * (weights.edge / (n * len(batch)))
                gvals, _ = sampler_vjp(p, fld, gw)
                gprobs[b] += gvals
                mask = unmatched_mask(fld)
                u_loss = L.unmatched_loss(_clamped_probs(p), mask) / n
                gprobs[b] += L.unmatched_loss_grad(_clamped_probs(p), mask) * (
                    weights.unmatched / (n * len(batch))
                )
                batch_loss += L.joint_loss(e_loss, u_loss, weights) / len(batch)
            detector.zero_grad()
            detector.backward(gprobs.astype(np.float32))
            _abort_if_diverged(batch_loss, detector, "joint", epoch)
            _clip_grads(detector.grads(), config.clip_norm)
            opt.step(detector.grads())
            epoch_loss += batch_loss
            batches += 1
        opt.lr *= config.lr_decay
        _record_epoch(curve, detector, dataset, config, epoch, epoch_loss / batches)
        if stage_dir is not None:
            save_checkpoint(stage_dir / f"epoch_{epoch}.ckpt", detector, {"epoch": epoch})
    return detector, curve


def label_correction_baseline(detector, localizer, dataset, config, checkpoint_dir=None):
    """Move each training label to where the localized field says its content
    came from, then retrain a fresh detector on the corrected labels.

    The comparison baseline for joint training: correction commits to hard
    labels once, joint training keeps the field in the loss.
    """
    corrected = []
    for rec in dataset.split("train"):
        probs = detector.detect(rec.image)
        confident = extract_confident(probs, config.weights.confidence)
        fld = localizer.localize(rec.image, confident.raster(), rec.noisy_labels)
        moved = rethin(push_labels(rec.noisy_labels, fld))
        corrected.append(replace(rec, noisy_labels=moved))
    splits = {name: list(dataset.split(name)) for name in dataset.splits}
    splits["train"] = corrected
    fixed = Dataset(splits, dict(dataset.meta))
    fresh = EdgeDetector(dataset.num_classes, seed=config.seed)
    return warmup_train(fixed, config, detector=fresh, checkpoint_dir=checkpoint_dir)
