"""Loss terms for the detector and the field localizer.

Conventions pinned here and relied on by the tests:
- edge_loss and unmatched_loss are SUMS over pixels and channels, not means;
  trainers rescale the objective, the definitions stay raw.
- probabilities are clamped to [EPS_PROB, 1 - EPS_PROB] before any log.
- everything is computed in float64 regardless of input dtype.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from edgedrift.errors import ContractViolation

EPS_PROB = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the individual terms plus the confidence cut.

    Defaults follow the published recipe: field objective weights
    (sup, sim, smooth, density) = (0.01, 1, 0, 3), joint objective weights
    (edge, unmatched) = (1, 1), confidence cut 0.1.
    """

    sup: float = 0.01
    sim: float = 1.0
    smooth: float = 0.0
    density: float = 3.0
    edge: float = 1.0
    unmatched: float = 1.0
    confidence: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ContractViolation(f"unknown loss weight keys: {sorted(bad)}")
        return replace(cls(), **d)


def _clamped(pred):
    p = np.asarray(pred, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ContractViolation("probabilities outside [0, 1]")
    return np.clip(p, EPS_PROB, 1.0 - EPS_PROB)


def _check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def edge_loss(pred, label):
    """Binary cross-entropy SUMMED over all pixels and channels."""
    _check_same_shape(pred, label, "edge_loss")
    p = _clamped(pred)
    y = np.asarray(label, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def edge_loss_grad(pred, label):
    """d edge_loss / d pred; zero where the clamp is active."""
    _check_same_shape(pred, label, "edge_loss")
    p = _clamped(pred)
    y = np.asarray(label, dtype=np.float64)
    g = (p - y) / (p * (1.0 - p))
    raw = np.asarray(pred, dtype=np.float64)
    g[(raw < EPS_PROB) | (raw > 1.0 - EPS_PROB)] = 0.0
    return g


def sup_loss(pred_shifts, target_shifts):
    """Mean over records of the squared shift error (both components summed).

    Empty supervision yields 0; callers flag that batch themselves.
    """
    a = np.asarray(pred_shifts, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(target_shifts, dtype=np.float64).reshape(-1, 2)
    _check_same_shape(a, b, "sup_loss")
    if len(a) == 0:
        return 0.0
    return float(np.sum((a - b) ** 2) / len(a))


def sup_loss_grad(pred_shifts, target_shifts):
    a = np.asarray(pred_shifts, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(target_shifts, dtype=np.float64).reshape(-1, 2)
    _check_same_shape(a, b, "sup_loss")
    if len(a) == 0:
        return np.zeros_like(a)
    return 2.0 * (a - b) / len(a)


def sim_loss(transformed, noisy):
    """Mean squared gap between warped prediction and noisy label."""
    _check_same_shape(transformed, noisy, "sim_loss")
    t = np.asarray(transformed, dtype=np.float64)
    y = np.asarray(noisy, dtype=np.float64)
    return float(np.mean((t - y) ** 2))


def sim_loss_grad(transformed, noisy):
    t = np.asarray(transformed, dtype=np.float64)
    y = np.asarray(noisy, dtype=np.float64)
    _check_same_shape(t, y, "sim_loss")
    return 2.0 * (t - y) / t.size


def smooth_loss(field_stack):
    """Mean squared forward difference of both field components.

    Sums (d[i+1,j]-d[i,j])^2 and (d[i,j+1]-d[i,j])^2 over valid positions
    and both planes, divided by the pixel count H*W.
    """
    f = np.asarray(field_stack, dtype=np.float64)
    if f.ndim != 3 or f.shape[-1] != 2:
        raise ContractViolation(f"expected (H, W, 2) field stack, got {f.shape}")
    total = 0.0
    for c in range(2):
        total += np.sum(np.diff(f[..., c], axis=0) ** 2)
        total += np.sum(np.diff(f[..., c], axis=1) ** 2)
    return float(total / (f.shape[0] * f.shape[1]))


def smooth_loss_grad(field_stack):
    f = np.asarray(field_stack, dtype=np.float64)
    if f.ndim != 3 or f.shape[-1] != 2:
        raise ContractViolation(f"expected (H, W, 2) field stack, got {f.shape}")
    g = np.zeros_like(f)
    n = f.shape[0] * f.shape[1]
    for c in range(2):
        di = np.diff(f[..., c], axis=0)
        dj = np.diff(f[..., c], axis=1)
        g[1:, :, c] += 2.0 * di / n
        g[:-1, :, c] -= 2.0 * di / n
        g[:, 1:, c] += 2.0 * dj / n
        g[:, :-1, c] -= 2.0 * dj / n
    return g


def unmatched_loss(pred, mask):
    """Push probability down where the field never reads: sum of -log(1 - p)
    over masked pixels, all channels."""
    p = np.asarray(pred)
    m = np.asarray(mask, dtype=bool)
    if p.ndim == 2:
        p = p[..., None]
    if m.shape != p.shape[:2]:
        raise ContractViolation(f"mask shape {m.shape} does not match pred {p.shape[:2]}")
    pc = _clamped(p)
    return float(-np.sum(np.log1p(-pc[m, :])))


def unmatched_loss_grad(pred, mask):
    p = np.asarray(pred)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[..., None]
    m = np.asarray(mask, dtype=bool)
    if m.shape != p.shape[:2]:
        raise ContractViolation(f"mask shape {m.shape} does not match pred {p.shape[:2]}")
    pc = _clamped(p)
    g = np.zeros(p.shape, dtype=np.float64)
    g[m, :] = 1.0 / (1.0 - pc[m, :])
    raw = np.asarray(pred, dtype=np.float64)
    if squeeze:
        raw = raw[..., None]
    g[(raw < EPS_PROB) | (raw > 1.0 - EPS_PROB)] = 0.0
    return g[..., 0] if squeeze else g


def field_loss(sup, sim, smooth, dns, weights):
    """Weighted field objective.  smooth may be None iff its weight is 0."""
    if smooth is None:
        if weights.smooth != 0.0:
            raise ContractViolation("smooth term missing but its weight is non-zero")
        smooth = 0.0
    return float(
        weights.sup * sup + weights.sim * sim + weights.smooth * smooth + weights.density * dns
    )


def joint_loss(edge, unmatched, weights):
    """Weighted detector objective for the joint stage."""
    return float(weights.edge * edge + weights.unmatched * unmatched)
