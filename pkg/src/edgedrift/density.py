"""Local edge density and the density prior tying field magnitude to it.

Busy regions (many nearby edges) are where annotators drift most, so the
prior encourages larger shift magnitudes where a cheap gradient-based edge
proxy finds dense structure.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from edgedrift.errors import ContractViolation

DEFAULT_WINDOW = 11
DEFAULT_LOW = 0.1
DEFAULT_HIGH = 0.2


@dataclass(frozen=True)
class DensityMap:
    """Per-pixel edge density: window count / window**2, in [0, 1]."""

    values: np.ndarray  # (H, W) float64
    window: int


def local_edge_density(edges, window=DEFAULT_WINDOW):
    """Density of edge pixels in a centered window around each pixel.

    Windows are truncated at the border but always divided by window**2,
    so border densities are systematically lower.
    """
    if window < 1 or window % 2 == 0:
        raise ContractViolation(f"window must be odd and positive, got {window}")
    e = (np.asarray(edges) != 0).astype(np.int64)
    if e.ndim != 2:
        raise ContractViolation(f"edges must be 2-D, got shape {e.shape}")
    H, W = e.shape
    r = window // 2
    # integral image with clamped box bounds keeps the counts exact
    s = np.zeros((H + 1, W + 1), dtype=np.int64)
    s[1:, 1:] = e.cumsum(axis=0).cumsum(axis=1)
    i0 = np.clip(np.arange(H) - r, 0, H)
    i1 = np.clip(np.arange(H) + r + 1, 0, H)
    j0 = np.clip(np.arange(W) - r, 0, W)
    j1 = np.clip(np.arange(W) + r + 1, 0, W)
    count = (
        s[np.ix_(i1, j1)] - s[np.ix_(i0, j1)] - s[np.ix_(i1, j0)] + s[np.ix_(i0, j0)]
    )
    return DensityMap(count / float(window**2), window)


def _luminance(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise ContractViolation(f"expected 3 colour channels, got {img.shape}")
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise ContractViolation(f"image must be 2-D or 3-D, got shape {img.shape}")
    return img


def _shift(a, di, dj):
    """a sampled at (i + di, j + dj), zero outside the image."""
    H, W = a.shape
    out = np.zeros_like(a)
    si0, si1 = max(di, 0), min(H + di, H)
    sj0, sj1 = max(dj, 0), min(W + dj, W)
    out[si0 - di : si1 - di, sj0 - dj : sj1 - dj] = a[si0:si1, sj0:sj1]
    return out


def proxy_edges(image, low=DEFAULT_LOW, high=DEFAULT_HIGH, sigma=1.0):
    """Cheap image-driven edge map: smoothed gradient magnitude, thinned by
    non-maximum suppression along the gradient, then double-threshold
    hysteresis.  Thresholds apply to the magnitude normalized by its max.
    """
    if not 0 <= low <= high:
        raise ContractViolation(f"need 0 <= low <= high, got low={low} high={high}")
    lum = _luminance(image)
    smooth = ndimage.gaussian_filter(lum, sigma)
    gi = ndimage.sobel(smooth, axis=0)
    gj = ndimage.sobel(smooth, axis=1)
    mag = np.hypot(gi, gj)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(lum.shape, dtype=bool)
    mag = mag / peak

    angle = np.rad2deg(np.arctan2(gi, gj)) % 180.0
    directions = [(0, 1), (1, 1), (1, 0), (1, -1)]
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    keep = np.zeros(mag.shape, dtype=bool)
    for s, (di, dj) in enumerate(directions):
        fwd = _shift(mag, di, dj)
        bwd = _shift(mag, -di, -dj)
        # ties survive on the forward side only, keeping ridges one pixel wide
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low
    strong = nms >= high
    if not strong.any():
        return np.zeros(lum.shape, dtype=bool)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=np.int8))
    good = np.unique(labels[strong])
    return weak & np.isin(labels, good[good != 0])


def density_loss(field_density, edge_density):
    """Mean squared gap between normalized field magnitude and edge density."""
    d = np.asarray(field_density, dtype=np.float64)
    c = edge_density.values if isinstance(edge_density, DensityMap) else np.asarray(edge_density, dtype=np.float64)
    if d.shape != c.shape:
        raise ContractViolation(f"shape mismatch: {d.shape} vs {c.shape}")
    return float(np.mean((d - c) ** 2))


def density_loss_grad(field_density, edge_density):
    """Gradient of density_loss w.r.t. the field density term."""
    d = np.asarray(field_density, dtype=np.float64)
    c = edge_density.values if isinstance(edge_density, DensityMap) else np.asarray(edge_density, dtype=np.float64)
    return 2.0 * (d - c) / d.size
