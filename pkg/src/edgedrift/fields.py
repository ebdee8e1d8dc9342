"""Per-pixel displacement fields and the gather warp built on them.

Convention, pinned repo-wide: a field is indexed on the OUTPUT grid and
stores where to read from, so `out[i, j] = values[i + di[i, j], j + dj[i, j]]`
with bilinear interpolation and reads clamped to the border.  A shift of an
edge by +d pixels is undone by a field of -d at the shifted location.

All functions are pure: inputs are never mutated.
"""

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from edgedrift import _kernels
from edgedrift.errors import ContractViolation

FIELD_CONVENTION = "output-grid-lookup"
FOOTPRINT_EPS = 1e-6
DEGENERATE_MAG_EPS = 1e-8


@dataclass(frozen=True)
class DisplacementField:
    """Pair of (H, W) offset planes: delta_i rows, delta_j columns."""

    delta_i: np.ndarray
    delta_j: np.ndarray

    def __post_init__(self):
        di = np.asarray(self.delta_i)
        dj = np.asarray(self.delta_j)
        if di.ndim != 2 or di.shape != dj.shape:
            raise ContractViolation(
                f"field planes must be matching 2-D arrays, got {di.shape} and {dj.shape}"
            )
        if not (np.isfinite(di).all() and np.isfinite(dj).all()):
            raise ContractViolation("field contains non-finite values")
        object.__setattr__(self, "delta_i", di)
        object.__setattr__(self, "delta_j", dj)

    @classmethod
    def zeros(cls, height, width, dtype=np.float64):
        return cls(np.zeros((height, width), dtype), np.zeros((height, width), dtype))

    @classmethod
    def from_stack(cls, stack):
        """Build from an (H, W, 2) array ordered (delta_i, delta_j)."""
        stack = np.asarray(stack)
        if stack.ndim != 3 or stack.shape[-1] != 2:
            raise ContractViolation(f"expected (H, W, 2) stack, got {stack.shape}")
        return cls(stack[..., 0], stack[..., 1])

    @property
    def shape(self):
        return self.delta_i.shape

    def as_stack(self):
        return np.stack([self.delta_i, self.delta_j], axis=-1)

    def magnitude(self):
        return np.hypot(self.delta_i, self.delta_j)


def validate_prob_map(values, name="prob map"):
    """Check an (H, W) or (H, W, C) array of probabilities in [0, 1]."""
    a = np.asarray(values)
    if a.ndim not in (2, 3):
        raise ContractViolation(f"{name} must be 2-D or 3-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ContractViolation(f"{name} contains non-finite values")
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ContractViolation(f"{name} values outside [0, 1]")
    return a


def validate_label_map(values, name="label map"):
    """Check a binary (H, W) or (H, W, C) array; returns it as uint8 0/1."""
    a = np.asarray(values)
    if a.ndim not in (2, 3):
        raise ContractViolation(f"{name} must be 2-D or 3-D, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    u = np.unique(a)
    if not np.isin(u, (0, 1)).all():
        raise ContractViolation(f"{name} must be binary, found values {u[:5]}")
    return a.astype(np.uint8)


def _as_planes(values, field):
    """Harmonize dtypes/layout for the kernels; returns (v3, di, dj, squeeze)."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[..., None]
        squeeze = True
    elif v.ndim == 3:
        squeeze = False
    else:
        raise ContractViolation(f"values must be 2-D or 3-D, got shape {np.shape(values)}")
    if v.shape[:2] != field.shape:
        raise ContractViolation(
            f"values shape {v.shape[:2]} does not match field shape {field.shape}"
        )
    if v.dtype == np.float32 and field.delta_i.dtype == np.float32:
        dt = np.float32
    else:
        dt = np.float64
    v3 = np.ascontiguousarray(v, dtype=dt)
    di = np.ascontiguousarray(field.delta_i, dtype=dt)
    dj = np.ascontiguousarray(field.delta_j, dtype=dt)
    return v3, di, dj, squeeze


def sample_with_field(values, field):
    """Warp `values` by the field: out[i, j] = values[i + di, j + dj] bilinear.

    A zero field reproduces the input exactly.  Reads outside the image are
    clamped to the border.
    """
    v3, di, dj, squeeze = _as_planes(values, field)
    out = _kernels.bilinear_forward(v3, di, dj)
    return out[..., 0] if squeeze else out


def sampler_vjp(values, field, upstream):
    """Gradients of sum(upstream * sample_with_field(values, field)).

    Returns (grad_values, grad_field) where grad_field is (H, W, 2) ordered
    (delta_i, delta_j).  Offset gradients are zero where the read coordinate
    was clamped at the border.
    """
    v3, di, dj, squeeze = _as_planes(values, field)
    up = np.asarray(upstream)
    if squeeze:
        if up.shape != field.shape:
            raise ContractViolation(
                f"upstream shape {up.shape} does not match values shape {field.shape}"
            )
        up = up[..., None]
    elif up.shape != v3.shape:
        raise ContractViolation(
            f"upstream shape {up.shape} does not match values shape {v3.shape}"
        )
    up = np.ascontiguousarray(up, dtype=v3.dtype)
    gv, gdi, gdj = _kernels.bilinear_vjp(v3, di, dj, up)
    if squeeze:
        gv = gv[..., 0]
    return gv, np.stack([gdi, gdj], axis=-1)


def read_footprint(field):
    """Total bilinear read weight each source pixel receives under the warp."""
    di = np.ascontiguousarray(field.delta_i, dtype=np.float64)
    dj = np.ascontiguousarray(field.delta_j, dtype=np.float64)
    return _kernels.footprint_accumulate(di, dj)


def unmatched_mask(field, eps=FOOTPRINT_EPS):
    """Boolean (H, W) mask of source pixels the warp never reads.

    A pixel counts as read when its accumulated bilinear weight exceeds eps.
    """
    return read_footprint(field) <= eps


def normalized_magnitude(field):
    """Field magnitude scaled into [0, 1] by the per-field maximum.

    A (near-)zero field normalizes to all zeros rather than dividing by
    the degenerate maximum.
    """
    mag = field.magnitude().astype(np.float64)
    peak = mag.max() if mag.size else 0.0
    if peak < DEGENERATE_MAG_EPS:
        return np.zeros_like(mag)
    return mag / peak


def normalized_magnitude_vjp(field, upstream):
    """Gradient of sum(upstream * normalized_magnitude(field)) w.r.t. the field.

    Returns (H, W, 2).  The per-field maximum is treated as attained at the
    first row-major argmax; zero-magnitude pixels get zero gradient.
    """
    di = np.asarray(field.delta_i, dtype=np.float64)
    dj = np.asarray(field.delta_j, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != di.shape:
        raise ContractViolation(
            f"upstream shape {up.shape} does not match field shape {di.shape}"
        )
    mag = np.hypot(di, dj)
    peak = mag.max() if mag.size else 0.0
    grad = np.zeros(di.shape + (2,), dtype=np.float64)
    if peak < DEGENERATE_MAG_EPS:
        return grad
    safe = np.where(mag > 0, mag, 1.0)
    unit_i = np.where(mag > 0, di / safe, 0.0)
    unit_j = np.where(mag > 0, dj / safe, 0.0)
    grad[..., 0] = up * unit_i / peak
    grad[..., 1] = up * unit_j / peak
    # the argmax pixel also moves the normalizer itself
    am = np.unravel_index(np.argmax(mag), mag.shape)
    total = np.sum(up * mag) / peak**2
    grad[am][0] -= total * unit_i[am]
    grad[am][1] -= total * unit_j[am]
    return grad


def save_field(path, field):
    """Write a field as a zip of delta_i.npy, delta_j.npy and meta.json.

    Timestamps are fixed so identical fields produce identical bytes.
    """
    h, w = field.shape
    meta = {
        "convention": FIELD_CONVENTION,
        "dtype": str(field.delta_i.dtype),
        "format_version": 1,
        "height": int(h),
        "width": int(w),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in (("delta_i.npy", field.delta_i), ("delta_j.npy", field.delta_j)):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True).encode())


def load_field(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("convention") != FIELD_CONVENTION:
            raise ContractViolation(
                f"unsupported field convention {meta.get('convention')!r}"
            )
        di = np.lib.format.read_array(io.BytesIO(zf.read("delta_i.npy")), allow_pickle=False)
        dj = np.lib.format.read_array(io.BytesIO(zf.read("delta_j.npy")), allow_pickle=False)
    if di.shape != (meta["height"], meta["width"]):
        raise ContractViolation("field shape does not match its metadata")
    return DisplacementField(di, dj)
