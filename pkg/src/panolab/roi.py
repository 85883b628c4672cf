"""Region-of-interest resampling.

``roi_align`` crops a fixed m x m grid from a feature map by averaging four
regularly placed bilinear samples per bin. ``roi_upsample`` runs the other
way: it scatters an m x m patch back onto a feature canvas, weighting each
sample point's four neighbouring cells with inverse bilinear coefficients so
that forward interpolation at the same point recovers the sample value
exactly. Both operators share one sampling geometry, which is what makes the
align(upsample(mask)) round trip exact when sample neighbourhoods don't
collide.

Coordinates follow the half-pixel-center convention used by
``tensor.bilinear_resize``: feature pixel i has its center at continuous
coordinate i, and image coordinate x maps to feature coordinate
x * spatial_scale - 0.5.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _accumulate, _result

log = logging.getLogger(__name__)

# bin-relative offsets of the four regular sample locations
_SAMPLE_OFFSETS = (0.25, 0.75)


@dataclass
class RoI:
    """A region of interest in continuous image coordinates."""

    batch_index: int
    box: tuple  # (x1, y1, x2, y2)
    score: float = 1.0
    class_id: int = -1
    level: int | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}: need x2 > x1 and y2 > y1")

    @property
    def width(self):
        return self.box[2] - self.box[0]

    @property
    def height(self):
        return self.box[3] - self.box[1]


@dataclass
class MaskPatch:
    """A fixed-resolution mask (pre-sigmoid logits) attached to an RoI."""

    roi: RoI
    logits: Tensor  # shape (1, C_m, m, m)


def assign_scale(roi, canonical_level=4, canonical_size=224.0,
                 level_min=2, level_max=5):
    """Route an RoI to a pyramid level by box size, FPN style.

    level = clamp(k0 + floor(log2(sqrt(w * h) / canonical_size)), lo, hi)
    """
    w, h = roi.width, roi.height
    if w * h <= 0:
        raise ValueError(f"cannot assign a level to zero-area box {roi.box}")
    level = canonical_level + math.floor(math.log2(math.sqrt(w * h) / canonical_size))
    return int(min(max(level, level_min), level_max))


def assign_levels(rois, **kwargs):
    """Assign and store pyramid levels on every RoI; returns the list."""
    for r in rois:
        r.level = assign_scale(r, **kwargs)
    return rois


def inverse_bilinear_weights(x_p, y_p):
    """Inverse-bilinear coefficients for a sample point at fractional offset
    (x_p, y_p) from its top-left grid neighbour.

    Returns (w11, w12, w21, w22) such that placing w_jk * value on the four
    neighbours and bilinearly interpolating back at (x_p, y_p) returns the
    value exactly. Normalizers: value_x = x_p^2 + (1-x_p)^2 and likewise
    value_y; the first index runs along x, the second along y.
    """
    if not (0.0 <= x_p < 1.0 and 0.0 <= y_p < 1.0):
        raise ValueError(f"offsets must lie in [0, 1); got ({x_p}, {y_p})")
    vx = x_p * x_p + (1.0 - x_p) * (1.0 - x_p)
    vy = y_p * y_p + (1.0 - y_p) * (1.0 - y_p)
    d = vx * vy
    return (
        (1.0 - x_p) * (1.0 - y_p) / d,
        (1.0 - x_p) * y_p / d,
        x_p * (1.0 - y_p) / d,
        x_p * y_p / d,
    )


@dataclass
class _AxisGrid:
    lo: np.ndarray     # (m, 2) int, lower neighbour index
    hi: np.ndarray     # (m, 2) int
    frac: np.ndarray   # (m, 2) float in [0, 1)
    valid: np.ndarray  # (m, 2) bool


def _axis_grid(start, bin_size, m, extent, dtype):
    """Neighbour indices and fractions for the m*2 sample coordinates of one axis."""
    offs = np.array(_SAMPLE_OFFSETS, dtype=dtype)
    pts = start + (np.arange(m, dtype=dtype)[:, None] + offs[None, :]) * bin_size
    valid = (pts >= -1.0) & (pts <= extent)
    pts = np.clip(pts, 0.0, extent - 1.0)
    lo = np.floor(pts).astype(np.int64)
    lo = np.minimum(lo, extent - 1)
    frac = pts - lo
    hi = np.minimum(lo + 1, extent - 1)
    return _AxisGrid(lo=lo, hi=hi, frac=frac, valid=valid)


def _roi_grid(roi, out_size, spatial_scale, height, width, dtype):
    x1, y1, x2, y2 = roi.box
    u1 = x1 * spatial_scale - 0.5
    v1 = y1 * spatial_scale - 0.5
    bu = (x2 - x1) * spatial_scale / out_size
    bv = (y2 - y1) * spatial_scale / out_size
    if bu <= 0 or bv <= 0:
        raise ValueError(
            f"RoI {roi.box} collapses to zero area at scale {spatial_scale}"
        )
    gx = _axis_grid(u1, bu, out_size, width, dtype)
    gy = _axis_grid(v1, bv, out_size, height, dtype)
    return gy, gx


def roi_align(features, roi, out_size, spatial_scale, samples_per_bin=4):
    """Crop ``features`` (1, C, H, W) to (1, C, out_size, out_size) over ``roi``.

    Each output bin averages bilinear samples taken at the bin's four
    quarter-point locations. Differentiable w.r.t. ``features``.
    """
    if samples_per_bin != 4:
        raise ValueError("samples_per_bin is fixed at 4")
    n, c, h, w = features.shape
    if n != 1:
        raise ValueError(f"roi_align expects a single-sample feature map, got N={n}")
    gy, gx = _roi_grid(roi, out_size, spatial_scale, h, w, features.data.dtype)

    f = features.data[0]
    m = out_size
    acc = np.zeros((c, m, m), dtype=f.dtype)
    # (sy, sx) select one of the 2x2 sample locations per bin
    terms = []  # reused by the backward pass: (rows, cols, weight) per corner
    for sy in range(2):
        yl, yh = gy.lo[:, sy], gy.hi[:, sy]
        fy, vy = gy.frac[:, sy], gy.valid[:, sy]
        for sx in range(2):
            xl, xh = gx.lo[:, sx], gx.hi[:, sx]
            fx, vx = gx.frac[:, sx], gx.valid[:, sx]
            ok = (vy[:, None] & vx[None, :]).astype(f.dtype)
            w00 = ((1 - fy)[:, None] * (1 - fx)[None, :]) * ok
            w01 = ((1 - fy)[:, None] * fx[None, :]) * ok
            w10 = (fy[:, None] * (1 - fx)[None, :]) * ok
            w11 = (fy[:, None] * fx[None, :]) * ok
            yln, yhn = yl[:, None], yh[:, None]
            xln, xhn = xl[None, :], xh[None, :]
            acc += w00 * f[:, yln, xln] + w01 * f[:, yln, xhn]
            acc += w10 * f[:, yhn, xln] + w11 * f[:, yhn, xhn]
            terms.append(((yln, xln, w00), (yln, xhn, w01),
                          (yhn, xln, w10), (yhn, xhn, w11)))
    out = (acc / 4.0)[None]

    def _bw(g):
        if not features.requires_grad:
            return
        gf = np.zeros_like(features.data)
        gflat = gf[0].reshape(c, h * w)
        gdata = g[0] / 4.0
        crange = np.arange(c)[:, None, None]
        for corners in terms:
            for rows, cols, wgt in corners:
                idx = np.broadcast_to(rows * w + cols, (m, m))
                np.add.at(gflat, (crange, idx[None]), wgt * gdata)
        _accumulate(features, gf)

    return _result(out, [features], _bw)


def roi_upsample(patches, canvas_size, spatial_scale, values=None,
                 sample_value_scale=1.0):
    """Scatter mask patches onto a zeroed canvas with inverse bilinear weights.

    ``patches`` is a list of MaskPatch, typically pre-grouped by assigned
    pyramid level; ``canvas_size`` is (C_m, H', W') for the level being
    filled, and ``spatial_scale`` that level's image-to-feature scale.
    ``values`` optionally overrides the scattered tensors (same order as
    ``patches``), letting callers scatter post-sigmoid probabilities while
    the patches keep raw logits.

    Every bin contributes ``sample_value_scale`` times its value at each of
    its four sample locations. The default of 1.0 makes the op the exact
    inverse of the four-sample-average ``roi_align``; 0.25 instead splits a
    bin's value into quarter shares across its sample points, so the four
    scattered contributions sum to the bin value.

    Patches whose RoI falls entirely outside the canvas contribute nothing
    and are logged. Untouched cells stay zero. Differentiable w.r.t. the
    scattered tensors (backward is the matching gather).
    """
    cm, hc, wc = canvas_size
    if values is None:
        values = [p.logits for p in patches]
    if len(values) != len(patches):
        raise ValueError(f"{len(values)} value tensors for {len(patches)} patches")

    dtype = values[0].data.dtype if values else np.float64
    canvas = np.zeros((1, cm, hc, wc), dtype=dtype)
    scatters = []  # (tensor, list of (rows, cols, weight)) for backward

    for patch, val in zip(patches, values):
        vn, vc, mh, mw = val.shape
        if (vn, vc) != (1, cm) or mh != mw:
            raise ValueError(
                f"patch tensor shape {val.shape} incompatible with canvas "
                f"channels {cm}"
            )
        m = mh
        gy, gx = _roi_grid(patch.roi, m, spatial_scale, hc, wc, dtype)
        if not (gy.valid.any() and gx.valid.any()):
            log.info("RoI %s lies outside the %dx%d canvas; skipped",
                     patch.roi.box, hc, wc)
            continue
        corners = []
        vdat = val.data[0] * sample_value_scale
        for sy in range(2):
            yl, yh = gy.lo[:, sy], gy.hi[:, sy]
            fy, oky = gy.frac[:, sy], gy.valid[:, sy]
            vy = fy * fy + (1 - fy) * (1 - fy)
            for sx in range(2):
                xl, xh = gx.lo[:, sx], gx.hi[:, sx]
                fx, okx = gx.frac[:, sx], gx.valid[:, sx]
                vx = fx * fx + (1 - fx) * (1 - fx)
                ok = (oky[:, None] & okx[None, :]).astype(dtype)
                norm = ok / (vy[:, None] * vx[None, :])
                w00 = ((1 - fy)[:, None] * (1 - fx)[None, :]) * norm
                w01 = ((1 - fy)[:, None] * fx[None, :]) * norm
                w10 = (fy[:, None] * (1 - fx)[None, :]) * norm
                w11 = (fy[:, None] * fx[None, :]) * norm
                yln, yhn = yl[:, None], yh[:, None]
                xln, xhn = xl[None, :], xh[None, :]
                for rows, cols, wgt in ((yln, xln, w00), (yln, xhn, w01),
                                        (yhn, xln, w10), (yhn, xhn, w11)):
                    idx = np.broadcast_to(rows * wc + cols, (m, m))
                    np.add.at(canvas[0].reshape(cm, hc * wc),
                              (np.arange(cm)[:, None, None], idx[None]),
                              wgt * vdat)
                    corners.append((idx, wgt))
        scatters.append((val, m, corners))

    def _bw(g):
        gflat = g[0].reshape(cm, hc * wc)
        for val, m, corners in scatters:
            if not val.requires_grad:
                continue
            gv = np.zeros_like(val.data)
            for idx, wgt in corners:
                gv[0] += wgt * gflat[:, idx]
            _accumulate(val, sample_value_scale * gv)

    return _result(canvas, list(values), _bw)
