"""ROI max pooling over zero-padded canvases, its bilinear ROI-align variant,
and adaptive max pooling.

Each image in a padded batch owns exactly one rectangle (its ``Region``) in
input-pixel coordinates. Regions are mapped onto the feature map with the
stride product ``downsample`` of every layer before the pooling layer, and the
mapped rectangle is split into an ``out_h x out_w`` grid of (possibly
overlapping) bins. Nothing outside the mapped rectangle is ever read, so the
pooled output is blind to padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .tensor_core import DimensionError, UsageError, as_tensor, scatter_argmax


class DegenerateRegionError(DimensionError):
    """A region maps to an empty or out-of-range feature rectangle."""


@dataclass(frozen=True)
class Region:
    batch_index: int
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass(frozen=True)
class RoiPoolSpec:
    downsample: int
    out_h: int
    out_w: int

    def __post_init__(self):
        if self.downsample < 1 or self.out_h < 1 or self.out_w < 1:
            raise ValueError(f"invalid RoiPoolSpec {self}")


# Set by the verification suite to check that the isolation test can fail.
_MUTATION: str | None = None


def set_mutation(name: str | None) -> None:
    global _MUTATION
    _MUTATION = name


def _round_div(v: int, tau: int) -> int:
    # round(v / tau), halves away from zero
    q = (2 * abs(v) + tau) // (2 * tau)
    return q if v >= 0 else -q


def map_coords(x_i: int, y_i: int, tau: int) -> tuple[int, int]:
    """Image coordinates to feature-map coordinates for stride product ``tau``."""
    if tau <= 0:
        raise UsageError(f"downsample ratio must be >= 1, got {tau}")
    return _round_div(int(x_i), tau), _round_div(int(y_i), tau)


def bin_edges(start: int, extent: int, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Start-inclusive / end-exclusive bin limits over ``[start, start + extent)``.

    Bin ``m`` spans ``[start + floor(m * rho), start + ceil((m + 1) * rho))`` with
    ``rho = extent / n_bins``; the end is clamped to the rectangle. Integer
    arithmetic keeps floor/ceil exact.
    """
    m = np.arange(n_bins, dtype=np.int64)
    lo = (m * extent) // n_bins
    hi = -((-(m + 1) * extent) // n_bins)
    if _MUTATION == "roi_bins":
        hi = hi + 1  # deliberately broken: runs one column past the region
    else:
        hi = np.minimum(hi, extent)
    return start + lo, start + hi


def mapped_rect(region: Region, tau: int, fh: int, fw: int) -> tuple[int, int, int, int]:
    fx0, fy0 = map_coords(region.x0, region.y0, tau)
    fx1, fy1 = map_coords(region.x1, region.y1, tau)
    if fx1 <= fx0 or fy1 <= fy0:
        raise DegenerateRegionError(f"{region} maps to an empty feature rectangle at ratio {tau}")
    if fx0 < 0 or fy0 < 0 or fx1 > fw or fy1 > fh:
        raise DegenerateRegionError(f"{region} maps outside the {fh}x{fw} feature map at ratio {tau}")
    return fx0, fy0, fx1, fy1


@dataclass
class RoiPoolCtx:
    x_shape: tuple
    argmax: np.ndarray


@numba.njit(cache=True)
def _roi_max_kernel(feat, rows_lo, rows_hi, cols_lo, cols_hi):
    n, c, h, w = feat.shape
    oh = rows_lo.shape[1]
    ow = cols_lo.shape[1]
    out = np.empty((n, c, oh, ow))
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = -np.inf
                    best_at = -1
                    for y in range(rows_lo[b, i], rows_hi[b, i]):
                        for x in range(cols_lo[b, j], cols_hi[b, j]):
                            v = feat[b, ch, y, x]
                            if v > best or best_at < 0:
                                best = v
                                best_at = y * w + x
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = best_at
    return out, arg


def _grid(regions: Sequence[Region], n: int, spec: RoiPoolSpec, fh: int, fw: int):
    if len(regions) != n:
        raise DimensionError(f"{len(regions)} regions for a batch of {n}")
    rows_lo = np.empty((n, spec.out_h), dtype=np.int64)
    rows_hi = np.empty_like(rows_lo)
    cols_lo = np.empty((n, spec.out_w), dtype=np.int64)
    cols_hi = np.empty_like(cols_lo)
    for r in regions:
        if not 0 <= r.batch_index < n:
            raise DimensionError(f"region batch index {r.batch_index} outside batch of {n}")
        fx0, fy0, fx1, fy1 = mapped_rect(r, spec.downsample, fh, fw)
        rows_lo[r.batch_index], rows_hi[r.batch_index] = bin_edges(fy0, fy1 - fy0, spec.out_h)
        cols_lo[r.batch_index], cols_hi[r.batch_index] = bin_edges(fx0, fx1 - fx0, spec.out_w)
    # a mutated grid may run past the map; keep memory access in bounds
    np.minimum(rows_hi, fh, out=rows_hi)
    np.minimum(cols_hi, fw, out=cols_hi)
    return rows_lo, rows_hi, cols_lo, cols_hi


def roi_maxpool_forward(features, regions: Sequence[Region], spec: RoiPoolSpec):
    """Max-pool each sample's mapped region to ``(out_h, out_w)``.

    Returns the pooled ``(N, C, out_h, out_w)`` tensor and a context holding
    the flat argmax of every output (first maximum in row-major order).
    """
    feat = as_tensor(features)
    if feat.ndim != 4:
        raise DimensionError(f"expected NCHW features, got {feat.shape}")
    n, _, fh, fw = feat.shape
    grid = _grid(regions, n, spec, fh, fw)
    out, arg = _roi_max_kernel(feat, *grid)
    return out, RoiPoolCtx(feat.shape, arg)


def roi_maxpool_backward(ctx: RoiPoolCtx, grad_out):
    if ctx is None:
        raise UsageError("roi_maxpool_backward called without a forward context")
    return scatter_argmax(ctx.x_shape, ctx.argmax, grad_out)


def full_regions(n: int, h: int, w: int) -> list[Region]:
    return [Region(b, 0, 0, w, h) for b in range(n)]


def adaptive_maxpool_forward(features, out_h: int, out_w: int):
    feat = as_tensor(features)
    n, _, h, w = feat.shape
    return roi_maxpool_forward(feat, full_regions(n, h, w), RoiPoolSpec(1, out_h, out_w))


adaptive_maxpool_backward = roi_maxpool_backward


# ---------------------------------------------------------------------------
# ROI align
# ---------------------------------------------------------------------------

@dataclass
class RoiAlignCtx:
    x_shape: tuple
    ys: np.ndarray  # (N, out_h, s) sample rows, feature coordinates
    xs: np.ndarray  # (N, out_w, s)
    limits: np.ndarray  # (N, 4) first/last readable row and column per sample
    best: np.ndarray  # (N, C, out_h, out_w) winning sample as iy * s + ix


def _align_axis(lo: float, hi: float, n_bins: int, s: int) -> np.ndarray:
    # sample centres of an s-point regular grid inside each bin, shifted so
    # that integer feature indices sit at pixel centres
    rho = (hi - lo) / n_bins
    m = np.arange(n_bins)[:, None]
    k = np.arange(s)[None, :]
    return lo + (m + (k + 0.5) / s) * rho - 0.5


@numba.njit(cache=True)
def _bilinear(feat_bc, y, x, ymin, xmin, ymax, xmax):
    y = min(max(y, ymin), ymax)
    x = min(max(x, xmin), xmax)
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    y1 = min(y0 + 1, int(ymax))
    x1 = min(x0 + 1, int(xmax))
    wy = y - y0
    wx = x - x0
    return ((1 - wy) * (1 - wx) * feat_bc[y0, x0] + (1 - wy) * wx * feat_bc[y0, x1]
            + wy * (1 - wx) * feat_bc[y1, x0] + wy * wx * feat_bc[y1, x1])


@numba.njit(cache=True)
def _align_kernel(feat, ys, xs, limits):
    n, c, h, w = feat.shape
    oh, s = ys.shape[1], ys.shape[2]
    ow = xs.shape[1]
    samples = np.empty((n, c, oh, ow, s, s))
    for b in range(n):
        ymin, xmin = float(limits[b, 0]), float(limits[b, 1])
        ymax, xmax = float(limits[b, 2]), float(limits[b, 3])
        for ch in range(c):
            fb = feat[b, ch]
            for i in range(oh):
                for j in range(ow):
                    for p in range(s):
                        for q in range(s):
                            samples[b, ch, i, j, p, q] = _bilinear(fb, ys[b, i, p], xs[b, j, q], ymin, xmin, ymax, xmax)
    return samples


@numba.njit(cache=True)
def _align_backward_kernel(shape, ys, xs, limits, best, grad_out):
    n, c, h, w = shape
    oh, s = ys.shape[1], ys.shape[2]
    ow = xs.shape[1]
    gx = np.zeros((n, c, h, w))
    for b in range(n):
        ymin, xmin = float(limits[b, 0]), float(limits[b, 1])
        ymax, xmax = float(limits[b, 2]), float(limits[b, 3])
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    k = best[b, ch, i, j]
                    y = min(max(ys[b, i, k // s], ymin), ymax)
                    x = min(max(xs[b, j, k % s], xmin), xmax)
                    y0 = int(np.floor(y))
                    x0 = int(np.floor(x))
                    y1 = min(y0 + 1, int(ymax))
                    x1 = min(x0 + 1, int(xmax))
                    wy = y - y0
                    wx = x - x0
                    g = grad_out[b, ch, i, j]
                    gx[b, ch, y0, x0] += (1 - wy) * (1 - wx) * g
                    gx[b, ch, y0, x1] += (1 - wy) * wx * g
                    gx[b, ch, y1, x0] += wy * (1 - wx) * g
                    gx[b, ch, y1, x1] += wy * wx * g
    return gx


def _align_grid(regions, n, spec, fh, fw, samples_per_bin):
    if len(regions) != n:
        raise DimensionError(f"{len(regions)} regions for a batch of {n}")
    tau = spec.downsample
    s = samples_per_bin
    ys = np.empty((n, spec.out_h, s))
    xs = np.empty((n, spec.out_w, s))
    limits = np.empty((n, 4), dtype=np.int64)
    for r in regions:
        fx0, fy0, fx1, fy1 = r.x0 / tau, r.y0 / tau, r.x1 / tau, r.y1 / tau
        if fx1 <= fx0 or fy1 <= fy0:
            raise DegenerateRegionError(f"{r} maps to an empty feature rectangle at ratio {tau}")
        first_x, first_y = int(np.floor(fx0)), int(np.floor(fy0))
        last_x, last_y = int(np.ceil(fx1)) - 1, int(np.ceil(fy1)) - 1
        if fx0 < 0 or fy0 < 0 or last_x >= fw or last_y >= fh:
            raise DegenerateRegionError(f"{r} maps outside the {fh}x{fw} feature map at ratio {tau}")
        b = r.batch_index
        ys[b] = _align_axis(fy0, fy1, spec.out_h, s)
        xs[b] = _align_axis(fx0, fx1, spec.out_w, s)
        # interpolation never reaches a pixel the region does not touch
        limits[b] = first_y, first_x, last_y, last_x
    return ys, xs, limits


def roi_align_samples(features, regions: Sequence[Region], spec: RoiPoolSpec, samples_per_bin: int = 2):
    """Bilinear samples of every bin, shape ``(N, C, out_h, out_w, s, s)``."""
    feat = as_tensor(features)
    n, _, fh, fw = feat.shape
    ys, xs, limits = _align_grid(regions, n, spec, fh, fw, samples_per_bin)
    return _align_kernel(feat, ys, xs, limits), (ys, xs, limits)


def roi_align_forward(features, regions: Sequence[Region], spec: RoiPoolSpec, samples_per_bin: int = 2):
    """ROI align with max aggregation over the sample points of each bin."""
    feat = as_tensor(features)
    samples, (ys, xs, limits) = roi_align_samples(feat, regions, spec, samples_per_bin)
    n, c, oh, ow, s, _ = samples.shape
    flat = samples.reshape(n, c, oh, ow, s * s)
    best = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), RoiAlignCtx(feat.shape, ys, xs, limits, best)


def roi_align_backward(ctx: RoiAlignCtx, grad_out):
    if ctx is None:
        raise UsageError("roi_align_backward called without a forward context")
    grad_out = as_tensor(grad_out)
    if grad_out.shape != ctx.best.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {ctx.best.shape}")
    return _align_backward_kernel(ctx.x_shape, ctx.ys, ctx.xs, ctx.limits, ctx.best, grad_out)
