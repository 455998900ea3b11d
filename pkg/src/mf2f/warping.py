"""Motion compensation and alignment-error masking.

``warp`` resamples a frame along a flow field with Keys bicubic
interpolation; the differentiable variant feeds the training objective.
``alignment_mask`` combines two failure detectors both defined on the
previous frame's pixel grid:

* ``occlusion_mask`` — pixels whose flow target collides with another
  pixel's target (two votes in one cell) or leaves the frame entirely;
* the warping-residual mask — a smoothed per-pixel photometric error
  between the previous frame and the motion-compensated current frame,
  thresholded adaptively from its own histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops
from .autodiff import Tensor, accumulate_grad, trace_op
from .errors import DegenerateDistributionError, DimensionError


@dataclass(frozen=True)
class MaskConfig:
    """Knobs for the alignment-error mask.

    ``threshold_factor`` scales how many spread-units above the residual
    histogram's mode the cut is placed; the spread is (mode − low
    percentile), clamped to be nonnegative.
    """

    sigma_g1: float = 2.0
    sigma_g2: float = 2.0
    threshold_factor: float = 3.0
    percentile: float = 0.10
    histogram_bins: int = 256
    histogram_smoothing_sigma: float = 2.0

    def validate(self):
        if self.sigma_g1 <= 0 or self.sigma_g2 <= 0:
            raise ValueError("mask smoothing sigmas must be positive")
        if not (0.0 < self.percentile < 0.5):
            raise ValueError(f"percentile must lie in (0, 0.5), got {self.percentile}")
        if self.histogram_bins < 32:
            raise ValueError(f"histogram_bins must be >= 32, got {self.histogram_bins}")
        if self.histogram_smoothing_sigma <= 0:
            raise ValueError("histogram_smoothing_sigma must be positive")
        if self.threshold_factor < 0:
            raise ValueError("threshold_factor must be nonnegative")
        return self


def _check_flow(flow: np.ndarray, h: int, w: int, what: str):
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionError(f"{what} must have shape (H, W, 2), got {flow.shape}")
    if flow.shape[0] != h or flow.shape[1] != w:
        raise DimensionError(f"{what} spatial shape {flow.shape[:2]} does not match frame ({h}, {w})")


def _keys_weights(frac: np.ndarray) -> np.ndarray:
    """Keys cubic convolution weights (a = -0.5) for taps at offsets
    floor-1 .. floor+2; ``frac`` in [0, 1).  Returns shape (4,) + frac.shape.

    At frac == 0 the weights are exactly (0, 1, 0, 0), which is what makes
    integer flows lossless.
    """
    a = -0.5

    def k(t):
        t = np.abs(t)
        near = (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
        far = a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
        return np.where(t <= 1.0, near, np.where(t <= 2.0, far, 0.0))

    return np.stack([k(frac + 1.0), k(frac), k(1.0 - frac), k(2.0 - frac)])


def _bicubic_taps(flow: np.ndarray, h: int, w: int):
    """Integer tap grids (reflected into range) and combined weights for
    sampling at x + v(x).  Returns (iy, ix, wy, wx), each (4, H, W)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xx + flow[:, :, 0]
    ys = yy + flow[:, :, 1]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    wx = _keys_weights(xs - x0)
    wy = _keys_weights(ys - y0)
    ix = np.stack([imageops.reflect_index((x0 + d).astype(np.int64), w) for d in (-1, 0, 1, 2)])
    iy = np.stack([imageops.reflect_index((y0 + d).astype(np.int64), h) for d in (-1, 0, 1, 2)])
    return iy, ix, wy, wx


def warp_array(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bicubic resampling of ``frame`` at x + v(x) (plain numpy).

    ``frame`` may have any leading axes before trailing (H, W); out-of-frame
    taps read reflected coordinates.
    """
    h, w = frame.shape[-2:]
    _check_flow(flow, h, w, "flow")
    iy, ix, wy, wx = _bicubic_taps(flow, h, w)
    out = np.zeros_like(frame, dtype=np.float64)
    for l in range(4):
        for k in range(4):
            out += (wy[l] * wx[k]) * frame[..., iy[l], ix[k]]
    return out


def warp(frame, flow: np.ndarray):
    """Differentiable warp: gradient flows into ``frame`` through the fixed
    interpolation weights; the flow itself is a constant.

    Accepts a Tensor or ndarray with trailing (H, W) axes and returns the
    matching kind.
    """
    if not isinstance(frame, Tensor):
        return warp_array(np.asarray(frame, dtype=np.float64), flow)

    data = frame.data
    h, w = data.shape[-2:]
    _check_flow(flow, h, w, "flow")
    iy, ix, wy, wx = _bicubic_taps(flow, h, w)
    out = np.zeros_like(data)
    flat_idx = np.empty((16, h * w), dtype=np.int64)
    flat_wgt = np.empty((16, h * w))
    for l in range(4):
        for k in range(4):
            wlk = wy[l] * wx[k]
            flat_idx[4 * l + k] = (iy[l] * w + ix[k]).ravel()
            flat_wgt[4 * l + k] = wlk.ravel()
            out += wlk * data[..., iy[l], ix[k]]

    lead = data.shape[:-2]
    idx_all = flat_idx.ravel()

    def backward(g):
        gl = g.reshape((-1, h * w))
        buf = np.empty((gl.shape[0], h * w))
        for c in range(gl.shape[0]):
            buf[c] = np.bincount(idx_all, weights=(flat_wgt * gl[c]).ravel(), minlength=h * w)
        accumulate_grad(frame, buf.reshape(lead + (h, w)))

    return trace_op(out, backward, (frame,))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def occlusion_mask(flow: np.ndarray) -> np.ndarray:
    """Collision-based occlusion detector.

    Every source pixel votes for the rounded cell it lands on; any cell
    collecting two or more votes masks all of its contributors, and sources
    landing outside the frame are masked as well.  Returns a float {0, 1}
    image on the source grid.
    """
    h, w = flow.shape[:2]
    _check_flow(flow, h, w, "flow")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = _round_half_away(xx + flow[:, :, 0]).astype(np.int64)
    ty = _round_half_away(yy + flow[:, :, 1]).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    cell = ty[inside] * w + tx[inside]
    votes = np.bincount(cell, minlength=h * w)
    mask = np.zeros((h, w))
    mask[inside] = (votes[cell] < 2).astype(np.float64)
    return mask


def warping_residual(f_prev: np.ndarray, f_cur: np.ndarray, flow: np.ndarray, cfg: MaskConfig) -> np.ndarray:
    """Smoothed photometric error between f_prev and the warped f_cur.

    Computed at half resolution: frames and flow are downsampled by 2 (flow
    vectors halved), both frames pre-smoothed, the current frame warped,
    channel-wise absolute errors summed, smoothed again, and the result
    upsampled back to (H, W).
    """
    if f_prev.shape != f_cur.shape:
        raise DimensionError(f"frame shapes differ: {f_prev.shape} vs {f_cur.shape}")
    h, w = f_prev.shape[-2:]
    _check_flow(flow, h, w, "flow")

    prev_half = imageops.downsample2(f_prev)
    cur_half = imageops.downsample2(f_cur)
    flow_half = 0.5 * np.stack(
        [imageops.downsample2(flow[:, :, 0]), imageops.downsample2(flow[:, :, 1])], axis=-1
    )

    prev_s = imageops.gaussian_blur(prev_half, cfg.sigma_g2)
    cur_s = imageops.gaussian_blur(cur_half, cfg.sigma_g2)
    warped = warp_array(cur_s, flow_half)
    diff = np.abs(prev_s - warped)
    if diff.ndim == 3:
        diff = diff.sum(axis=0)
    residual_half = imageops.gaussian_blur(diff, cfg.sigma_g1)
    return imageops.upsample2_nearest(residual_half)[:h, :w]


def adaptive_threshold(residual: np.ndarray, cfg: MaskConfig) -> tuple[float, np.ndarray]:
    """Histogram-mode threshold for the warping residual.

    tau = mode + factor * max(mode - low_percentile, 0), where the mode is
    read off a Gaussian-smoothed histogram of the residuals.  Returns
    (tau, mask) with mask(x) = 1 iff residual(x) <= tau.
    """
    r = np.asarray(residual, dtype=np.float64)
    rmax = float(r.max())
    rmin = float(r.min())
    if rmax == rmin:
        raise DegenerateDistributionError("residual has no spread; no threshold can be estimated")
    counts, edges = np.histogram(r, bins=cfg.histogram_bins, range=(0.0, rmax))
    smoothed = imageops.smooth1d(counts.astype(np.float64), cfg.histogram_smoothing_sigma)
    centers = 0.5 * (edges[:-1] + edges[1:])
    mode = float(centers[int(np.argmax(smoothed))])
    low = float(np.quantile(r, cfg.percentile))
    spread = max(mode - low, 0.0)
    tau = mode + spread * cfg.threshold_factor
    return tau, (r <= tau).astype(np.float64)


def alignment_mask(
    f_prev: np.ndarray, f_cur: np.ndarray, flow: np.ndarray, cfg: MaskConfig
) -> tuple[np.ndarray, float]:
    """Product of the occlusion mask and the thresholded residual mask.

    Returns (mask, tau).  A residual with no spread (e.g. identical
    noise-free frames) cannot be thresholded; the residual factor then
    degrades to all-ones and tau is reported as nan.
    """
    occ = occlusion_mask(flow)
    residual = warping_residual(f_prev, f_cur, flow, cfg)
    try:
        tau, res_mask = adaptive_threshold(residual, cfg)
    except DegenerateDistributionError:
        tau, res_mask = float("nan"), np.ones_like(residual)
    return occ * res_mask, tau
