"""Plain-numpy image helpers (no autodiff involvement).

These back the optical-flow solver, the alignment masks and the metrics.
Everything here operates on float64 arrays whose last two axes are (H, W);
leading axes (channels, batch) are carried through untouched.  Borders are
handled by whole-sample reflection unless stated otherwise, so repeated
filtering never invents intensity mass at the edges.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map integer indices onto [0, n) by whole-sample reflection.

    Pattern for n=4: ... 2 1 | 0 1 2 3 | 2 1 0 1 ...  For n == 1 everything
    collapses to 0.
    """
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(arr: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    iy = reflect_index(np.arange(-top, h + bottom), h)
    ix = reflect_index(np.arange(-left, w + right), w)
    return arr[..., iy[:, None], ix[None, :]]


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian; default radius covers 3 sigma."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def correlate1d(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate along one of the two trailing axes with reflected borders."""
    r = len(kernel) // 2
    if axis == -1 or axis == arr.ndim - 1:
        padded = pad_reflect(arr, 0, 0, r, r)
        out = np.zeros_like(arr)
        for i, kv in enumerate(kernel):
            out += kv * padded[..., :, i : i + arr.shape[-1]]
    else:
        padded = pad_reflect(arr, r, r, 0, 0)
        out = np.zeros_like(arr)
        for i, kv in enumerate(kernel):
            out += kv * padded[..., i : i + arr.shape[-2], :]
    return out


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the trailing (H, W) axes."""
    k = gaussian_kernel1d(sigma)
    return correlate1d(correlate1d(arr, k, axis=-2), k, axis=-1)


def smooth1d(values: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing of a 1-D signal (histogram smoothing) with
    reflected ends."""
    values = np.asarray(values, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    idx = reflect_index(np.arange(-r, len(values) + r), len(values))
    padded = values[idx]
    out = np.zeros_like(values)
    for i, kv in enumerate(k):
        out += kv * padded[i : i + len(values)]
    return out


def box_filter(arr: np.ndarray, size: int) -> np.ndarray:
    """Normalized size x size box filter (odd size), reflected borders."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"box size must be odd and positive, got {size}")
    k = np.full(size, 1.0 / size)
    return correlate1d(correlate1d(arr, k, axis=-2), k, axis=-1)


def median_filter(arr: np.ndarray, radius: int) -> np.ndarray:
    """Median over a (2r+1)^2 window for each trailing-(H, W) slice."""
    if radius < 1:
        return arr.copy()
    k = 2 * radius + 1
    padded = pad_reflect(arr, radius, radius, radius, radius)
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(-2, -1))
    return np.median(win, axis=(-2, -1))


def downsample2(arr: np.ndarray) -> np.ndarray:
    """Halve the trailing (H, W) axes by 2x2 averaging.

    Odd extents are first reflect-padded by one row/column so no sample is
    dropped; the output is ceil(H/2) x ceil(W/2).
    """
    h, w = arr.shape[-2:]
    if h % 2 or w % 2:
        arr = pad_reflect(arr, 0, h % 2, 0, w % 2)
        h, w = arr.shape[-2:]
    shaped = arr.reshape(arr.shape[:-2] + (h // 2, 2, w // 2, 2))
    return shaped.mean(axis=(-3, -1))


def upsample2_nearest(arr: np.ndarray) -> np.ndarray:
    """Double the trailing (H, W) axes by pixel replication."""
    return np.repeat(np.repeat(arr, 2, axis=-2), 2, axis=-1)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the trailing (H, W) axes (align-corners-free,
    pixel-center convention)."""
    h, w = arr.shape[-2:]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = arr[..., y0c[:, None], x0c[None, :]] * (1 - fx)[None, :] + arr[..., y0c[:, None], x1c[None, :]] * fx[None, :]
    bot = arr[..., y1c[:, None], x0c[None, :]] * (1 - fx)[None, :] + arr[..., y1c[:, None], x1c[None, :]] * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def centered_gradient(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered differences (gx, gy) over the trailing (H, W) axes, with
    one-sided differences at the borders."""
    gx = np.empty_like(arr)
    gy = np.empty_like(arr)
    gx[..., :, 1:-1] = 0.5 * (arr[..., :, 2:] - arr[..., :, :-2])
    gx[..., :, 0] = arr[..., :, 1] - arr[..., :, 0]
    gx[..., :, -1] = arr[..., :, -1] - arr[..., :, -2]
    gy[..., 1:-1, :] = 0.5 * (arr[..., 2:, :] - arr[..., :-2, :])
    gy[..., 0, :] = arr[..., 1, :] - arr[..., 0, :]
    gy[..., -1, :] = arr[..., -1, :] - arr[..., -2, :]
    return gx, gy


def forward_diff(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences with zero rows/columns at the far borders."""
    dx = np.zeros_like(arr)
    dy = np.zeros_like(arr)
    dx[..., :, :-1] = arr[..., :, 1:] - arr[..., :, :-1]
    dy[..., :-1, :] = arr[..., 1:, :] - arr[..., :-1, :]
    return dx, dy


def divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Negative adjoint of forward_diff (backward differences)."""
    # Exact adjointness relies on px[..., -1] == 0 and py[..., -1, :] == 0,
    # which holds for any dual variable built from forward_diff outputs.
    div = np.zeros_like(px)
    div[..., :, 0] += px[..., :, 0]
    div[..., :, 1:] += px[..., :, 1:] - px[..., :, :-1]
    div[..., 0, :] += py[..., 0, :]
    div[..., 1:, :] += py[..., 1:, :] - py[..., :-1, :]
    return div


def luminance(frame: np.ndarray) -> np.ndarray:
    """Collapse a (C, H, W) frame to (H, W) by channel averaging."""
    if frame.ndim == 2:
        return frame
    if frame.ndim != 3:
        raise DimensionError(f"frame must be (H, W) or (C, H, W), got shape {frame.shape}")
    return frame.mean(axis=0)
