"""Procedural clean video synthesis.

Pretraining and the synthetic experiments need textured sequences with
known ground truth and controllable motion.  Frames are cut from a larger
static canvas — a multi-scale smoothed noise texture plus a smooth
brightness ramp so the full intensity range is represented — and the crop
window translates with sub-pixel velocity, resampled bicubically.  A
variant composites a moving textured square over the background for
occlusion/disocclusion experiments.
"""

from __future__ import annotations

import numpy as np

from . import imageops
from .rng import CounterRng
from .warping import warp_array


def procedural_texture(rng: CounterRng, h: int, w: int, low: float = 10.0, high: float = 245.0) -> np.ndarray:
    """Multi-scale texture with a random smooth illumination ramp,
    rescaled to [low, high]."""
    acc = np.zeros((h, w))
    for sigma, weight in ((1.0, 1.0), (2.0, 1.0), (4.0, 1.5), (8.0, 2.0)):
        acc += weight * imageops.gaussian_blur(rng.normal((h, w)), sigma)
    acc /= max(acc.std(), 1e-9)
    theta = rng.uniform() * 2.0 * np.pi
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
    acc += 2.5 * (ramp - ramp.mean())
    lo, hi = acc.min(), acc.max()
    return low + (acc - lo) * ((high - low) / max(hi - lo, 1e-9))


def _sample_window(canvas: np.ndarray, y0: float, x0: float, h: int, w: int) -> np.ndarray:
    """Bicubic sample of an h x w window whose top-left corner sits at the
    (possibly fractional) canvas position (y0, x0)."""
    iy0 = int(np.floor(y0))
    ix0 = int(np.floor(x0))
    fy = y0 - iy0
    fx = x0 - ix0
    region = canvas[iy0 - 2 : iy0 + h + 2, ix0 - 2 : ix0 + w + 2]
    if fy == 0.0 and fx == 0.0:
        return region[2 : 2 + h, 2 : 2 + w].copy()
    flow = np.zeros(region.shape + (2,))
    flow[:, :, 0] = fx
    flow[:, :, 1] = fy
    return warp_array(region, flow)[2 : 2 + h, 2 : 2 + w]


def translating_video(
    seed: int,
    frames: int,
    h: int,
    w: int,
    velocity: tuple[float, float] | None = None,
    channels: int = 1,
) -> np.ndarray:
    """A (T, C, H, W) clean sequence: one texture sliding at constant
    (vx, vy) pixels per frame; sub-pixel velocities are fine."""
    rng = CounterRng(seed)
    if velocity is None:
        velocity = (rng.uniform(None, -1.5, 1.5), rng.uniform(None, -1.5, 1.5))
    vx, vy = velocity
    margin = int(np.ceil(max(abs(vx), abs(vy)) * frames)) + 4
    canvas_list = [procedural_texture(rng.derive(c), h + 2 * margin, w + 2 * margin) for c in range(channels)]
    video = np.empty((frames, channels, h, w))
    for t in range(frames):
        y0 = margin + vy * t
        x0 = margin + vx * t
        for c in range(channels):
            video[t, c] = _sample_window(canvas_list[c], y0, x0, h, w)
    return video


def moving_square_video(
    seed: int,
    frames: int,
    h: int,
    w: int,
    square: int = 16,
    velocity: tuple[int, int] = (2, 0),
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Static textured background with a contrasting textured square moving
    at an integer velocity.  Returns (video (T, 1, H, W), per-frame
    top-left square positions) so tests know the exact disocclusion band.
    """
    rng = CounterRng(seed)
    background = procedural_texture(rng.derive(0), h, w, low=10.0, high=160.0)
    patch = procedural_texture(rng.derive(1), square, square, low=120.0, high=245.0)
    vx, vy = int(velocity[0]), int(velocity[1])
    y0 = (h - square) // 2 - (vy * frames) // 2
    x0 = (w - square) // 2 - (vx * frames) // 2
    video = np.empty((frames, 1, h, w))
    positions = []
    for t in range(frames):
        frame = background.copy()
        ys = y0 + vy * t
        xs = x0 + vx * t
        if not (0 <= ys <= h - square and 0 <= xs <= w - square):
            raise ValueError("square leaves the frame; shrink velocity or frame count")
        frame[ys : ys + square, xs : xs + square] = patch
        video[t, 0] = frame
        positions.append((ys, xs))
    return video, positions


def held_out_video(seed: int, frames: int = 12, h: int = 64, w: int = 64, channels: int = 1) -> np.ndarray:
    """Evaluation sequence drawn from a seed range pretraining never uses."""
    return translating_video(seed + 777_001, frames, h, w, channels=channels)
