"""Synthetic noise models and per-frame noise schedules.

All generators are pure functions of (clean frame, model, seed) using the
package's own counter-based PRNG, so noisy datasets are bitwise
reproducible across platforms.  Outputs are *not* clipped to [0, 255]:
clipping would bias the noise statistics the denoiser is supposed to learn;
it only happens when exporting 8-bit images.

A note on box noise: its sigma names the white-noise sigma *before* the
s x s box filter, so the per-pixel variance of the delivered noise is
sigma^2 / s^2 and neighboring pixels are correlated with lag-1
autocorrelation (s-1)/s along each axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops
from .errors import DimensionError, ScheduleError
from .rng import CounterRng


@dataclass(frozen=True)
class Awgn:
    sigma: float

    def validate(self):
        if self.sigma <= 0:
            raise ValueError(f"awgn sigma must be positive, got {self.sigma}")
        return self

    def describe(self) -> dict:
        return {"model": "awgn", "sigma": self.sigma}


@dataclass(frozen=True)
class ScaledPoisson:
    """f = p * Poisson(u / p): mean u, variance p * u."""

    p: float

    def validate(self):
        if self.p <= 0:
            raise ValueError(f"poisson scale must be positive, got {self.p}")
        return self

    def describe(self) -> dict:
        return {"model": "poisson", "p": self.p}


@dataclass(frozen=True)
class BoxNoise:
    """AWGN(sigma) convolved with a normalized size x size box filter."""

    size: int
    sigma: float

    def validate(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"box size must be odd and >= 3, got {self.size}")
        if self.sigma <= 0:
            raise ValueError(f"box sigma must be positive, got {self.sigma}")
        return self

    def describe(self) -> dict:
        return {"model": "box", "size": self.size, "sigma": self.sigma}


@dataclass(frozen=True)
class HeteroAwgn:
    """Gaussian noise with a per-pixel sigma image (broadcast over channels)."""

    sigma_map: np.ndarray

    def validate(self):
        if np.asarray(self.sigma_map).ndim != 2:
            raise DimensionError("sigma_map must be a 2-D image")
        if np.any(np.asarray(self.sigma_map) < 0):
            raise ValueError("sigma_map entries must be nonnegative")
        return self

    def describe(self) -> dict:
        m = np.asarray(self.sigma_map)
        return {"model": "hetero_awgn", "sigma_min": float(m.min()), "sigma_max": float(m.max())}


NoiseModel = Awgn | ScaledPoisson | BoxNoise | HeteroAwgn


def poisson_sample(lam, rng: CounterRng) -> np.ndarray:
    """Poisson counts; exact small-rate sampling, Gaussian tail for rates
    >= 30 (see CounterRng.poisson)."""
    return rng.poisson(np.asarray(lam, dtype=np.float64))


def apply_noise(clean: np.ndarray, model: NoiseModel, seed: int) -> np.ndarray:
    """One noisy realization of a (C, H, W) or (H, W) frame."""
    clean = np.asarray(clean, dtype=np.float64)
    rng = CounterRng(seed)
    model.validate()
    if isinstance(model, Awgn):
        return clean + model.sigma * rng.normal(clean.shape)
    if isinstance(model, ScaledPoisson):
        # negative clean values (possible after synthetic compositing) are
        # clamped: a Poisson rate cannot be negative
        lam = np.maximum(clean, 0.0) / model.p
        return model.p * rng.poisson(lam).astype(np.float64)
    if isinstance(model, BoxNoise):
        white = model.sigma * rng.normal(clean.shape)
        return clean + imageops.box_filter(white, model.size)
    if isinstance(model, HeteroAwgn):
        sm = np.asarray(model.sigma_map, dtype=np.float64)
        if sm.shape != clean.shape[-2:]:
            raise DimensionError(f"sigma_map shape {sm.shape} does not match frame {clean.shape[-2:]}")
        return clean + sm * rng.normal(clean.shape)
    raise TypeError(f"unknown noise model {type(model).__name__}")


@dataclass(frozen=True)
class ScheduleEntry:
    first: int
    last: int  # inclusive
    model: NoiseModel


@dataclass(frozen=True)
class NoiseSchedule:
    """Assigns one noise model to every frame index via inclusive ranges."""

    entries: tuple[ScheduleEntry, ...]

    @classmethod
    def constant(cls, model: NoiseModel, num_frames: int) -> "NoiseSchedule":
        return cls((ScheduleEntry(0, num_frames - 1, model),))

    def validate(self, num_frames: int) -> "NoiseSchedule":
        covered = np.zeros(num_frames, dtype=np.int64)
        for e in self.entries:
            if e.first > e.last:
                raise ScheduleError(f"schedule range [{e.first}, {e.last}] is empty")
            if e.first < 0 or e.last >= num_frames:
                raise ScheduleError(f"schedule range [{e.first}, {e.last}] exceeds 0..{num_frames - 1}")
            covered[e.first : e.last + 1] += 1
        missing = np.flatnonzero(covered == 0)
        if missing.size:
            raise ScheduleError(f"frames without a noise model: {missing[:8].tolist()}...")
        doubled = np.flatnonzero(covered > 1)
        if doubled.size:
            raise ScheduleError(f"frames with overlapping ranges: {doubled[:8].tolist()}...")
        return self

    def model_for(self, t: int) -> NoiseModel:
        for e in self.entries:
            if e.first <= t <= e.last:
                return e.model
        raise ScheduleError(f"frame {t} not covered by the schedule")

    def describe(self) -> list[dict]:
        return [{"from": e.first, "to": e.last, **e.model.describe()} for e in self.entries]


def noisy_video(clean_video: np.ndarray, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """Apply the schedule frame by frame with independent derived sub-seeds."""
    clean_video = np.asarray(clean_video, dtype=np.float64)
    t_total = clean_video.shape[0]
    schedule.validate(t_total)
    out = np.empty_like(clean_video)
    base = CounterRng(seed)
    for t in range(t_total):
        out[t] = apply_noise(clean_video[t], schedule.model_for(t), base.derive(t).seed)
    return out
