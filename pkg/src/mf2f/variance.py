"""Variance-map parameterizations conditioning the denoiser.

The network receives a per-pixel noise-variance channel.  Three storage
schemes cover the blind-estimation experiments:

* ScalarVariance — one sigma for the whole video;
* PerLevelVariance — K sigmas indexed by the central frame's brightness bin
  (edges fixed once from the video's global intensity range);
* SpatialVariance — a free (H, W) sigma image, kept smooth by a TV penalty.

All variants store sigma and expand to sigma^2, so the map stays
nonnegative for any parameter value without constrained optimization.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import imageops
from .errors import DimensionError


class ScalarVariance:
    """Single sigma; expands to a constant sigma^2 map."""

    kind = "scalar"

    def __init__(self, sigma: float, trainable: bool = True):
        self.sigma = ad.ParamTensor(np.array([float(sigma)]), name="varmap.sigma", group="varmap")
        self._trainable = trainable

    @property
    def sigma_value(self) -> float:
        return float(self.sigma.data[0])

    def trainable(self) -> list[ad.ParamTensor]:
        return [self.sigma] if self._trainable else []

    def expand(self, reference_frame: np.ndarray) -> ad.Tensor:
        h, w = reference_frame.shape[-2:]
        return ad.mul(ad.square(self.sigma), np.ones((h, w)))

    def describe(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma_value}


class PerLevelVariance:
    """K sigmas selected by the brightness bin of the central noisy frame.

    ``edges`` are K+1 increasing floats covering the video's intensity
    range; luminance outside the range clamps to the nearest bin.
    """

    kind = "per_level"

    def __init__(self, sigmas, edges, trainable: bool = True):
        sigmas = np.asarray(sigmas, dtype=np.float64)
        edges = np.asarray(edges, dtype=np.float64)
        if sigmas.ndim != 1 or edges.ndim != 1 or len(edges) != len(sigmas) + 1:
            raise DimensionError(f"need K sigmas and K+1 edges, got {sigmas.shape} / {edges.shape}")
        if np.any(np.diff(edges) <= 0):
            raise DimensionError("per-level edges must be strictly increasing")
        self.sigmas = ad.ParamTensor(sigmas, name="varmap.sigmas", group="varmap")
        self.edges = edges
        self._trainable = trainable

    @classmethod
    def from_video(cls, video: np.ndarray, levels: int, sigma_init: float, trainable: bool = True):
        """Edges split the video's global [min, max] into equal intervals."""
        if levels < 1:
            raise ValueError(f"per-level variance needs at least one level, got {levels}")
        lo = float(video.min())
        hi = float(video.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, levels + 1)
        return cls(np.full(levels, float(sigma_init)), edges, trainable=trainable)

    @property
    def sigma_values(self) -> np.ndarray:
        return self.sigmas.data.copy()

    def trainable(self) -> list[ad.ParamTensor]:
        return [self.sigmas] if self._trainable else []

    def bin_map(self, reference_frame: np.ndarray) -> np.ndarray:
        lum = imageops.luminance(reference_frame)
        idx = np.searchsorted(self.edges, lum, side="right") - 1
        return np.clip(idx, 0, len(self.sigmas.data) - 1)

    def bin_counts(self, reference_frame: np.ndarray) -> np.ndarray:
        return np.bincount(self.bin_map(reference_frame).ravel(), minlength=len(self.sigmas.data))

    def expand(self, reference_frame: np.ndarray) -> ad.Tensor:
        return ad.index_select(ad.square(self.sigmas), self.bin_map(reference_frame))

    def describe(self) -> dict:
        return {"kind": self.kind, "sigmas": self.sigma_values.tolist(), "edges": self.edges.tolist()}


class SpatialVariance:
    """Free per-pixel sigma image; pair with tv_regularizer during training."""

    kind = "spatial"

    def __init__(self, sigma_map: np.ndarray, tv_weight: float = 0.05, trainable: bool = True):
        sigma_map = np.asarray(sigma_map, dtype=np.float64)
        if sigma_map.ndim != 2:
            raise DimensionError(f"spatial sigma map must be (H, W), got {sigma_map.shape}")
        self.sigma_map = ad.ParamTensor(sigma_map, name="varmap.sigma_map", group="varmap")
        self.tv_weight = float(tv_weight)
        self._trainable = trainable

    @classmethod
    def constant(cls, shape: tuple[int, int], sigma: float, tv_weight: float = 0.05, trainable: bool = True):
        return cls(np.full(shape, float(sigma)), tv_weight=tv_weight, trainable=trainable)

    def trainable(self) -> list[ad.ParamTensor]:
        return [self.sigma_map] if self._trainable else []

    def expand(self, reference_frame: np.ndarray) -> ad.Tensor:
        h, w = reference_frame.shape[-2:]
        if self.sigma_map.data.shape != (h, w):
            raise DimensionError(f"sigma map shape {self.sigma_map.data.shape} does not match frame ({h}, {w})")
        return ad.square(self.sigma_map)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "tv_weight": self.tv_weight,
            "sigma_mean": float(self.sigma_map.data.mean()),
            "shape": list(self.sigma_map.data.shape),
        }


def expand_variance_map(varmap, reference_frame: np.ndarray) -> ad.Tensor:
    """Expand any variance-map parameterization to an (H, W) sigma^2 tensor
    whose gradient routes to the owning parameters."""
    return varmap.expand(reference_frame)


def make_variance_map(kind: str, **kw):
    if kind == "scalar":
        return ScalarVariance(**kw)
    if kind == "per_level":
        return PerLevelVariance(**kw)
    if kind == "spatial":
        return SpatialVariance(**kw)
    raise ValueError(f"unknown variance map kind {kind!r}")
