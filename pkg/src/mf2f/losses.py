"""Self-supervised training objectives.

The core loss warps the network output onto the previous noisy frame, masks
alignment failures, and takes a mean absolute difference over the surviving
samples.  Crucially the target frame is *not* part of the training input
stack — a loss whose target can be read off the input admits the trivial
minimizer "warp the target back", and training collapses to motion
interpolation instead of denoising.  The stack layout enforcing that lives
in the engine; this module only scores predictions.

Normalization: the sum is divided by (unmasked pixels x channels), so one
gray-level of error on a full mask scores exactly 1 and the learning rate
does not depend on frame size or mask density.  The divisor is recorded in
the returned LossValue for auditability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, EmptySupportError
from .warping import warp


@dataclass
class LossValue:
    """Scalar loss tensor plus the provenance of its normalization."""

    tensor: ad.Tensor
    unmasked_count: int
    channels: int

    @property
    def value(self) -> float:
        return float(self.tensor.data)


def _masked_l1(net_out, target_prev: np.ndarray, flow: np.ndarray, mask: np.ndarray) -> LossValue:
    target_prev = np.asarray(target_prev, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if net_out.shape != target_prev.shape:
        raise DimensionError(f"net output shape {net_out.shape} does not match target {target_prev.shape}")
    if net_out.shape[-2:] != mask.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match frame spatial dims {net_out.shape[-2:]}")
    channels = 1 if net_out.data.ndim == 2 else net_out.shape[0]
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise EmptySupportError("alignment mask left no pixels to train on")

    warped = warp(net_out, flow)
    per_channel = ad.absolute(ad.sub(warped, target_prev))
    total = ad.reduce_sum(ad.mul(per_channel, mask))
    loss = ad.mul(total, 1.0 / (count * channels))
    return LossValue(tensor=loss, unmasked_count=count, channels=channels)


def mf2f_loss(net_out, target_prev: np.ndarray, flow: np.ndarray, mask: np.ndarray) -> LossValue:
    """Motion-compensated masked L1 against the previous noisy frame.

    ``net_out`` is the (C, H, W) output tensor of the multi-frame network;
    gradient flows to it alone (flow and mask are constants).
    """
    return _masked_l1(net_out, target_prev, flow, mask)


def f2f_loss(net_out, target_prev: np.ndarray, flow: np.ndarray, mask: np.ndarray) -> LossValue:
    """Identical scoring to mf2f_loss; a named alias so single-frame
    baseline configs and degenerate-stack experiments stay explicit."""
    return _masked_l1(net_out, target_prev, flow, mask)


def tv_regularizer(sigma_map: ad.ParamTensor, weight: float, epsilon: float = 1e-3) -> LossValue:
    """Smoothed isotropic total variation of a spatial parameter map.

    weight * mean over pixels of sqrt(dx^2 + dy^2 + eps^2) with forward
    differences (zero at the far borders).  The eps term keeps the gradient
    defined on flat regions.
    """
    if weight < 0:
        raise ValueError(f"tv weight must be nonnegative, got {weight}")
    h, w = sigma_map.data.shape
    dx = ad.pad2d(
        ad.sub(ad.crop2d(sigma_map, 0, 1, h, w - 1), ad.crop2d(sigma_map, 0, 0, h, w - 1)),
        (0, 0, 0, 1),
        mode="zero",
    )
    dy = ad.pad2d(
        ad.sub(ad.crop2d(sigma_map, 1, 0, h - 1, w), ad.crop2d(sigma_map, 0, 0, h - 1, w)),
        (0, 1, 0, 0),
        mode="zero",
    )
    magnitude = ad.sqrt(ad.add(ad.add(ad.square(dx), ad.square(dy)), epsilon**2))
    loss = ad.mul(ad.reduce_mean(magnitude), float(weight))
    return LossValue(tensor=loss, unmasked_count=h * w, channels=1)
