"""Blind video denoising by self-supervised multi-frame fine-tuning.

A small multi-frame denoising network is adapted to each noisy video with
no clean data and no noise model: the network's output for frame t is
warped onto the previous noisy frame along the estimated optical flow,
alignment failures are masked out, and the masked difference is minimized
online (per frame) or offline (sampled frames).  Subpackages provide the
autodiff core, TV-L1 flow, warping/masking, the cascaded U-net denoiser,
noise synthesis, metrics, and a CLI.
"""

__version__ = "0.1.0"
