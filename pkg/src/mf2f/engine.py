"""Fine-tuning engine: stack construction, pretraining, and the online /
offline self-supervised adaptation loops.

The central trick is the training stack layout: the network is fed a
temporally dilated window [t-4, t-2, t, t+2, t+4] and scored against the
*excluded* frame t-1 after motion compensation.  Because the target never
appears in the input, copying input noise cannot reach zero loss, and with
temporally independent noise the masked L1 pulls the output toward the
clean signal.  Putting the target inside the input window (the degenerate
configuration, available behind an explicit flag) collapses training to
motion interpolation of noise — the engine keeps that experiment one
StackSpec away because it is the cleanest falsifier of the design.

Online mode updates weights a few frames at a time while denoising,
tracking noise that changes over time; offline mode spends a fixed budget
of updates on randomly sampled frames, then denoises everything in one
pass.  Inference always uses the natural contiguous window centered on t.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .denoiser import CascadeDenoiser, FrameStackInput
from .errors import ContractError, EmptySupportError, NumericError
from .flow import TvL1Params, tvl1_flow
from .losses import mf2f_loss, tv_regularizer
from .metrics import psnr
from .noise import Awgn, apply_noise
from .rng import CounterRng, derive_seed
from .textures import translating_video
from .variance import ScalarVariance, SpatialVariance
from .warping import MaskConfig, alignment_mask


def worker_count() -> int:
    """Worker cap for per-frame parallel maps (MF2F_THREADS overrides)."""
    env = os.environ.get("MF2F_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return min(4, os.cpu_count() or 1)


def parallel_map(fn, items):
    """Order-preserving parallel map; falls back to serial for one worker."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# stacks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackSpec:
    """Five input offsets around t, plus (for training) the target offset.

    Validation rejects a target inside the input window unless
    ``allow_degenerate`` is set — that configuration exists only for the
    collapse experiment.
    """

    offsets: tuple[int, int, int, int, int]
    target_offset: int | None = None
    allow_degenerate: bool = False

    def validate(self) -> "StackSpec":
        if len(self.offsets) != 5:
            raise ContractError(f"a stack uses exactly 5 offsets, got {self.offsets}")
        if any(self.offsets[i] >= self.offsets[i + 1] for i in range(4)):
            raise ContractError(f"stack offsets must be strictly increasing, got {self.offsets}")
        if self.target_offset is not None and self.target_offset in self.offsets and not self.allow_degenerate:
            raise ContractError(
                f"target offset {self.target_offset} sits inside the input window {self.offsets}; "
                "training on a frame the network can see collapses to noise interpolation "
                "(set allow_degenerate to run that experiment on purpose)"
            )
        return self

    def describe(self) -> dict:
        return {
            "offsets": list(self.offsets),
            "target_offset": self.target_offset,
            "allow_degenerate": self.allow_degenerate,
        }


NATURAL_STACK = StackSpec((-2, -1, 0, 1, 2))
DILATED_TRAIN_STACK = StackSpec((-4, -2, 0, 2, 4), target_offset=-1)


def build_stack(video: np.ndarray, t: int, spec: StackSpec) -> FrameStackInput:
    """Gather the stack frames for time t, clamping indices at the sequence
    boundaries (edge frames repeat)."""
    t_total = video.shape[0]
    if not 0 <= t < t_total:
        raise ContractError(f"frame index {t} outside 0..{t_total - 1}")
    frames = [video[min(max(t + off, 0), t_total - 1)] for off in spec.offsets]
    return FrameStackInput(frames, spec.offsets)


def valid_training_frames(num_frames: int, spec: StackSpec) -> list[int]:
    """Frame indices whose target is a real (unclamped) distinct frame."""
    if spec.target_offset is None:
        raise ContractError("spec has no target offset; not a training spec")
    return [t for t in range(num_frames) if 0 <= t + spec.target_offset < num_frames]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OnlineConfig:
    steps_per_update: int = 20
    frames_per_minibatch: int = 2
    lr: float = 1e-5
    train_spec: StackSpec = DILATED_TRAIN_STACK
    infer_spec: StackSpec = NATURAL_STACK
    selector: str = "all"
    train_varmap: bool = False

    def validate(self) -> "OnlineConfig":
        if self.steps_per_update < 1:
            raise ContractError("steps_per_update must be >= 1")
        if self.frames_per_minibatch < 1:
            raise ContractError("frames_per_minibatch must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        self.train_spec.validate()
        self.infer_spec.validate()
        if self.train_spec.target_offset is None:
            raise ContractError("online training spec needs a target offset")
        return self


@dataclass(frozen=True)
class OfflineConfig:
    total_updates: int = 200
    batch_frames: int = 20
    lr: float = 1e-5
    train_spec: StackSpec = DILATED_TRAIN_STACK
    infer_spec: StackSpec = NATURAL_STACK
    selector: str = "all"
    train_varmap: bool = False
    probe_every: int = 0  # when > 0 and a clean reference is given, record
    # the full-inference PSNR every this many updates

    def validate(self) -> "OfflineConfig":
        if self.total_updates < 0:
            raise ContractError("total_updates must be >= 0")
        if self.batch_frames < 1:
            raise ContractError("batch_frames must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        self.train_spec.validate()
        self.infer_spec.validate()
        if self.train_spec.target_offset is None:
            raise ContractError("offline training spec needs a target offset")
        return self


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 6
    lr: float = 1e-3
    sigma_range: tuple[float, float] = (5.0, 40.0)
    num_videos: int = 6
    frames_per_video: int = 12
    crop: int = 32
    batch: int = 4

    def validate(self) -> "PretrainConfig":
        lo, hi = self.sigma_range
        if not (0.0 < lo <= hi < 100.0):
            raise ContractError(f"sigma_range must satisfy 0 < lo <= hi < 100, got {self.sigma_range}")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if min(self.num_videos, self.frames_per_video, self.crop, self.batch) < 1:
            raise ContractError("num_videos, frames_per_video, crop and batch must be >= 1")
        return self


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _trainable(net: CascadeDenoiser, varmap, selector: str, train_varmap: bool):
    vm = varmap if (train_varmap or selector == "varmap_only") else None
    params = net.select_params(selector, vm)
    if not params:
        raise ContractError(f"selector {selector!r} selected no trainable parameters")
    return params


def _flow_and_mask(video, t, flow_params, mask_cfg):
    """Flow from frame t-1 to frame t plus the alignment mask on t-1's grid."""
    prev = video[t - 1]
    cur = video[t]
    fl = tvl1_flow(prev, cur, flow_params)
    mask, tau = alignment_mask(prev, cur, fl, mask_cfg)
    return fl, mask, tau


def _batch_loss(net, varmap, video, frame_ids, aux, train_spec, train_varmap):
    """Mean masked loss over a list of frames (aux maps t -> (flow, mask)).

    Returns (loss tensor, mean python value).  Frames with empty masks are
    not in frame_ids by construction.
    """
    terms = []
    for t in frame_ids:
        fl, mask = aux[t]
        stack = build_stack(video, t, train_spec)
        out = net.forward(stack, varmap)
        target = video[t + train_spec.target_offset]
        terms.append(mf2f_loss(out, target, fl, mask).tensor)
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    loss = ad.mul(total, 1.0 / len(terms))
    if train_varmap and isinstance(varmap, SpatialVariance) and varmap.tv_weight > 0:
        loss = ad.add(loss, tv_regularizer(varmap.sigma_map, varmap.tv_weight).tensor)
    return loss


def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise NumericError(f"loss became non-finite during {where}; lower the learning rate")


def _denoise_frame(net, video, t, varmap, spec):
    # final-output path only; training losses always see the raw output
    out = net.forward(build_stack(video, t, spec), varmap)
    return np.clip(out.data, 0.0, 255.0)


def inference(video: np.ndarray, net: CascadeDenoiser, varmap, spec: StackSpec = NATURAL_STACK) -> np.ndarray:
    """Denoise every frame with frozen weights (parallel across frames)."""
    spec.validate()
    ts = list(range(video.shape[0]))
    frames = parallel_map(lambda t: _denoise_frame(net, video, t, varmap, spec), ts)
    return np.stack(frames)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(
    net: CascadeDenoiser,
    cfg: PretrainConfig,
    seed: int,
    eval_sigma: float = 25.0,
) -> tuple[CascadeDenoiser, dict]:
    """Supervised warm-up on procedural textures.

    Draws (noisy natural stack, clean central frame) pairs with Gaussian
    noise whose sigma — constant or a smooth spatial ramp — is sampled per
    example from cfg.sigma_range, conditioning on the true variance map,
    so the network both denoises and learns to respond
    to the variance channel.  Returns the net and a report with the
    held-out PSNR gain at ``eval_sigma``.
    """
    cfg.validate()
    rng = CounterRng(derive_seed(seed, 0xBEE))
    videos = [
        translating_video(derive_seed(seed, 100 + i), cfg.frames_per_video, cfg.crop, cfg.crop)
        for i in range(cfg.num_videos)
    ]
    samples = [(v, t) for v in range(cfg.num_videos) for t in range(cfg.frames_per_video)]
    params = net.select_params("all")
    states = ad.make_adam_states(params, lr=cfg.lr)
    lo, hi = cfg.sigma_range

    def draw_sigma_map(shape) -> np.ndarray:
        # half the samples see a smooth sigma ramp instead of a constant:
        # spatially varying noise is what forces the network to actually
        # read the variance channel instead of inferring one global level
        hh, ww = shape
        s0 = rng.uniform(None, lo, hi)
        if rng.uniform(None) < 0.5:
            return np.full(shape, s0)
        s1 = rng.uniform(None, lo, hi)
        angle = rng.uniform(None, 0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:hh, 0:ww]
        ramp = (np.cos(angle) * xx / max(ww - 1, 1)) + (np.sin(angle) * yy / max(hh - 1, 1))
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        return s0 + (s1 - s0) * ramp

    # alternate the stack geometry so the network also learns the larger
    # inter-frame motion of the dilated fine-tuning window
    geometries = (NATURAL_STACK, StackSpec((-4, -2, 0, 2, 4)))

    step = 0
    last_loss = float("nan")
    for _ in range(cfg.epochs):
        order = rng.shuffle(samples)
        for start in range(0, len(order), cfg.batch):
            batch = order[start : start + cfg.batch]
            net.zero_grad()
            with ad.Tape() as tape:
                terms = []
                for vid, t in batch:
                    sigma_map = draw_sigma_map(videos[vid].shape[-2:])
                    stack = build_stack(videos[vid], t, geometries[int(rng.uniform(None) < 0.5)])
                    noisy = FrameStackInput(
                        [f + sigma_map * rng.normal(f.shape) for f in stack.frames], stack.offsets
                    )
                    varmap = SpatialVariance(sigma_map, tv_weight=0.0, trainable=False)
                    out = net.forward(noisy, varmap)
                    diff = ad.absolute(ad.sub(out, videos[vid][t]))
                    terms.append(ad.reduce_mean(diff))
                loss = terms[0]
                for extra in terms[1:]:
                    loss = ad.add(loss, extra)
                loss = ad.mul(loss, 1.0 / len(terms))
                tape.backward(loss)
            last_loss = float(loss.data)
            _check_finite(last_loss, f"pretraining step {step}")
            ad.adam_step(params, states)
            step += 1

    report = {"steps": step, "final_loss": last_loss}
    report.update(_pretrain_eval(net, seed, cfg, eval_sigma))
    return net, report


def _pretrain_eval(net, seed, cfg: PretrainConfig, sigma: float) -> dict:
    clean = translating_video(derive_seed(seed, 991), 10, cfg.crop * 2, cfg.crop * 2)
    noisy = np.stack(
        [apply_noise(f, Awgn(sigma), derive_seed(seed, 992, t)) for t, f in enumerate(clean)]
    )
    varmap = ScalarVariance(sigma, trainable=False)
    denoised = inference(noisy, net, varmap)
    return {
        "eval_sigma": sigma,
        "noisy_psnr": psnr(clean, noisy),
        "denoised_psnr": psnr(clean, denoised),
        "heldout_gain_db": psnr(clean, denoised) - psnr(clean, noisy),
    }


# ---------------------------------------------------------------------------
# online fine-tuning
# ---------------------------------------------------------------------------


def online_finetune(
    video: np.ndarray,
    net: CascadeDenoiser,
    varmap,
    cfg: OnlineConfig,
    flow_params: TvL1Params | None = None,
    mask_cfg: MaskConfig | None = None,
    clean: np.ndarray | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Sequential adaptation: walk the video in minibatches of consecutive
    frames, run N optimizer steps on their masked losses, then denoise the
    minibatch with the freshly updated weights.

    Frames 0 and 1 precede the first possible update (their training target
    would be clamped) and are denoised with the incoming weights.  Returns
    (denoised video, one trace row per frame).
    """
    cfg.validate()
    flow_params = (flow_params or TvL1Params()).validate()
    mask_cfg = (mask_cfg or MaskConfig()).validate()
    t_total = video.shape[0]
    if t_total < 5:
        raise ContractError(f"online fine-tuning needs at least 5 frames, got {t_total}")

    params = _trainable(net, varmap, cfg.selector, cfg.train_varmap)
    states = ad.make_adam_states(params, lr=cfg.lr)
    denoised = np.empty_like(video)
    traces: list[dict] = []

    def trace_row(t, loss, tau, masked_fraction, wall_ms, note=""):
        row = {
            "t": t,
            "loss": loss,
            "tau": tau,
            "masked_fraction": masked_fraction,
            "psnr": psnr(clean[t], denoised[t]) if clean is not None else "",
            "wall_ms": wall_ms,
        }
        if isinstance(varmap, ScalarVariance):
            row["sigma"] = varmap.sigma_value
        if note:
            row["note"] = note
        traces.append(row)

    # warm-up frames: denoised before any update
    for t in (0, 1):
        started = time.perf_counter()
        denoised[t] = _denoise_frame(net, video, t, varmap, cfg.infer_spec)
        trace_row(t, "", "", "", round(1e3 * (time.perf_counter() - started), 3), note="warmup")

    t = 2
    while t < t_total:
        batch = list(range(t, min(t + cfg.frames_per_minibatch, t_total)))
        started = time.perf_counter()

        aux = {}
        stats = {}
        for u in batch:
            fl, mask, tau = _flow_and_mask(video, u, flow_params, mask_cfg)
            stats[u] = (tau, 1.0 - float(mask.mean()))
            if mask.sum() > 0:
                aux[u] = (fl, mask)

        usable = [u for u in batch if u in aux]
        mean_loss = ""
        if usable:
            for _ in range(cfg.steps_per_update):
                for p in params:
                    p.zero_grad()
                with ad.Tape() as tape:
                    loss = _batch_loss(net, varmap, video, usable, aux, cfg.train_spec, cfg.train_varmap)
                    tape.backward(loss)
                mean_loss = float(loss.data)
                _check_finite(mean_loss, f"online update at frame {batch[0]}")
                ad.adam_step(params, states)

        for u in batch:
            denoised[u] = _denoise_frame(net, video, u, varmap, cfg.infer_spec)
        wall = round(1e3 * (time.perf_counter() - started) / len(batch), 3)
        for u in batch:
            tau, frac = stats[u]
            trace_row(u, mean_loss, tau, frac, wall, note="" if u in aux else "mask-empty")
        t = batch[-1] + 1

    return denoised, traces


# ---------------------------------------------------------------------------
# offline fine-tuning
# ---------------------------------------------------------------------------


def offline_finetune(
    video: np.ndarray,
    net: CascadeDenoiser,
    varmap,
    cfg: OfflineConfig,
    flow_params: TvL1Params | None = None,
    mask_cfg: MaskConfig | None = None,
    seed: int = 0,
    clean: np.ndarray | None = None,
) -> tuple[CascadeDenoiser, list[dict]]:
    """Budget of cfg.total_updates Adam steps, each on cfg.batch_frames
    frames sampled uniformly from the valid range; flows and masks are
    memoized per frame.  Denoising afterwards is a separate inference call.

    The returned trace has one row per update ({update, loss}); when
    probe_every > 0 and a clean reference is given, rows gain the average
    PSNR of a full natural-stack inference pass at that point.
    """
    cfg.validate()
    flow_params = (flow_params or TvL1Params()).validate()
    mask_cfg = (mask_cfg or MaskConfig()).validate()
    valid = valid_training_frames(video.shape[0], cfg.train_spec)
    if not valid:
        raise ContractError("no valid training frames for this spec/video length")

    params = _trainable(net, varmap, cfg.selector, cfg.train_varmap)
    states = ad.make_adam_states(params, lr=cfg.lr)
    rng = CounterRng(derive_seed(seed, 0x0FF1))
    memo: dict[int, tuple] = {}
    traces: list[dict] = []

    def probe() -> float:
        return psnr(clean, inference(video, net, varmap, cfg.infer_spec))

    if cfg.probe_every and clean is not None:
        traces.append({"update": 0, "loss": "", "psnr": probe()})

    update = 0
    empty_streak = 0
    while update < cfg.total_updates:
        ts = [valid[rng.randint(0, len(valid))] for _ in range(cfg.batch_frames)]
        usable = []
        aux = {}
        for u in ts:
            if u not in memo:
                fl, mask, tau = _flow_and_mask(video, u, flow_params, mask_cfg)
                memo[u] = (fl, mask, tau)
            fl, mask, _ = memo[u]
            if mask.sum() > 0:
                usable.append(u)
                aux[u] = (fl, mask)
        if not usable:
            # all sampled frames were mask-empty; resample rather than burn
            # an update on nothing
            empty_streak += 1
            if empty_streak > 25:
                raise EmptySupportError("every sampled frame has an empty alignment mask; nothing to train on")
            traces.append({"update": update + 1, "loss": "", "note": "resampled-empty"})
            continue
        empty_streak = 0

        for p in params:
            p.zero_grad()
        with ad.Tape() as tape:
            loss = _batch_loss(net, varmap, video, usable, aux, cfg.train_spec, cfg.train_varmap)
            tape.backward(loss)
        value = float(loss.data)
        _check_finite(value, f"offline update {update}")
        ad.adam_step(params, states)
        update += 1

        row = {"update": update, "loss": value}
        if isinstance(varmap, ScalarVariance):
            row["sigma"] = varmap.sigma_value
        if cfg.probe_every and clean is not None and (update % cfg.probe_every == 0 or update == cfg.total_updates):
            row["psnr"] = probe()
        traces.append(row)

    return net, traces


# ---------------------------------------------------------------------------
# stack study
# ---------------------------------------------------------------------------


def stack_study(
    video: np.ndarray,
    clean: np.ndarray,
    base_net: CascadeDenoiser,
    varmap_sigma: float,
    specs: list[tuple[str, StackSpec]],
    cfg: OnlineConfig,
    flow_params: TvL1Params | None = None,
    mask_cfg: MaskConfig | None = None,
    skip_first: int = 10,
) -> list[dict]:
    """Average-PSNR comparison of training-stack layouts.

    Each entry fine-tunes a fresh copy of ``base_net`` online with its spec
    and scores the denoised output against the clean reference, excluding
    the first ``skip_first`` frames (adaptation warm-up).
    """
    results = []
    for name, spec in specs:
        net = base_net.copy()
        varmap = ScalarVariance(varmap_sigma, trainable=False)
        run_cfg = replace(cfg, train_spec=spec)
        denoised, _ = online_finetune(video, net, varmap, run_cfg, flow_params, mask_cfg, clean=clean)
        results.append(
            {
                "name": name,
                "spec": spec.describe(),
                "avg_psnr": psnr(clean, denoised, skip_first=skip_first),
            }
        )
    return results
