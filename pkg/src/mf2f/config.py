"""Declarative experiment documents.

A run is described by one JSON file; every section maps onto one module's
config dataclass.  Validation is strict — unknown keys are rejected with
their dotted path — so a typo like "thresold_factor" fails loudly before
any computation starts instead of silently running with defaults.
"""

from __future__ import annotations

import json

from .denoiser import DenoiserConfig
from .engine import (
    DILATED_TRAIN_STACK,
    NATURAL_STACK,
    OfflineConfig,
    OnlineConfig,
    PretrainConfig,
    StackSpec,
)
from .errors import ConfigError, ContractError
from .flow import TvL1Params
from .noise import Awgn, BoxNoise, NoiseSchedule, ScaledPoisson, ScheduleEntry
from .variance import PerLevelVariance, ScalarVariance, SpatialVariance
from .warping import MaskConfig

MODES = ("pretrain", "online", "offline", "infer", "study")

_NUMBER = (int, float)
_OPT_INT = (int, type(None))

# schema nodes: dict -> nested section, tuple/type -> allowed leaf types,
# ["each", node] -> list with per-element node
SCHEMA = {
    "seed": int,
    "mode": str,
    "input": str,
    "clean": str,
    "output": str,
    "checkpoint": str,
    "save_checkpoint": str,
    "noise": {
        "schedule": [
            "each",
            {
                "first": int,
                "last": _OPT_INT,
                "model": {"kind": str, "sigma": _NUMBER, "p": _NUMBER, "size": int},
            },
        ],
    },
    "flow": {
        "lambda_data": _NUMBER,
        "theta": _NUMBER,
        "tau_dual": _NUMBER,
        "warps_per_level": int,
        "inner_iterations": int,
        "pyramid_levels": _OPT_INT,
        "pyramid_scale": _NUMBER,
        "stop_epsilon": _NUMBER,
        "min_size": int,
        "median_radius": int,
        "presmooth_sigma": _NUMBER,
    },
    "mask": {
        "sigma_g1": _NUMBER,
        "sigma_g2": _NUMBER,
        "threshold_factor": _NUMBER,
        "percentile": _NUMBER,
        "histogram_bins": int,
        "histogram_smoothing_sigma": _NUMBER,
    },
    "net": {
        "base_channels": int,
        "unet_depth": int,
        "channels_per_frame": int,
        "residual": bool,
    },
    "variance": {
        "kind": str,
        "sigma": _NUMBER,
        "levels": int,
        "tv_weight": _NUMBER,
        "trainable": bool,
    },
    "online": {
        "steps_per_update": int,
        "frames_per_minibatch": int,
        "lr": _NUMBER,
        "selector": str,
        "train_varmap": bool,
        "train_offsets": ["each", int],
        "target_offset": int,
        "allow_degenerate": bool,
    },
    "offline": {
        "total_updates": int,
        "batch_frames": int,
        "lr": _NUMBER,
        "selector": str,
        "train_varmap": bool,
        "probe_every": int,
        "train_offsets": ["each", int],
        "target_offset": int,
        "allow_degenerate": bool,
    },
    "pretrain": {
        "epochs": int,
        "lr": _NUMBER,
        "sigma_range": ["each", _NUMBER],
        "num_videos": int,
        "frames_per_video": int,
        "crop": int,
        "batch": int,
    },
}


def _type_ok(value, types) -> bool:
    allowed = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool):
        return bool in allowed
    if isinstance(value, int) and (int in allowed or float in allowed):
        return True
    return isinstance(value, tuple(t for t in allowed if t is not bool))


def _walk(doc, node, path: str):
    if isinstance(node, dict):
        if not isinstance(doc, dict):
            raise ConfigError(f"{path or 'config'} must be an object, got {type(doc).__name__}")
        for key, value in doc.items():
            sub = f"{path}.{key}" if path else key
            if key not in node:
                raise ConfigError(f"unknown config key: {sub}")
            _walk(value, node[key], sub)
        return
    if isinstance(node, list) and node and node[0] == "each":
        if not isinstance(doc, list):
            raise ConfigError(f"{path} must be a list, got {type(doc).__name__}")
        for i, item in enumerate(doc):
            _walk(item, node[1], f"{path}[{i}]")
        return
    if not _type_ok(doc, node):
        names = "/".join(t.__name__ for t in (node if isinstance(node, tuple) else (node,)))
        raise ConfigError(f"{path} must be {names}, got {type(doc).__name__} ({doc!r})")


def validate_config(doc: dict) -> dict:
    """Schema check; returns the document unchanged if it conforms."""
    _walk(doc, SCHEMA, "")
    mode = doc.get("mode")
    if mode is not None and mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    return doc


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_config(doc)


def _build(factory, section: dict, what: str):
    try:
        return factory(**section)
    except TypeError as e:
        raise ConfigError(f"bad {what} section: {e}") from e
    except (ValueError, ContractError) as e:
        raise ConfigError(f"bad {what} section: {e}") from e


def flow_params_from(doc: dict) -> TvL1Params:
    params = _build(TvL1Params, doc.get("flow", {}), "flow")
    try:
        return params.validate()
    except ValueError as e:
        raise ConfigError(f"bad flow section: {e}") from e


def mask_config_from(doc: dict) -> MaskConfig:
    cfg = _build(MaskConfig, doc.get("mask", {}), "mask")
    try:
        return cfg.validate()
    except ValueError as e:
        raise ConfigError(f"bad mask section: {e}") from e


def denoiser_config_from(doc: dict) -> DenoiserConfig:
    return _build(DenoiserConfig, doc.get("net", {}), "net").validate()


def noise_model_from(section: dict):
    kind = section.get("kind")
    try:
        if kind == "awgn":
            return Awgn(float(section["sigma"])).validate()
        if kind == "poisson":
            return ScaledPoisson(float(section["p"])).validate()
        if kind == "box":
            return BoxNoise(int(section["size"]), float(section["sigma"])).validate()
    except KeyError as e:
        raise ConfigError(f"noise model {kind!r} is missing field {e}") from e
    except ValueError as e:
        raise ConfigError(f"bad noise model: {e}") from e
    raise ConfigError(f"unknown noise model kind {kind!r} (awgn | poisson | box)")


def noise_schedule_from(doc: dict, num_frames: int) -> NoiseSchedule:
    section = doc.get("noise", {}).get("schedule")
    if not section:
        raise ConfigError("config has no noise.schedule")
    entries = []
    for item in section:
        last = item.get("last")
        if last is None:
            last = num_frames - 1
        entries.append(ScheduleEntry(int(item["first"]), int(last), noise_model_from(item["model"])))
    try:
        return NoiseSchedule(tuple(entries)).validate(num_frames)
    except Exception as e:
        raise ConfigError(f"bad noise schedule: {e}") from e


def _stack_spec_from(section: dict, default: StackSpec) -> StackSpec:
    offsets = section.pop("train_offsets", None)
    target = section.pop("target_offset", None)
    degenerate = section.pop("allow_degenerate", False)
    if offsets is None and target is None and not degenerate:
        return default
    spec = StackSpec(
        tuple(offsets) if offsets is not None else default.offsets,
        target if target is not None else default.target_offset,
        bool(degenerate),
    )
    try:
        return spec.validate()
    except ContractError as e:
        raise ConfigError(f"bad training stack: {e}") from e


def online_config_from(doc: dict) -> OnlineConfig:
    section = dict(doc.get("online", {}))
    spec = _stack_spec_from(section, DILATED_TRAIN_STACK)
    cfg = _build(lambda **kw: OnlineConfig(train_spec=spec, **kw), section, "online")
    try:
        return cfg.validate()
    except ContractError as e:
        raise ConfigError(f"bad online section: {e}") from e


def offline_config_from(doc: dict) -> OfflineConfig:
    section = dict(doc.get("offline", {}))
    spec = _stack_spec_from(section, DILATED_TRAIN_STACK)
    cfg = _build(lambda **kw: OfflineConfig(train_spec=spec, **kw), section, "offline")
    try:
        return cfg.validate()
    except ContractError as e:
        raise ConfigError(f"bad offline section: {e}") from e


def pretrain_config_from(doc: dict) -> PretrainConfig:
    section = dict(doc.get("pretrain", {}))
    if "sigma_range" in section:
        rng = section["sigma_range"]
        if len(rng) != 2:
            raise ConfigError(f"pretrain.sigma_range needs [lo, hi], got {rng}")
        section["sigma_range"] = (float(rng[0]), float(rng[1]))
    cfg = _build(PretrainConfig, section, "pretrain")
    try:
        return cfg.validate()
    except ContractError as e:
        raise ConfigError(f"bad pretrain section: {e}") from e


def variance_from(doc: dict, video):
    """Build the variance parameterization; per-level bin edges come from
    the intensity range of the supplied (noisy) video."""
    section = doc.get("variance", {"kind": "scalar", "sigma": 25.0})
    kind = section.get("kind", "scalar")
    sigma = float(section.get("sigma", 25.0))
    trainable = bool(section.get("trainable", True))
    try:
        if kind == "scalar":
            return ScalarVariance(sigma, trainable=trainable)
        if kind == "per_level":
            levels = int(section.get("levels", 8))
            return PerLevelVariance.from_video(video, levels, sigma, trainable=trainable)
        if kind == "spatial":
            shape = video.shape[-2:]
            tv_weight = float(section.get("tv_weight", 0.05))
            return SpatialVariance.constant(shape, sigma, tv_weight=tv_weight, trainable=trainable)
    except (ValueError, ContractError) as e:
        raise ConfigError(f"bad variance section: {e}") from e
    raise ConfigError(f"unknown variance kind {kind!r} (scalar | per_level | spatial)")
