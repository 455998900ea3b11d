"""The multi-frame denoising network: two cascaded U-net blocks.

Block 1 is applied (with shared weights) to the three overlapping triples of
a 5-frame stack, each concatenated with a per-pixel variance map; block 2
fuses the three intermediate estimates, again conditioned on the variance
map.  Both blocks predict a residual on top of their central input frame.
Each U-net halves resolution ``unet_depth`` times with stride-2
convolutions and comes back up with nearest-neighbor upsampling, additive
skip connections, and a final linear projection.

Every weight is a named ParamTensor tagged with one of the four groups
block{1,2}.{encoder,decoder}; ``select_params`` picks training subsets from
those tags so half-weight fine-tuning experiments are one selector away.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import imageops
from .errors import ConfigError, ContractError, DimensionError
from .rng import CounterRng

LEAK_SLOPE = 0.1

SELECTORS = ("all", "encoder", "decoder", "block1", "block2", "varmap_only")

_CKPT_MAGIC = b"MF2FCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    unet_depth: int = 2
    channels_per_frame: int = 1
    residual: bool = True
    input_frames_per_block: int = 3  # fixed by the cascade wiring

    def validate(self) -> "DenoiserConfig":
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.unet_depth < 1:
            raise ConfigError(f"unet_depth must be >= 1, got {self.unet_depth}")
        if self.channels_per_frame not in (1, 3):
            raise ConfigError(f"channels_per_frame must be 1 or 3, got {self.channels_per_frame}")
        if self.input_frames_per_block != 3:
            raise ConfigError("the cascade is wired for 3 input frames per block")
        return self

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "unet_depth": self.unet_depth,
            "channels_per_frame": self.channels_per_frame,
            "residual": self.residual,
        }


@dataclass
class FrameStackInput:
    """Five co-shaped (C, H, W) frames ordered by temporal offset."""

    frames: list[np.ndarray]
    offsets: tuple[int, ...]

    def __post_init__(self):
        if len(self.frames) != 5 or len(self.offsets) != 5:
            raise ContractError(f"a frame stack holds exactly 5 frames, got {len(self.frames)}")
        if any(self.offsets[i] >= self.offsets[i + 1] for i in range(4)):
            raise ContractError(f"stack offsets must be strictly increasing, got {self.offsets}")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise DimensionError(f"stack frame {i} has shape {f.shape}, expected {shape}")

    @property
    def central(self) -> np.ndarray:
        return self.frames[2]


def _he_uniform(rng: CounterRng, shape: tuple, fan_in: int) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + LEAK_SLOPE**2))
    bound = np.sqrt(3.0) * gain / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


class _UnetBlock:
    """Parameter bundle for one U-net; owns no activations, just weights."""

    def __init__(self, prefix: str, in_channels: int, cfg: DenoiserConfig, rng: CounterRng):
        self.prefix = prefix
        self.cfg = cfg
        self.convs: dict[str, tuple[ad.ParamTensor, ad.ParamTensor]] = {}
        c = cfg.base_channels

        def make(name: str, group: str, co: int, ci: int):
            w = ad.ParamTensor(_he_uniform(rng, (co, ci, 3, 3), ci * 9), f"{prefix}.{group}.{name}.weight", f"{prefix}.{group}")
            b = ad.ParamTensor(np.zeros(co), f"{prefix}.{group}.{name}.bias", f"{prefix}.{group}")
            self.convs[name] = (w, b)

        make("in", "encoder", c, in_channels)
        make("enc0", "encoder", c, c)
        for lvl in range(1, cfg.unet_depth + 1):
            make(f"down{lvl}", "encoder", c * 2**lvl, c * 2 ** (lvl - 1))
            make(f"conv{lvl}", "encoder", c * 2**lvl, c * 2**lvl)
        for lvl in range(cfg.unet_depth, 0, -1):
            make(f"up{lvl}", "decoder", c * 2 ** (lvl - 1), c * 2**lvl)
            make(f"post{lvl}", "decoder", c * 2 ** (lvl - 1), c * 2 ** (lvl - 1))
        make("out", "decoder", cfg.channels_per_frame, c)
        # zero output projection: with the residual connection each block
        # starts as the identity map, which cuts the warm-up cost a lot
        self.convs["out"][0].data[...] = 0.0

    def params(self) -> list[ad.ParamTensor]:
        out = []
        for w, b in self.convs.values():
            out.extend((w, b))
        return out

    def _conv(self, x, name: str, stride: int = 1):
        w, b = self.convs[name]
        return ad.conv2d(x, w, b, stride=stride, padding="reflect")

    def apply(self, x, residual_base):
        """Run the block on (N, in_ch, Hp, Wp); Hp, Wp divisible by 2^depth."""
        h = ad.leaky_relu(self._conv(x, "in"), LEAK_SLOPE)
        h = ad.leaky_relu(self._conv(h, "enc0"), LEAK_SLOPE)
        skips = [h]
        for lvl in range(1, self.cfg.unet_depth + 1):
            h = ad.leaky_relu(self._conv(h, f"down{lvl}", stride=2), LEAK_SLOPE)
            h = ad.leaky_relu(self._conv(h, f"conv{lvl}"), LEAK_SLOPE)
            skips.append(h)
        h = skips[-1]
        for lvl in range(self.cfg.unet_depth, 0, -1):
            h = ad.resample(h, "up2", "nearest")
            h = ad.leaky_relu(self._conv(h, f"up{lvl}"), LEAK_SLOPE)
            h = ad.add(h, skips[lvl - 1])
            h = ad.leaky_relu(self._conv(h, f"post{lvl}"), LEAK_SLOPE)
        out = self._conv(h, "out")
        if self.cfg.residual and residual_base is not None:
            out = ad.add(out, residual_base)
        return out


class CascadeDenoiser:
    """The full two-block cascade over a 5-frame stack."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = CounterRng(seed).derive(101)
        in_ch = 3 * cfg.channels_per_frame + 1
        self.block1 = _UnetBlock("block1", in_ch, cfg, rng.derive(1))
        self.block2 = _UnetBlock("block2", in_ch, cfg, rng.derive(2))
        self._check_groups()

    def _check_groups(self):
        seen = {}
        for p in self.params():
            if p.name in seen:
                raise ContractError(f"duplicate parameter name {p.name}")
            if p.group not in ("block1.encoder", "block1.decoder", "block2.encoder", "block2.decoder"):
                raise ContractError(f"parameter {p.name} has unknown group {p.group}")
            seen[p.name] = p.group

    def params(self) -> list[ad.ParamTensor]:
        return self.block1.params() + self.block2.params()

    def select_params(self, selector: str, varmap=None) -> list[ad.ParamTensor]:
        """Trainable subset by group tag.

        encoder/decoder span both blocks; varmap_only freezes every network
        weight.  Passing a varmap adds its parameters for any selector.
        """
        if selector not in SELECTORS:
            raise ConfigError(f"unknown selector {selector!r}; valid: {', '.join(SELECTORS)}")
        if selector == "varmap_only":
            if varmap is None:
                raise ConfigError("varmap_only selector requires a variance map")
            return list(varmap.trainable())
        if selector == "all":
            chosen = self.params()
        elif selector in ("encoder", "decoder"):
            chosen = [p for p in self.params() if p.group.endswith("." + selector)]
        else:  # block1 | block2
            chosen = [p for p in self.params() if p.group.startswith(selector + ".")]
        if varmap is not None:
            chosen = chosen + list(varmap.trainable())
        return chosen

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, stack: FrameStackInput, varmap) -> ad.Tensor:
        """Denoise the stack's central frame; returns a (C, H, W) Tensor.

        Differentiable w.r.t. the network weights and the variance-map
        parameters; the stack frames are constants.
        """
        cpf = self.cfg.channels_per_frame
        frames = stack.frames
        c, h, w = frames[0].shape
        if c != cpf:
            raise DimensionError(f"stack frames have {c} channels, config expects {cpf}")

        mult = 2**self.cfg.unet_depth
        pad_b = (-h) % mult
        pad_r = (-w) % mult
        # the net works on [0, 1] intensities; the conditioning channel is the
        # per-pixel noise sigma scaled so realistic levels span roughly [0, 1]
        # rather than hugging zero (a small net ignores a faint channel)
        padded = [imageops.pad_reflect(f, 0, pad_b, 0, pad_r)[None] * (1.0 / 255.0) for f in frames]

        vm = varmap.expand(stack.central)  # per-pixel variance, (H, W) tensor
        if vm.shape != (h, w):
            raise DimensionError(f"variance map shape {vm.shape} does not match frame ({h}, {w})")
        sigma_map = ad.mul(ad.sqrt(vm), 1.0 / 64.0)
        vm4 = ad.reshape(ad.pad2d(sigma_map, (0, pad_b, 0, pad_r), "reflect"), (1, 1, h + pad_b, w + pad_r))

        # Block 1 runs the three overlapping triples as one batch of 3.
        triples = [
            ad.concat([padded[i], padded[i + 1], padded[i + 2], vm4], axis=1) for i in range(3)
        ]
        x1 = ad.concat(triples, axis=0)
        centers = np.concatenate([padded[1], padded[2], padded[3]], axis=0)
        mids = self.block1.apply(x1, centers)

        x2 = ad.concat([ad.reshape(mids, (1, 3 * cpf) + mids.shape[-2:]), vm4], axis=1)
        base2 = ad.narrow(mids, 0, 1, 1)
        out = self.block2.apply(x2, base2)

        out = ad.crop2d(out, 0, 0, h, w)
        return ad.mul(ad.reshape(out, (cpf, h, w)), 255.0)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.params():
            digest.update(p.name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def copy(self) -> "CascadeDenoiser":
        clone = CascadeDenoiser(self.cfg, seed=0)
        for mine, theirs in zip(self.params(), clone.params()):
            theirs.data[...] = mine.data
        return clone


def save_checkpoint(path, net: CascadeDenoiser):
    """Versioned binary weight container: magic, config echo, named f64
    tensors with group tags."""
    cfg_blob = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    params = net.params()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            for blob in (p.name.encode(), p.group.encode()):
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}q", *p.data.shape))
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path, expect_cfg: DenoiserConfig | None = None) -> CascadeDenoiser:
    """Rebuild a CascadeDenoiser from a checkpoint.

    Raises ConfigError on bad magic/version, on a config echo that does not
    reconstruct, or (when expect_cfg is given) on a config mismatch.
    """
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a weight checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg_dict = json.loads(fh.read(cfg_len).decode())
        cfg = DenoiserConfig(
            base_channels=cfg_dict["base_channels"],
            unet_depth=cfg_dict["unet_depth"],
            channels_per_frame=cfg_dict["channels_per_frame"],
            residual=cfg_dict["residual"],
        )
        if expect_cfg is not None and cfg.to_dict() != expect_cfg.to_dict():
            raise ConfigError(f"{path}: checkpoint config {cfg.to_dict()} does not match expected {expect_cfg.to_dict()}")
        net = CascadeDenoiser(cfg, seed=0)
        by_name = {p.name: p for p in net.params()}
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(by_name):
            raise ConfigError(f"{path}: checkpoint holds {count} tensors, architecture has {len(by_name)}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (glen,) = struct.unpack("<I", fh.read(4))
            group = fh.read(glen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            data = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
            p = by_name.get(name)
            if p is None:
                raise ConfigError(f"{path}: unknown tensor {name} in checkpoint")
            if p.data.shape != data.shape or p.group != group:
                raise ConfigError(f"{path}: tensor {name} shape/group mismatch")
            p.data[...] = data
    return net
