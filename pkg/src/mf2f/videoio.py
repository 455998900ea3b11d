"""Frame and video I/O.

On disk a video is either a directory of zero-padded numbered frames
(0001.png ...) in 8/16-bit PNG, PGM or PPM, or a single raw planar float32
container (little-endian header magic/T/H/W/C, then per-frame channel
planes).  In memory a video is always a (T, C, H, W) float64 array on the
0-255 scale; 16-bit samples map via value = q / 257 so both depths share
the same numeric range.

Integer export clips to [0, 255]; the raw container stores float32 verbatim
(no clipping), which is the lossless interchange path for spec-scale data.
"""

from __future__ import annotations

import csv
import json
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError

RAW_MAGIC = b"MF2FRAW1"

_FRAME_RE = re.compile(r"^(\d+)\.(png|pgm|ppm)$", re.IGNORECASE)


def _to_uint(frame: np.ndarray, bit_depth: int) -> np.ndarray:
    clipped = np.clip(frame, 0.0, 255.0)
    if bit_depth == 8:
        return np.rint(clipped).astype(np.uint8)
    if bit_depth == 16:
        return np.rint(clipped * 257.0).astype(np.uint16)
    raise ConfigError(f"bit_depth must be 8 or 16, got {bit_depth}")


def _from_uint(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 257.0
    raise ConfigError(f"unsupported sample dtype {arr.dtype}")


def write_frame(path, frame: np.ndarray, bit_depth: int = 8):
    """Write one (C, H, W) frame; format chosen by extension."""
    path = Path(path)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise DimensionError(f"frame must be (1|3, H, W), got {frame.shape}")
    data = _to_uint(frame, bit_depth)
    ext = path.suffix.lower()
    if ext == ".png":
        if bit_depth == 16 and frame.shape[0] == 3:
            raise ConfigError("16-bit color PNG is not supported; use .ppm")
        img = data[0] if frame.shape[0] == 1 else np.moveaxis(data, 0, -1)
        Image.fromarray(img).save(path)
    elif ext in (".pgm", ".ppm"):
        _write_netpbm(path, data, ext)
    else:
        raise ConfigError(f"unsupported frame extension {ext!r} (use .png/.pgm/.ppm)")


def _write_netpbm(path: Path, data: np.ndarray, ext: str):
    channels = data.shape[0]
    if ext == ".pgm" and channels != 1:
        raise ConfigError("PGM holds a single channel; use .ppm for color")
    if ext == ".ppm" and channels != 3:
        raise ConfigError("PPM holds three channels; use .pgm for grayscale")
    maxval = 255 if data.dtype == np.uint8 else 65535
    header = f"{'P5' if ext == '.pgm' else 'P6'}\n{data.shape[2]} {data.shape[1]}\n{maxval}\n"
    interleaved = data[0] if channels == 1 else np.moveaxis(data, 0, -1)
    # netpbm 16-bit samples are big-endian
    payload = interleaved.astype(">u2" if maxval == 65535 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _read_netpbm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        match = re.match(rb"\s*(?:#[^\n]*\n\s*)*(\S+)", blob[pos:])
        if not match:
            raise ConfigError(f"{path}: truncated netpbm header")
        fields.append(match.group(1))
        pos += match.end()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6"):
        raise ConfigError(f"{path}: unsupported netpbm magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    data = np.frombuffer(blob[pos + 1 :], dtype=dtype, count=h * w * channels)
    arr = data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    return arr


def read_frame(path) -> np.ndarray:
    """Read one frame as (C, H, W) float64 on the 0-255 scale."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".png":
        arr = np.array(Image.open(path))
    elif ext in (".pgm", ".ppm"):
        arr = _read_netpbm(path)
    else:
        raise ConfigError(f"unsupported frame extension {ext!r}")
    values = _from_uint(arr)
    if values.ndim == 2:
        return values[None]
    return np.moveaxis(values, -1, 0)


def save_video(directory, video: np.ndarray, bit_depth: int = 8, fmt: str = "png", start_index: int = 1):
    """Write a (T, C, H, W) video as zero-padded numbered frames."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise DimensionError(f"video must be (T, C, H, W), got {video.shape}")
    for i, frame in enumerate(video):
        write_frame(directory / f"{start_index + i:04d}.{fmt}", frame, bit_depth=bit_depth)


def load_frames_dir(directory) -> np.ndarray:
    directory = Path(directory)
    entries = []
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    if not entries:
        raise ConfigError(f"{directory}: no numbered frames found")
    entries.sort()
    numbers = [n for n, _ in entries]
    if numbers != list(range(numbers[0], numbers[0] + len(numbers))):
        raise ConfigError(f"{directory}: frame numbering is not contiguous ({numbers[0]}..{numbers[-1]}, {len(numbers)} files)")
    frames = [read_frame(p) for _, p in entries]
    shape = frames[0].shape
    for n, f in zip(numbers, frames):
        if f.shape != shape:
            raise DimensionError(f"frame {n} has shape {f.shape}, expected {shape}")
    return np.stack(frames)


def write_raw(path, video: np.ndarray):
    """Raw planar float32 container; lossless for float32-representable data."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise DimensionError(f"video must be (T, C, H, W), got {video.shape}")
    t, c, h, w = video.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<iiii", t, h, w, c))
        fh.write(video.transpose(0, 1, 2, 3).astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(RAW_MAGIC)) != RAW_MAGIC:
            raise ConfigError(f"{path}: not a raw video container")
        t, h, w, c = struct.unpack("<iiii", fh.read(16))
        data = np.frombuffer(fh.read(t * c * h * w * 4), dtype="<f4")
        if data.size != t * c * h * w:
            raise ConfigError(f"{path}: truncated raw container")
    return data.reshape(t, c, h, w).astype(np.float64)


def load_video(path) -> np.ndarray:
    """Directory of frames or a raw container file -> (T, C, H, W)."""
    path = Path(path)
    if path.is_dir():
        return load_frames_dir(path)
    if path.is_file():
        return read_raw(path)
    raise ConfigError(f"{path}: no such file or directory")


def write_mask_pgm(path, mask: np.ndarray):
    """Binary mask as 8-bit PGM: kept pixels 255, masked pixels 0."""
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    _write_netpbm(Path(path), data[None], ".pgm")


def write_trace_csv(path, rows: list[dict], fields: list[str] | None = None):
    """Fine-tuning trace; default columns fit the per-frame online rows,
    callers with other row shapes (offline per-update traces) pass fields."""
    if fields is None:
        fields = ["t", "loss", "tau", "masked_fraction", "psnr", "wall_ms", "note"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def write_manifest(directory, command: str, config_echo: dict, seed: int, extra: dict | None = None):
    """Reproducibility record written next to every CLI output."""
    from . import __version__

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "tool": "mf2f",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config_echo,
    }
    if extra:
        payload.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
