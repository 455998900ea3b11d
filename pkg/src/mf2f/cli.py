"""Command-line surface.

Every subcommand reads an optional JSON experiment config (--config) whose
values individual flags override, runs one pipeline stage, and — whenever
it writes outputs — drops a manifest.json next to them with the tool
version, the effective config, and the seed, so any run can be reproduced
from its outputs alone.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import videoio
from .denoiser import CascadeDenoiser, load_checkpoint, save_checkpoint
from .engine import (
    DILATED_TRAIN_STACK,
    StackSpec,
    inference,
    offline_finetune,
    online_finetune,
    parallel_map,
    pretrain,
    stack_study,
)
from .errors import ConfigError, Mf2fError, NumericError
from .flow import tvl1_flow, write_flo
from .gradcheck import run_suite
from .metrics import psnr, ssim
from .noise import noisy_video
from .warping import alignment_mask

OFFLINE_TRACE_FIELDS = ["update", "loss", "sigma", "psnr", "note"]


def _load_doc(args) -> dict:
    doc = cfgmod.load_config(args.config) if args.config else {}
    for key in ("seed", "input", "clean", "output", "checkpoint", "save_checkpoint"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            doc[key] = value
    cfgmod.validate_config(doc)
    return doc


def _require(doc: dict, key: str):
    if key not in doc:
        raise ConfigError(f"missing required setting {key!r} (flag --{key.replace('_', '-')} or config)")
    return doc[key]


def _seed(doc: dict) -> int:
    return int(doc.get("seed", 0))


def _check_mode(doc: dict, expected: str):
    mode = doc.get("mode")
    if mode is not None and mode != expected:
        raise ConfigError(f"config says mode={mode!r} but the subcommand runs {expected!r}")


def _load_net(doc: dict, seed: int) -> CascadeDenoiser:
    if "checkpoint" in doc:
        return load_checkpoint(doc["checkpoint"], None)
    return CascadeDenoiser(cfgmod.denoiser_config_from(doc), seed)


def _write_video_outputs(outdir: Path, video: np.ndarray):
    outdir.mkdir(parents=True, exist_ok=True)
    videoio.write_raw(outdir / "video.raw", video)
    videoio.save_video(outdir / "frames", np.clip(video, 0.0, 255.0), bit_depth=16, fmt="png")


def _cmd_add_noise(args) -> int:
    doc = _load_doc(args)
    clean = videoio.load_video(_require(doc, "input"))
    if args.model is not None:
        model = {"kind": args.model}
        if args.sigma is not None:
            model["sigma"] = args.sigma
        if args.p is not None:
            model["p"] = args.p
        if args.size is not None:
            model["size"] = args.size
        doc.setdefault("noise", {})["schedule"] = [{"first": 0, "last": None, "model": model}]
        cfgmod.validate_config(doc)
    schedule = cfgmod.noise_schedule_from(doc, clean.shape[0])
    seed = _seed(doc)
    noisy = noisy_video(clean, schedule, seed)
    outdir = Path(_require(doc, "output"))
    _write_video_outputs(outdir, noisy)
    videoio.write_manifest(outdir, "add-noise", doc, seed, {"schedule": schedule.describe()})
    print(f"wrote {noisy.shape[0]} noisy frames to {outdir}")
    return 0


def _cmd_pretrain(args) -> int:
    doc = _load_doc(args)
    _check_mode(doc, "pretrain")
    seed = _seed(doc)
    ckpt_path = Path(doc.get("save_checkpoint") or _require(doc, "output"))
    net = CascadeDenoiser(cfgmod.denoiser_config_from(doc), seed)
    net, report = pretrain(net, cfgmod.pretrain_config_from(doc), seed)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, net)
    videoio.write_manifest(ckpt_path.parent, "pretrain", doc, seed, {"report": report})
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_flow(args) -> int:
    doc = _load_doc(args)
    video = videoio.load_video(_require(doc, "input"))
    params = cfgmod.flow_params_from(doc)
    outdir = Path(_require(doc, "output"))
    outdir.mkdir(parents=True, exist_ok=True)
    pairs = list(range(1, video.shape[0]))
    flows = parallel_map(lambda t: tvl1_flow(video[t - 1], video[t], params), pairs)
    for t, fl in zip(pairs, flows):
        write_flo(outdir / f"{t:04d}.flo", fl)
    videoio.write_manifest(outdir, "flow", doc, _seed(doc), {"pairs": len(pairs)})
    print(f"wrote {len(pairs)} flow fields to {outdir}")
    return 0


def _cmd_mask(args) -> int:
    doc = _load_doc(args)
    video = videoio.load_video(_require(doc, "input"))
    params = cfgmod.flow_params_from(doc)
    mask_cfg = cfgmod.mask_config_from(doc)
    outdir = Path(_require(doc, "output"))
    outdir.mkdir(parents=True, exist_ok=True)

    def one(t):
        fl = tvl1_flow(video[t - 1], video[t], params)
        return alignment_mask(video[t - 1], video[t], fl, mask_cfg)

    pairs = list(range(1, video.shape[0]))
    rows = []
    for t, (mask, tau) in zip(pairs, parallel_map(one, pairs)):
        videoio.write_mask_pgm(outdir / f"{t:04d}.pgm", mask)
        rows.append({"t": t, "tau": tau, "masked_fraction": 1.0 - float(mask.mean())})
    videoio.write_trace_csv(outdir / "masks.csv", rows, fields=["t", "tau", "masked_fraction"])
    videoio.write_manifest(outdir, "mask", doc, _seed(doc), {"pairs": len(pairs)})
    print(f"wrote {len(pairs)} masks to {outdir}")
    return 0


def _finish_denoise(doc, outdir: Path, command: str, denoised, rows, fields, net, clean) -> int:
    _write_video_outputs(outdir, denoised)
    videoio.write_trace_csv(outdir / "trace.csv", rows, fields=fields)
    if doc.get("save_checkpoint"):
        save_checkpoint(doc["save_checkpoint"], net)
    extra = {}
    if clean is not None:
        extra["psnr"] = psnr(clean, denoised)
        extra["ssim"] = ssim(clean, denoised)
    videoio.write_manifest(outdir, command, doc, _seed(doc), extra)
    if clean is not None:
        print(f"average psnr {extra['psnr']:.2f} dB, ssim {extra['ssim']:.4f}")
    print(f"denoised video in {outdir}")
    return 0


def _cmd_denoise_online(args) -> int:
    doc = _load_doc(args)
    _check_mode(doc, "online")
    seed = _seed(doc)
    video = videoio.load_video(_require(doc, "input"))
    clean = videoio.load_video(doc["clean"]) if doc.get("clean") else None
    net = _load_net(doc, seed)
    varmap = cfgmod.variance_from(doc, video)
    cfg = cfgmod.online_config_from(doc)
    denoised, rows = online_finetune(
        video, net, varmap, cfg, cfgmod.flow_params_from(doc), cfgmod.mask_config_from(doc), clean=clean
    )
    return _finish_denoise(doc, Path(_require(doc, "output")), "denoise-online", denoised, rows, None, net, clean)


def _cmd_denoise_offline(args) -> int:
    doc = _load_doc(args)
    _check_mode(doc, "offline")
    seed = _seed(doc)
    video = videoio.load_video(_require(doc, "input"))
    clean = videoio.load_video(doc["clean"]) if doc.get("clean") else None
    net = _load_net(doc, seed)
    varmap = cfgmod.variance_from(doc, video)
    cfg = cfgmod.offline_config_from(doc)
    net, rows = offline_finetune(
        video, net, varmap, cfg, cfgmod.flow_params_from(doc), cfgmod.mask_config_from(doc), seed=seed, clean=clean
    )
    denoised = inference(video, net, varmap, cfg.infer_spec)
    return _finish_denoise(
        doc, Path(_require(doc, "output")), "denoise-offline", denoised, rows, OFFLINE_TRACE_FIELDS, net, clean
    )


def _cmd_infer(args) -> int:
    doc = _load_doc(args)
    _check_mode(doc, "infer")
    video = videoio.load_video(_require(doc, "input"))
    net = _load_net(doc, _seed(doc))
    varmap = cfgmod.variance_from(doc, video)
    denoised = inference(video, net, varmap)
    outdir = Path(_require(doc, "output"))
    _write_video_outputs(outdir, denoised)
    extra = {}
    if doc.get("clean"):
        clean = videoio.load_video(doc["clean"])
        extra = {"psnr": psnr(clean, denoised), "ssim": ssim(clean, denoised)}
        print(f"average psnr {extra['psnr']:.2f} dB, ssim {extra['ssim']:.4f}")
    videoio.write_manifest(outdir, "infer", doc, _seed(doc), extra)
    print(f"denoised video in {outdir}")
    return 0


def _cmd_stack_study(args) -> int:
    doc = _load_doc(args)
    _check_mode(doc, "study")
    seed = _seed(doc)
    video = videoio.load_video(_require(doc, "input"))
    clean = videoio.load_video(_require(doc, "clean"))
    net = _load_net(doc, seed)
    sigma = float(doc.get("variance", {}).get("sigma", 25.0))
    specs = [
        ("degenerate", StackSpec((-2, -1, 0, 1, 2), target_offset=-1, allow_degenerate=True)),
        ("dilated", DILATED_TRAIN_STACK),
    ]
    results = stack_study(
        video,
        clean,
        net,
        sigma,
        specs,
        cfgmod.online_config_from(doc),
        cfgmod.flow_params_from(doc),
        cfgmod.mask_config_from(doc),
        skip_first=args.skip_first,
    )
    outdir = Path(_require(doc, "output"))
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "study.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    videoio.write_manifest(outdir, "stack-study", doc, seed, {"results": results})
    for r in results:
        print(f"{r['name']:<12s} avg psnr {r['avg_psnr']:.2f} dB")
    return 0


def _cmd_metrics(args) -> int:
    ref = videoio.load_video(args.ref)
    test = videoio.load_video(args.test)
    p = psnr(ref, test, skip_first=args.skip_first)
    s = ssim(ref, test, skip_first=args.skip_first)
    print(f"psnr {p:.4f} dB")
    print(f"ssim {s:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_suite(seed=args.seed if args.seed is not None else 0)
    for r in report["results"]:
        print(r.line)
    print(f"max rel. error {report['max_rel_error']:.3e}")
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mf2f",
        description="Blind video denoising via self-supervised multi-frame fine-tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="RNG seed (overrides config)")
        p.add_argument("--input", help="input video (frame directory or .raw)")
        p.add_argument("--clean", help="clean reference video for PSNR traces")
        if output:
            p.add_argument("--output", help="output directory")
        p.add_argument("--checkpoint", help="initial weights")
        p.add_argument("--save-checkpoint", dest="save_checkpoint", help="where to store final weights")

    p = sub.add_parser("add-noise", help="apply a noise schedule to a clean video")
    common(p)
    p.add_argument("--model", choices=["awgn", "poisson", "box"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--p", type=float, help="scaled-Poisson intensity scale")
    p.add_argument("--size", type=int, help="box filter side")
    p.set_defaults(handler=_cmd_add_noise)

    p = sub.add_parser("pretrain", help="supervised warm-up on procedural textures")
    common(p)
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("flow", help="optical flow for every consecutive pair")
    common(p)
    p.set_defaults(handler=_cmd_flow)

    p = sub.add_parser("mask", help="alignment masks for every consecutive pair")
    common(p)
    p.set_defaults(handler=_cmd_mask)

    p = sub.add_parser("denoise-online", help="sequential self-supervised adaptation")
    common(p)
    p.set_defaults(handler=_cmd_denoise_online)

    p = sub.add_parser("denoise-offline", help="fixed-budget fine-tuning, then inference")
    common(p)
    p.set_defaults(handler=_cmd_denoise_offline)

    p = sub.add_parser("infer", help="denoise with frozen weights")
    common(p)
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("stack-study", help="compare training stack layouts")
    common(p)
    p.add_argument("--skip-first", type=int, default=10)
    p.set_defaults(handler=_cmd_stack_study)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two videos")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--skip-first", type=int, default=0)
    p.set_defaults(handler=_cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.handler(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except Mf2fError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
