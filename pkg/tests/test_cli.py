"""End-to-end CLI tests.

Each test drives ``mf2f.cli.main`` in-process with a tiny video so the whole
surface (argument parsing, config merge, outputs, manifest) is exercised in
seconds.  Heavy paths (pretraining, long fine-tunes) get smoke coverage with
one-step budgets only.
"""

import json

import numpy as np
import pytest

from mf2f.cli import main
from mf2f.denoiser import load_checkpoint
from mf2f.flow import read_flo
from mf2f.metrics import psnr
from mf2f.noise import Awgn, NoiseSchedule, noisy_video
from mf2f.rng import derive_seed
from mf2f.textures import translating_video
from mf2f.videoio import load_video, read_frame, write_raw


@pytest.fixture(scope="module")
def clean_video() -> np.ndarray:
    return translating_video(derive_seed(90, 1), 6, 24, 24)


@pytest.fixture()
def clean_raw(tmp_path, clean_video):
    path = tmp_path / "clean.raw"
    write_raw(path, clean_video)
    return path


@pytest.fixture()
def noisy_raw(tmp_path, clean_video):
    noisy = noisy_video(clean_video, NoiseSchedule.constant(Awgn(15.0), 6), 91)
    path = tmp_path / "noisy.raw"
    write_raw(path, noisy)
    return path


class TestAddNoise:
    def test_writes_video_and_manifest(self, tmp_path, clean_raw, clean_video):
        out = tmp_path / "out"
        code = main(["add-noise", "--input", str(clean_raw), "--output", str(out),
                     "--model", "awgn", "--sigma", "20", "--seed", "3"])
        assert code == 0
        noisy = load_video(out / "video.raw")
        assert noisy.shape == clean_video.shape
        assert not np.array_equal(noisy, clean_video)
        assert (out / "frames" / "0001.png").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "add-noise"
        assert manifest["seed"] == 3
        assert manifest["schedule"][0]["model"] == "awgn"
        assert manifest["schedule"][0]["sigma"] == pytest.approx(20.0)

    def test_matches_library_call_and_is_deterministic(self, tmp_path, clean_raw, clean_video):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["add-noise", "--input", str(clean_raw), "--output", str(out),
                         "--model", "awgn", "--sigma", "20", "--seed", "3"]) == 0
            outs.append(load_video(out / "video.raw"))
        direct = noisy_video(clean_video, NoiseSchedule.constant(Awgn(20.0), 6), 3)
        assert np.array_equal(outs[0], outs[1])
        assert np.max(np.abs(outs[0] - direct)) < 5e-5  # float32 container rounding only

    def test_schedule_from_config_file(self, tmp_path, clean_raw):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "noise": {"schedule": [
                {"first": 0, "last": 2, "model": {"kind": "poisson", "p": 8}},
                {"first": 3, "last": None, "model": {"kind": "box", "size": 3, "sigma": 40}},
            ]},
        }))
        out = tmp_path / "out"
        assert main(["add-noise", "--config", str(cfg), "--input", str(clean_raw),
                     "--output", str(out), "--seed", "1"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert [e["model"] for e in manifest["schedule"]] == ["poisson", "box"]
        assert [e["to"] for e in manifest["schedule"]] == [2, 5]

    def test_missing_input_is_usage_error(self, tmp_path, capsys):
        code = main(["add-noise", "--output", str(tmp_path / "out"), "--model", "awgn", "--sigma", "5"])
        assert code == 2
        assert "input" in capsys.readouterr().err

    def test_missing_schedule_is_usage_error(self, tmp_path, clean_raw):
        assert main(["add-noise", "--input", str(clean_raw), "--output", str(tmp_path / "o")]) == 2


class TestFlowAndMask:
    def test_flow_writes_flo_per_pair(self, tmp_path, noisy_raw):
        out = tmp_path / "flows"
        assert main(["flow", "--input", str(noisy_raw), "--output", str(out)]) == 0
        flos = sorted(p.name for p in out.glob("*.flo"))
        assert flos == [f"{t:04d}.flo" for t in range(1, 6)]
        assert read_flo(out / "0001.flo").shape == (24, 24, 2)

    def test_mask_writes_pgm_and_csv(self, tmp_path, noisy_raw):
        out = tmp_path / "masks"
        assert main(["mask", "--input", str(noisy_raw), "--output", str(out)]) == 0
        mask = read_frame(out / "0001.pgm")[0]
        assert set(np.unique(mask)) <= {0.0, 255.0}
        lines = (out / "masks.csv").read_text().strip().splitlines()
        assert lines[0] == "t,tau,masked_fraction"
        assert len(lines) == 6


class TestInferAndMetrics:
    def test_fresh_net_is_identity_and_scores_are_reported(self, tmp_path, noisy_raw, clean_raw, capsys):
        out = tmp_path / "out"
        code = main(["infer", "--input", str(noisy_raw), "--clean", str(clean_raw),
                     "--output", str(out)])
        assert code == 0
        captured = capsys.readouterr().out
        assert "average psnr" in captured
        denoised = load_video(out / "video.raw")
        noisy = load_video(noisy_raw)
        # an untrained cascade starts as the identity on the central frame
        assert np.max(np.abs(denoised - np.clip(noisy, 0.0, 255.0))) < 1e-5
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["psnr"] == pytest.approx(psnr(load_video(clean_raw), denoised), rel=1e-6)
        assert 0.0 < manifest["ssim"] <= 1.0

    def test_metrics_reports_psnr_and_ssim(self, clean_raw, noisy_raw, capsys):
        assert main(["metrics", "--ref", str(clean_raw), "--test", str(noisy_raw)]) == 0
        captured = capsys.readouterr().out
        reported = float(captured.split("psnr")[1].split("dB")[0])
        expected = psnr(load_video(clean_raw), load_video(noisy_raw))
        assert reported == pytest.approx(expected, abs=5e-4)
        assert "ssim" in captured


class TestDenoiseCommands:
    def config(self, tmp_path, mode, **extra) -> str:
        doc = {
            "mode": mode,
            "net": {"base_channels": 4, "unet_depth": 1},
            "variance": {"kind": "scalar", "sigma": 15.0, "trainable": False},
            **extra,
        }
        path = tmp_path / f"{mode}.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_online_smoke(self, tmp_path, noisy_raw, clean_raw):
        cfg = self.config(tmp_path, "online", online={"steps_per_update": 1, "frames_per_minibatch": 4, "lr": 1e-4})
        out = tmp_path / "out"
        code = main(["denoise-online", "--config", cfg, "--input", str(noisy_raw),
                     "--clean", str(clean_raw), "--output", str(out), "--seed", "2"])
        assert code == 0
        assert load_video(out / "video.raw").shape == (6, 1, 24, 24)
        lines = (out / "trace.csv").read_text().strip().splitlines()
        assert lines[0].split(",")[:2] == ["t", "loss"]
        assert len(lines) == 7  # header + one row per frame

    def test_offline_smoke_saves_checkpoint_and_probes(self, tmp_path, noisy_raw, clean_raw):
        ckpt = tmp_path / "tuned.ckpt"
        cfg = self.config(
            tmp_path, "offline",
            offline={"total_updates": 2, "batch_frames": 2, "lr": 1e-4, "probe_every": 1},
        )
        out = tmp_path / "out"
        code = main(["denoise-offline", "--config", cfg, "--input", str(noisy_raw),
                     "--clean", str(clean_raw), "--output", str(out),
                     "--save-checkpoint", str(ckpt), "--seed", "2"])
        assert code == 0
        lines = (out / "trace.csv").read_text().strip().splitlines()
        assert lines[0] == "update,loss,sigma,psnr,note"
        assert len(lines) >= 3
        net = load_checkpoint(ckpt)
        assert net.cfg.base_channels == 4

    def test_mode_mismatch_is_usage_error(self, tmp_path, noisy_raw, capsys):
        cfg = self.config(tmp_path, "online", online={"steps_per_update": 1})
        code = main(["denoise-offline", "--config", cfg, "--input", str(noisy_raw),
                     "--output", str(tmp_path / "out")])
        assert code == 2
        assert "mode" in capsys.readouterr().err

    def test_stack_study_writes_comparison(self, tmp_path, noisy_raw, clean_raw):
        cfg = self.config(tmp_path, "study", online={"steps_per_update": 1, "frames_per_minibatch": 4, "lr": 1e-4})
        out = tmp_path / "study"
        code = main(["stack-study", "--config", cfg, "--input", str(noisy_raw),
                     "--clean", str(clean_raw), "--output", str(out), "--skip-first", "2"])
        assert code == 0
        results = json.loads((out / "study.json").read_text())
        assert [r["name"] for r in results] == ["degenerate", "dilated"]
        assert all(np.isfinite(r["avg_psnr"]) for r in results)


class TestParserBasics:
    def test_unknown_command_exits_with_usage_code(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag_exits_with_usage_code(self):
        assert main(["metrics", "--nope"]) == 2

    def test_flag_overrides_config_seed(self, tmp_path, clean_raw):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"seed": 11}))
        out = tmp_path / "out"
        assert main(["add-noise", "--config", str(cfg), "--input", str(clean_raw),
                     "--output", str(out), "--model", "awgn", "--sigma", "10", "--seed", "12"]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 12
