"""Fine-tuning engine tests.

Stack plumbing and config validation are checked exactly; the training
loops get fast smoke runs (tiny frames, one-step budgets) asserting trace
structure, determinism, and that optimization actually moves weights.
The accuracy-level behaviour of the loops is covered by the acceptance
suite, not here.
"""

import numpy as np
import pytest

from mf2f.denoiser import CascadeDenoiser, DenoiserConfig
from mf2f.engine import (
    DILATED_TRAIN_STACK,
    NATURAL_STACK,
    OfflineConfig,
    OnlineConfig,
    PretrainConfig,
    StackSpec,
    build_stack,
    inference,
    offline_finetune,
    online_finetune,
    parallel_map,
    pretrain,
    stack_study,
    valid_training_frames,
    worker_count,
)
from mf2f.errors import ContractError
from mf2f.noise import Awgn, NoiseSchedule, noisy_video
from mf2f.rng import derive_seed
from mf2f.textures import translating_video
from mf2f.variance import ScalarVariance

TOY = DenoiserConfig(base_channels=4, unet_depth=1)


def toy_net(seed: int = 0) -> CascadeDenoiser:
    return CascadeDenoiser(TOY, seed)


def tiny_scene(frames: int = 6, size: int = 16, sigma: float = 10.0, seed: int = 70):
    clean = translating_video(derive_seed(seed, 1), frames, size, size)
    noisy = noisy_video(clean, NoiseSchedule.constant(Awgn(sigma), frames), seed)
    return clean, noisy


def fast_online(**kw) -> OnlineConfig:
    base = dict(steps_per_update=1, frames_per_minibatch=3, lr=1e-4)
    base.update(kw)
    return OnlineConfig(**base)


class TestWorkers:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("MF2F_THREADS", "3")
        assert worker_count() == 3

    def test_env_override_clamps_to_one(self, monkeypatch):
        monkeypatch.setenv("MF2F_THREADS", "0")
        assert worker_count() == 1

    def test_garbage_env_falls_back_to_serial(self, monkeypatch):
        monkeypatch.setenv("MF2F_THREADS", "many")
        assert worker_count() == 1

    def test_default_is_bounded(self, monkeypatch):
        monkeypatch.delenv("MF2F_THREADS", raising=False)
        assert 1 <= worker_count() <= 4

    def test_parallel_map_preserves_order(self):
        items = list(range(17))
        assert parallel_map(lambda x: x * x, items) == [x * x for x in items]


class TestStackSpec:
    def test_constants_are_valid(self):
        NATURAL_STACK.validate()
        DILATED_TRAIN_STACK.validate()
        assert DILATED_TRAIN_STACK.offsets == (-4, -2, 0, 2, 4)
        assert DILATED_TRAIN_STACK.target_offset == -1
        assert DILATED_TRAIN_STACK.target_offset not in DILATED_TRAIN_STACK.offsets

    def test_needs_five_offsets(self):
        with pytest.raises(ContractError):
            StackSpec((-1, 0, 1)).validate()

    def test_offsets_strictly_increasing(self):
        with pytest.raises(ContractError):
            StackSpec((-2, -1, 0, 0, 2)).validate()

    def test_target_inside_window_needs_explicit_flag(self):
        with pytest.raises(ContractError, match="collapses"):
            StackSpec((-2, -1, 0, 1, 2), target_offset=-1).validate()
        StackSpec((-2, -1, 0, 1, 2), target_offset=-1, allow_degenerate=True).validate()

    def test_target_outside_window_is_fine(self):
        StackSpec((-4, -2, 0, 2, 4), target_offset=-1).validate()

    def test_describe(self):
        spec = StackSpec((-4, -2, 0, 2, 4), target_offset=-1)
        assert spec.describe() == {
            "offsets": [-4, -2, 0, 2, 4],
            "target_offset": -1,
            "allow_degenerate": False,
        }


class TestBuildStack:
    def test_interior_frame_uses_exact_offsets(self):
        video = np.arange(8, dtype=np.float64)[:, None, None, None] * np.ones((8, 1, 4, 4))
        stack = build_stack(video, 4, DILATED_TRAIN_STACK)
        assert [f[0, 0, 0] for f in stack.frames] == [0.0, 2.0, 4.0, 6.0, 7.0]
        assert stack.offsets == (-4, -2, 0, 2, 4)

    def test_boundaries_clamp_to_edge_frames(self):
        video = np.arange(6, dtype=np.float64)[:, None, None, None] * np.ones((6, 1, 4, 4))
        first = build_stack(video, 0, NATURAL_STACK)
        last = build_stack(video, 5, NATURAL_STACK)
        assert [f[0, 0, 0] for f in first.frames] == [0.0, 0.0, 0.0, 1.0, 2.0]
        assert [f[0, 0, 0] for f in last.frames] == [3.0, 4.0, 5.0, 5.0, 5.0]

    def test_frame_index_out_of_range(self):
        video = np.zeros((4, 1, 4, 4))
        with pytest.raises(ContractError):
            build_stack(video, 4, NATURAL_STACK)

    def test_valid_training_frames_excludes_clamped_targets(self):
        assert valid_training_frames(6, DILATED_TRAIN_STACK) == [1, 2, 3, 4, 5]
        future = StackSpec((-4, -2, 0, 2, 4), target_offset=1)
        assert valid_training_frames(6, future) == [0, 1, 2, 3, 4]

    def test_valid_training_frames_needs_target(self):
        with pytest.raises(ContractError):
            valid_training_frames(6, NATURAL_STACK)


class TestConfigValidation:
    def test_defaults_validate(self):
        OnlineConfig().validate()
        OfflineConfig().validate()
        PretrainConfig().validate()

    @pytest.mark.parametrize("kw", [
        {"steps_per_update": 0},
        {"frames_per_minibatch": 0},
        {"lr": 0.0},
        {"train_spec": NATURAL_STACK},  # no target offset
    ])
    def test_online_rejects(self, kw):
        with pytest.raises(ContractError):
            OnlineConfig(**kw).validate()

    @pytest.mark.parametrize("kw", [
        {"total_updates": -1},
        {"batch_frames": 0},
        {"lr": -1e-3},
        {"train_spec": NATURAL_STACK},
    ])
    def test_offline_rejects(self, kw):
        with pytest.raises(ContractError):
            OfflineConfig(**kw).validate()

    @pytest.mark.parametrize("kw", [
        {"sigma_range": (0.0, 10.0)},
        {"sigma_range": (30.0, 10.0)},
        {"epochs": -1},
        {"batch": 0},
    ])
    def test_pretrain_rejects(self, kw):
        with pytest.raises(ContractError):
            PretrainConfig(**kw).validate()


class TestInference:
    def test_fresh_net_is_clipped_identity(self):
        _, noisy = tiny_scene()
        noisy = noisy.copy()
        noisy[0, 0, 0, 0] = -30.0
        noisy[1, 0, 0, 0] = 290.0
        out = inference(noisy, toy_net(), ScalarVariance(10.0, trainable=False))
        assert np.max(np.abs(out - np.clip(noisy, 0.0, 255.0))) < 1e-9

    def test_serial_and_parallel_agree(self, monkeypatch):
        _, noisy = tiny_scene(seed=71)
        net = toy_net(3)
        varmap = ScalarVariance(10.0, trainable=False)
        monkeypatch.setenv("MF2F_THREADS", "1")
        serial = inference(noisy, net, varmap)
        monkeypatch.setenv("MF2F_THREADS", "4")
        parallel = inference(noisy, net, varmap)
        assert np.array_equal(serial, parallel)


class TestOnlineFinetune:
    def test_needs_five_frames(self):
        _, noisy = tiny_scene(frames=4)
        with pytest.raises(ContractError):
            online_finetune(noisy, toy_net(), ScalarVariance(10.0, trainable=False), fast_online())

    def test_trace_and_output_structure(self):
        clean, noisy = tiny_scene()
        net = toy_net(1)
        before = net.checksum()
        denoised, rows = online_finetune(
            noisy, net, ScalarVariance(10.0, trainable=False), fast_online(), clean=clean
        )
        assert denoised.shape == noisy.shape
        assert denoised.min() >= 0.0 and denoised.max() <= 255.0
        assert [r["t"] for r in rows] == list(range(6))
        assert rows[0]["note"] == "warmup" and rows[1]["note"] == "warmup"
        for r in rows[2:]:
            assert np.isfinite(r["loss"])
            assert 0.0 <= r["masked_fraction"] <= 1.0
            assert r["tau"] > 0.0
            assert r["sigma"] == pytest.approx(10.0)
        for r in rows:
            assert r["psnr"] == pytest.approx(
                float(10.0 * np.log10(255.0**2 / np.mean((clean[r["t"]] - denoised[r["t"]]) ** 2)))
            )
        assert net.checksum() != before  # optimization moved the weights

    def test_without_clean_reference_psnr_column_is_blank(self):
        _, noisy = tiny_scene(seed=72)
        _, rows = online_finetune(noisy, toy_net(), ScalarVariance(10.0, trainable=False), fast_online())
        assert all(r["psnr"] == "" for r in rows)

    def test_bitwise_deterministic(self):
        _, noisy = tiny_scene(seed=73)
        varmap = ScalarVariance(10.0, trainable=False)
        runs = [
            online_finetune(noisy, toy_net(9), ScalarVariance(10.0, trainable=False), fast_online())[0]
            for _ in range(2)
        ]
        assert np.array_equal(runs[0], runs[1])
        del varmap


class TestOfflineFinetune:
    def test_trace_probes_and_weight_motion(self):
        clean, noisy = tiny_scene(seed=74)
        net = toy_net(2)
        before = net.checksum()
        cfg = OfflineConfig(total_updates=3, batch_frames=2, lr=1e-4, probe_every=2)
        net, rows = offline_finetune(
            noisy, net, ScalarVariance(10.0, trainable=False), cfg, seed=11, clean=clean
        )
        assert rows[0] == {"update": 0, "loss": "", "psnr": rows[0]["psnr"]}
        assert np.isfinite(rows[0]["psnr"])
        updates = [r["update"] for r in rows]
        assert updates == [0, 1, 2, 3]
        assert all(np.isfinite(r["loss"]) for r in rows[1:])
        assert "psnr" in rows[2] and "psnr" in rows[3]  # probe_every=2 plus final
        assert "psnr" not in rows[1]
        assert net.checksum() != before

    def test_zero_updates_leaves_weights_alone(self):
        _, noisy = tiny_scene(seed=75)
        net = toy_net(4)
        before = net.checksum()
        cfg = OfflineConfig(total_updates=0, batch_frames=2, lr=1e-2)
        net, rows = offline_finetune(noisy, net, ScalarVariance(10.0, trainable=False), cfg)
        assert rows == []
        assert net.checksum() == before

    def test_needs_valid_training_frames(self):
        _, noisy = tiny_scene(seed=76)
        with pytest.raises(ContractError):
            offline_finetune(noisy[:1], toy_net(), ScalarVariance(10.0, trainable=False), OfflineConfig(lr=1e-4))

    def test_bitwise_deterministic(self):
        _, noisy = tiny_scene(seed=77)
        cfg = OfflineConfig(total_updates=2, batch_frames=2, lr=1e-4)
        sums = []
        for _ in range(2):
            net, _ = offline_finetune(noisy, toy_net(5), ScalarVariance(10.0, trainable=False), cfg, seed=8)
            sums.append(net.checksum())
        assert sums[0] == sums[1]


class TestStackStudy:
    def test_compares_specs_without_touching_base_net(self):
        clean, noisy = tiny_scene(seed=78)
        base = toy_net(6)
        before = base.checksum()
        degenerate = StackSpec((-2, -1, 0, 1, 2), target_offset=-1, allow_degenerate=True)
        results = stack_study(
            noisy, clean, base, 10.0,
            [("degenerate", degenerate), ("dilated", DILATED_TRAIN_STACK)],
            fast_online(), skip_first=2,
        )
        assert [r["name"] for r in results] == ["degenerate", "dilated"]
        assert results[0]["spec"]["allow_degenerate"] is True
        assert all(np.isfinite(r["avg_psnr"]) for r in results)
        assert base.checksum() == before


class TestPretrain:
    def test_smoke_report_and_weight_motion(self):
        net = toy_net(7)
        before = net.checksum()
        cfg = PretrainConfig(epochs=1, num_videos=1, frames_per_video=6, crop=16, batch=2, lr=1e-3)
        net, report = pretrain(net, cfg, seed=12)
        assert report["steps"] == 3  # 6 samples / batch of 2
        assert np.isfinite(report["final_loss"])
        assert report["eval_sigma"] == pytest.approx(25.0)
        assert np.isfinite(report["heldout_gain_db"])
        assert net.checksum() != before

    def test_zero_epochs_only_evaluates(self):
        net = toy_net(8)
        before = net.checksum()
        cfg = PretrainConfig(epochs=0, num_videos=1, frames_per_video=6, crop=16, batch=2)
        net, report = pretrain(net, cfg, seed=13)
        assert report["steps"] == 0
        assert net.checksum() == before
        # identity init means the held-out gain is essentially zero
        assert abs(report["heldout_gain_db"]) < 0.2
