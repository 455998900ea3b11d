"""Experiment-config schema and section-builder tests."""

import json

import numpy as np
import pytest

from mf2f.config import (
    denoiser_config_from,
    flow_params_from,
    load_config,
    mask_config_from,
    noise_model_from,
    noise_schedule_from,
    offline_config_from,
    online_config_from,
    pretrain_config_from,
    validate_config,
    variance_from,
)
from mf2f.engine import DILATED_TRAIN_STACK
from mf2f.errors import ConfigError
from mf2f.noise import Awgn, BoxNoise, ScaledPoisson
from mf2f.variance import PerLevelVariance, ScalarVariance, SpatialVariance


def full_doc() -> dict:
    return {
        "seed": 7,
        "mode": "online",
        "input": "in_dir",
        "output": "out_dir",
        "noise": {"schedule": [{"first": 0, "last": None, "model": {"kind": "awgn", "sigma": 20}}]},
        "flow": {"lambda_data": 0.25, "presmooth_sigma": 1.0},
        "mask": {"threshold_factor": 2.5},
        "net": {"base_channels": 8},
        "variance": {"kind": "scalar", "sigma": 20.0, "trainable": False},
        "online": {"steps_per_update": 5, "lr": 0.001},
    }


class TestSchemaValidation:
    def test_full_document_validates(self):
        doc = full_doc()
        assert validate_config(doc) is doc

    def test_empty_document_validates(self):
        assert validate_config({}) == {}

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key: outpt"):
            validate_config({"outpt": "x"})

    def test_unknown_nested_key_reports_dotted_path(self):
        with pytest.raises(ConfigError, match=r"mask\.thresold_factor"):
            validate_config({"mask": {"thresold_factor": 3.0}})

    def test_wrong_leaf_type_reported_with_path(self):
        with pytest.raises(ConfigError, match=r"flow\.lambda_data"):
            validate_config({"flow": {"lambda_data": "strong"}})

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError, match="seed"):
            validate_config({"seed": True})

    def test_int_accepted_where_float_expected(self):
        validate_config({"flow": {"lambda_data": 1}})

    def test_list_sections_check_each_element(self):
        doc = {"noise": {"schedule": [{"first": 0, "model": {"kind": 3}}]}}
        with pytest.raises(ConfigError, match=r"noise\.schedule\[0\]\.model\.kind"):
            validate_config(doc)

    def test_schedule_must_be_list(self):
        with pytest.raises(ConfigError, match=r"noise\.schedule must be a list"):
            validate_config({"noise": {"schedule": {"first": 0}}})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError, match="mask must be an object"):
            validate_config({"mask": 3})

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode must be one of"):
            validate_config({"mode": "finetune"})

    @pytest.mark.parametrize("mode", ["pretrain", "online", "offline", "infer", "study"])
    def test_known_modes_accepted(self, mode):
        validate_config({"mode": mode})


class TestLoadConfig:
    def test_reads_and_validates_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(full_doc()))
        assert load_config(path)["seed"] == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_invalid_schema_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"flw": {}}))
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(path)


class TestSectionBuilders:
    def test_flow_defaults_and_overrides(self):
        assert flow_params_from({}).lambda_data == pytest.approx(0.3)
        params = flow_params_from({"flow": {"lambda_data": 0.1, "warps_per_level": 3}})
        assert params.lambda_data == pytest.approx(0.1)
        assert params.warps_per_level == 3

    def test_flow_invalid_value(self):
        with pytest.raises(ConfigError, match="bad flow section"):
            flow_params_from({"flow": {"pyramid_scale": 1.5}})

    def test_mask_defaults_and_overrides(self):
        assert mask_config_from({}).sigma_g1 == pytest.approx(2.0)
        assert mask_config_from({"mask": {"threshold_factor": 2.5}}).threshold_factor == pytest.approx(2.5)

    def test_mask_invalid_value(self):
        with pytest.raises(ConfigError, match="bad mask section"):
            mask_config_from({"mask": {"histogram_bins": 0}})

    def test_net_defaults_and_invalid(self):
        assert denoiser_config_from({"net": {"base_channels": 16}}).base_channels == 16
        with pytest.raises(ConfigError):
            denoiser_config_from({"net": {"base_channels": 2}})


class TestNoiseBuilders:
    def test_model_kinds(self):
        awgn = noise_model_from({"kind": "awgn", "sigma": 20})
        poisson = noise_model_from({"kind": "poisson", "p": 8})
        box = noise_model_from({"kind": "box", "size": 3, "sigma": 40})
        assert isinstance(awgn, Awgn) and awgn.sigma == pytest.approx(20.0)
        assert isinstance(poisson, ScaledPoisson) and poisson.p == pytest.approx(8.0)
        assert isinstance(box, BoxNoise) and (box.size, box.sigma) == (3, pytest.approx(40.0))

    def test_model_missing_field(self):
        with pytest.raises(ConfigError, match="missing field"):
            noise_model_from({"kind": "awgn"})

    def test_model_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown noise model kind"):
            noise_model_from({"kind": "salt"})

    def test_model_bad_value(self):
        with pytest.raises(ConfigError, match="bad noise model"):
            noise_model_from({"kind": "awgn", "sigma": 0})

    def test_schedule_open_end_fills_video_length(self):
        doc = {"noise": {"schedule": [{"first": 0, "last": None, "model": {"kind": "awgn", "sigma": 10}}]}}
        schedule = noise_schedule_from(doc, 12)
        assert schedule.entries[0].last == 11

    def test_schedule_required(self):
        with pytest.raises(ConfigError, match="no noise.schedule"):
            noise_schedule_from({}, 10)

    def test_schedule_with_gap_rejected(self):
        doc = {
            "noise": {
                "schedule": [
                    {"first": 0, "last": 3, "model": {"kind": "awgn", "sigma": 10}},
                    {"first": 5, "last": 9, "model": {"kind": "awgn", "sigma": 40}},
                ]
            }
        }
        with pytest.raises(ConfigError, match="bad noise schedule"):
            noise_schedule_from(doc, 10)


class TestTrainingBuilders:
    def test_online_defaults(self):
        cfg = online_config_from({})
        assert cfg.train_spec == DILATED_TRAIN_STACK
        assert cfg.steps_per_update == 20

    def test_online_custom_stack(self):
        doc = {"online": {"train_offsets": [-6, -3, 0, 3, 6], "target_offset": -1, "lr": 0.01}}
        cfg = online_config_from(doc)
        assert cfg.train_spec.offsets == (-6, -3, 0, 3, 6)
        assert cfg.train_spec.target_offset == -1
        assert cfg.lr == pytest.approx(0.01)
        # the builder must not mutate the caller's document
        assert doc["online"] == {"train_offsets": [-6, -3, 0, 3, 6], "target_offset": -1, "lr": 0.01}

    def test_online_degenerate_stack_needs_flag(self):
        doc = {"online": {"train_offsets": [-2, -1, 0, 1, 2], "target_offset": -1}}
        with pytest.raises(ConfigError, match="bad training stack"):
            online_config_from(doc)
        doc["online"]["allow_degenerate"] = True
        assert online_config_from(doc).train_spec.allow_degenerate

    def test_online_bad_value(self):
        with pytest.raises(ConfigError, match="bad online section"):
            online_config_from({"online": {"lr": -1.0}})

    def test_offline_defaults_and_overrides(self):
        assert offline_config_from({}).total_updates == 200
        cfg = offline_config_from({"offline": {"total_updates": 50, "probe_every": 10}})
        assert (cfg.total_updates, cfg.probe_every) == (50, 10)

    def test_offline_bad_value(self):
        with pytest.raises(ConfigError, match="bad offline section"):
            offline_config_from({"offline": {"batch_frames": 0}})

    def test_pretrain_sigma_range_coerced(self):
        cfg = pretrain_config_from({"pretrain": {"sigma_range": [5, 30]}})
        assert cfg.sigma_range == (5.0, 30.0)

    def test_pretrain_sigma_range_length(self):
        with pytest.raises(ConfigError, match="sigma_range"):
            pretrain_config_from({"pretrain": {"sigma_range": [5]}})


class TestVarianceBuilder:
    def video(self):
        return np.linspace(0.0, 255.0, 2 * 64).reshape(2, 1, 8, 8)

    def test_default_is_scalar(self):
        varmap = variance_from({}, self.video())
        assert isinstance(varmap, ScalarVariance)
        assert varmap.sigma_value == pytest.approx(25.0)

    def test_per_level_uses_video_intensity_range(self):
        varmap = variance_from({"variance": {"kind": "per_level", "levels": 4, "sigma": 10.0}}, self.video())
        assert isinstance(varmap, PerLevelVariance)
        assert varmap.sigmas.data.shape == (4,)
        assert varmap.edges[0] == pytest.approx(0.0)
        assert varmap.edges[-1] == pytest.approx(255.0)

    def test_spatial_matches_frame_shape(self):
        varmap = variance_from({"variance": {"kind": "spatial", "sigma": 15.0}}, self.video())
        assert isinstance(varmap, SpatialVariance)
        assert varmap.sigma_map.data.shape == (8, 8)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown variance kind"):
            variance_from({"variance": {"kind": "banana"}}, self.video())

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad variance section"):
            variance_from({"variance": {"kind": "per_level", "levels": 0}}, self.video())
