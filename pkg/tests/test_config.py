"""Config loading, validation, unknown-key rejection, and round-tripping."""

import pytest

from nucseg.config import PipelineConfig
from nucseg.errors import ConfigError


class TestDefaults:
    def test_defaults_validate(self):
        PipelineConfig().validate()

    def test_published_default_settings(self):
        cfg = PipelineConfig()
        assert cfg.stain.ratio == 0.6
        assert cfg.features.k == 3
        assert cfg.features.patch_size == 128
        assert cfg.features.stride == 64
        assert cfg.transport.rho0 == 0.6
        assert cfg.transport.rho_stride == 0.05
        assert cfg.predictor.y_negatives == 2
        assert cfg.predictor.patch_size == 512
        assert cfg.predictor.overlap_ratio == 0.5
        assert cfg.nms.decay == "exponential"
        assert cfg.nms.score_mode == "combined"


class TestFromDict:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            PipelineConfig.from_dict({"stian": {}})

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigError, match="transport.epsilonn"):
            PipelineConfig.from_dict({"transport": {"epsilonn": 0.1}})

    def test_values_applied(self):
        cfg = PipelineConfig.from_dict({"transport": {"epsilon": 0.02}, "run": {"seed": 7}})
        assert cfg.transport.epsilon == 0.02
        assert cfg.run.seed == 7

    def test_invalid_ratio_fails_validation(self):
        cfg = PipelineConfig.from_dict({"stain": {"ratio": 0.0}})
        with pytest.raises(ConfigError, match="ratio"):
            cfg.validate()

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError, match="mapping"):
            PipelineConfig.from_dict({"stain": 5})

    def test_numeric_strings_coerced(self):
        # YAML 1.1 reads unsigned exponents as strings; numbers must survive
        cfg = PipelineConfig.from_dict(
            {"transport": {"iota": "1.0e9", "max_iters": 5000.0}, "stain": {"ratio": "0.5"}}
        )
        assert cfg.transport.iota == 1.0e9
        assert cfg.transport.max_iters == 5000
        assert cfg.stain.ratio == 0.5
        cfg.validate()

    def test_non_numeric_junk_rejected_with_path(self):
        with pytest.raises(ConfigError, match="transport.epsilon"):
            PipelineConfig.from_dict({"transport": {"epsilon": "fast"}})
        with pytest.raises(ConfigError, match="run.workers"):
            PipelineConfig.from_dict({"run": {"workers": 2.5}})
        with pytest.raises(ConfigError, match="run.debug_activations"):
            PipelineConfig.from_dict({"run": {"debug_activations": "yes please"}})


class TestYamlRoundTrip:
    def test_dump_load_identity(self, tmp_path):
        cfg = PipelineConfig.from_dict(
            {"transport": {"epsilon": 0.07, "rho0": 0.55}, "nms": {"decay": "linear"}}
        )
        path = tmp_path / "config.yaml"
        cfg.dump(path)
        again = PipelineConfig.load(path)
        assert again.to_dict() == cfg.to_dict()

    def test_bad_yaml_is_config_error(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("stain: [unclosed")
        with pytest.raises(ConfigError):
            PipelineConfig.load(path)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert PipelineConfig.load(path).to_dict() == PipelineConfig().to_dict()


class TestSectionValidation:
    @pytest.mark.parametrize(
        "section,key,value",
        [
            ("features", "cell", 7),          # does not divide patch 128
            ("features", "stride", 0),
            ("transport", "epsilon", -1.0),
            ("transport", "rho0", 1.0),
            ("prompting", "refiner", "crf"),
            ("prompting", "resize", "bicubic"),
            ("predictor", "overlap_ratio", 1.0),
            ("predictor", "backend", "sam"),
            ("nms", "tau", 1.5),
            ("run", "workers", 0),
        ],
    )
    def test_rejects(self, section, key, value):
        cfg = PipelineConfig.from_dict({section: {key: value}})
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_file_backend_needs_mask_dir(self):
        cfg = PipelineConfig.from_dict({"predictor": {"backend": "file"}})
        with pytest.raises(ConfigError, match="mask_dir"):
            cfg.validate()
