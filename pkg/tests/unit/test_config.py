import json
from pathlib import Path

import pytest

from src.config import DEFAULT_NECK_CONFIG, RunConfig, load_neck_config, neck_config_from_dict
from src.cross_fusion import StageSpec
from src.errors import ConfigError

FIXTURES = Path(__file__).parent.parent / "fixtures"


class TestNeckConfig:

    def test_default(self):
        config = load_neck_config()

        assert config.in_stages == (StageSpec(32, 1), StageSpec(64, 2), StageSpec(128, 4))
        assert config.out_stages == config.in_stages
        assert (config.n, config.K) == (1, 1)

    def test_yaml_fixture(self):
        config = load_neck_config(FIXTURES / "neck_config.yaml")

        assert config.in_stages == (StageSpec(8, 1), StageSpec(16, 2), StageSpec(32, 4))
        assert (config.n, config.K) == (2, 3)

    def test_json_fixture_matches_yaml(self):
        with open(FIXTURES / "neck_config.json", "r") as f:
            document = json.load(f)
        assert neck_config_from_dict(document) == load_neck_config(FIXTURES / "neck_config.yaml")

    def test_defaults_for_n_and_k(self):
        document = {key: DEFAULT_NECK_CONFIG[key] for key in ("in_channels", "in_scales", "out_channels",
                                                              "out_scales")}
        config = neck_config_from_dict(document)
        assert (config.n, config.K) == (1, 1)

    def test_rejections(self):
        invalid = [
            ({"n": 0}, "n"),
            ({"K": 2}, "odd"),
            ({"depth": 3}, "depth"),
            ({"in_scales": [1, 2]}, "in_scales has 2"),
            ({"out_scales": [1, 3, 4]}, "power of two"),
            ({"in_scales": [2, 1, 4]}, "strictly increasing"),
            ({"in_channels": []}, "in_channels"),
        ]
        for overrides, message in invalid:
            document = {**DEFAULT_NECK_CONFIG, **overrides}
            with pytest.raises(ConfigError, match=message):
                neck_config_from_dict(document)

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError):
            neck_config_from_dict(["n", 1])

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "neck.yaml"
        path.write_text("in_channels: [8, 16\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_neck_config(path)


class TestRunConfig:

    def test_defaults(self):
        config = RunConfig(subcommand="grade")

        assert config.seed == 0
        assert config.input_paths == {}
        assert config.output_paths == {}
        assert config.options == {}
