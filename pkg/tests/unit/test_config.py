"""
Unit tests for config module
Tests RunConfig validation and the flat key = value file format
"""

import pytest
import os

# Import the modules to test
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from config import (RunConfig, DecoderConfig, GeneratorConfig, build_run_config, dump_run_config,
                    load_run_config, parse_run_config)
from errors import ConfigurationError


@pytest.mark.unit
class TestRunConfig:
    """Test RunConfig defaults and validation"""

    def setup_method(self):
        """Set up test fixtures"""
        self.config_path = os.path.join(os.path.dirname(__file__), '..', 'fixtures', 'test_run.cfg')

    def test_defaults_match_desk_scale(self):
        """Test the documented desk-scale defaults"""
        cfg = RunConfig()

        assert cfg.k == 3
        assert cfg.m == 4
        assert cfg.lr == pytest.approx(2e-4)
        assert cfg.weight_decay == pytest.approx(0.01)
        assert cfg.channels == 64
        assert cfg.layers == 3
        assert cfg.queries == 60
        assert cfg.traffic_queries == 20
        assert cfg.batch_size == 4
        assert cfg.steps == 2000

    def test_decoder_config_carries_run_settings(self):
        """Test that decoder settings are derived from the run"""
        cfg = RunConfig(mode="standard", m=2, channels=32, heads=4)
        decoder = cfg.decoder_config()

        assert isinstance(decoder, DecoderConfig)
        assert decoder.mode == "standard"
        assert decoder.parallel_blocks == 2
        assert decoder.channels == 32
        assert decoder.bev_height == cfg.bev.height

    def test_k_must_be_positive(self):
        """Test K >= 1"""
        with pytest.raises(ConfigurationError, match="k"):
            build_run_config({"k": 0})

    def test_channels_must_divide_heads(self):
        """Test the head divisibility check"""
        with pytest.raises(ConfigurationError):
            build_run_config({"channels": 30, "heads": 4})

    def test_group_mode_needs_divisible_queries(self):
        """Test group partition check"""
        with pytest.raises(ConfigurationError):
            build_run_config({"mode": "group_o2m", "queries": 61, "groups": 3})

    def test_batch_cannot_exceed_pool(self):
        """Test batch size bound"""
        with pytest.raises(ConfigurationError, match="batch_size"):
            build_run_config({"batch_size": 5, "pool_size": 4})

    def test_positive_sets_must_fit_queries(self):
        """Test K positives per lane need k * lane_max lane queries"""
        with pytest.raises(ConfigurationError, match="k \\* scene.lane_max = 9\\*7 = 63 exceeds queries = 60"):
            build_run_config({"mode": "reordered", "k": 9})
        with pytest.raises(ConfigurationError, match="queries"):
            build_run_config({"mode": "naive_o2m", "k": 4, "queries": 20, "scene": {"lane_max": 6}})

    def test_standard_mode_ignores_k_bound(self):
        """Test one-to-one modes only need lane_max queries"""
        cfg = build_run_config({"mode": "standard", "k": 9})

        assert cfg.k == 9

    def test_group_must_hold_every_lane(self):
        """Test each query group covers the largest scene"""
        with pytest.raises(ConfigurationError, match="scene.lane_max = 7 exceeds queries // groups = 6"):
            build_run_config({"mode": "group_o2m", "queries": 18, "groups": 3})

    def test_lane_queries_must_cover_lanes(self):
        """Test lane_max <= queries outside group mode"""
        with pytest.raises(ConfigurationError, match="scene.lane_max = 7 exceeds queries = 5"):
            build_run_config({"mode": "standard", "queries": 5})

    def test_traffic_queries_must_cover_traffic(self):
        """Test traffic_max <= traffic_queries"""
        with pytest.raises(ConfigurationError, match="scene.traffic_max = 4 exceeds traffic_queries = 3"):
            build_run_config({"traffic_queries": 3})

    def test_query_bounds_through_overrides(self):
        """Test overrides are checked against the same bounds"""
        with pytest.raises(ConfigurationError, match="k \\* scene.lane_max"):
            RunConfig().with_overrides(**{"scene.lane_max": 21})

    def test_generator_lane_bounds(self):
        """Test empty lane range is rejected"""
        with pytest.raises(ValueError):
            GeneratorConfig(lane_min=5, lane_max=3)

    def test_with_overrides_dotted_keys(self):
        """Test top-level and section overrides"""
        cfg = RunConfig().with_overrides(k=2, **{"loss.lambda_o2m": 0.0, "scene.lane_max": 5})

        assert cfg.k == 2
        assert cfg.loss.lambda_o2m == 0.0
        assert cfg.scene.lane_max == 5

    def test_frozen(self):
        """Test configs are immutable"""
        cfg = RunConfig()
        with pytest.raises(Exception):
            cfg.k = 5


@pytest.mark.unit
class TestConfigFile:
    """Test the flat configuration file format"""

    def setup_method(self):
        """Set up test fixtures"""
        self.config_path = os.path.join(os.path.dirname(__file__), '..', 'fixtures', 'test_run.cfg')

    def test_parse_basic_keys(self):
        """Test parsing top-level and dotted keys with comments"""
        cfg = parse_run_config("""
            # comment line
            mode = naive_o2m   # trailing comment
            k = 2
            seeds = 1, 2, 3
            loss.lambda_ll = 3.5
            scene.templates = straight,fork
        """)

        assert cfg.mode == "naive_o2m"
        assert cfg.k == 2
        assert cfg.seeds == (1, 2, 3)
        assert cfg.loss.lambda_ll == 3.5
        assert cfg.scene.templates == ("straight", "fork")

    def test_unknown_key_is_error(self):
        """Test unknown keys are hard errors naming the key"""
        with pytest.raises(ConfigurationError, match="unknown key 'kk'"):
            parse_run_config("kk = 3\n")

    def test_missing_equals_is_error(self):
        """Test malformed lines report their line number"""
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_run_config("k = 3\nmode reordered\n")

    def test_invalid_value_names_key(self):
        """Test invalid values name the offending key"""
        with pytest.raises(ConfigurationError, match="mode"):
            parse_run_config("mode = cascade\n")

    def test_dump_parse_is_lossless(self):
        """Test serialization round trip for a non-default config"""
        cfg = RunConfig(mode="group_o2m", k=4, lr=3e-4, seeds=(3, 5), supervision="full",
                        aux_reduction="mean").with_overrides(**{"loss.focal_gamma": 1.5, "bev.height": 40})

        assert parse_run_config(dump_run_config(cfg)) == cfg

    def test_load_fixture(self):
        """Test loading the test run fixture"""
        cfg = load_run_config(self.config_path)

        assert cfg.mode == "reordered"
        assert cfg.channels == 16
        assert cfg.bev.height == 20

    def test_load_missing_file(self):
        """Test missing config file"""
        with pytest.raises(ConfigurationError, match="not found"):
            load_run_config("nonexistent.cfg")
