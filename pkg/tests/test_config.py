"""Tests for the flat experiment config."""

import math

import pytest
import yaml

from dlsense.config import ExperimentConfig, config_from_mapping, config_hash, dump_config, load_config
from dlsense.errors import ValidationError
from dlsense.sigmod import ModScheme


class TestExperimentConfig:

    def test_default_grid(self):
        grid = ExperimentConfig().snr_grid()
        assert len(grid) == 41 and grid[0] == -20.0 and grid[-1] == 20.0

    def test_fractional_step(self):
        assert ExperimentConfig(snr_min=-1, snr_max=1, snr_step=0.5).snr_grid() == (-1.0, -0.5, 0.0, 0.5, 1.0)

    def test_schemes(self):
        cfg = ExperimentConfig(schemes='QAM16, gfsk')
        assert cfg.scheme_list() == (ModScheme.QAM16, ModScheme.GFSK)
        with pytest.raises(ValidationError):
            ExperimentConfig(schemes='QAM16,OOK')

    def test_derived_objects(self):
        cfg = ExperimentConfig(sample_length=64, n_train=10, n_val=4, n_test=6, seed=9, k=3)
        spec = cfg.dataset_spec()
        assert spec.counts == (10, 4, 6) and spec.seed == 9 and spec.sample_length == 64
        assert cfg.detectnet_config().sample_length == 64
        policy = cfg.stop_policy()
        assert (policy.pf_low, policy.pf_high) == (0.07, 0.09)
        assert cfg.scn_config().k == 3

    def test_with_ignores_none(self):
        cfg = ExperimentConfig().with_(seed=None, k=4)
        assert cfg.seed == 0 and cfg.k == 4
        with pytest.raises(ValidationError):
            ExperimentConfig().with_(colour='red')

    @pytest.mark.parametrize('kw', [dict(k=0), dict(snr_step=0), dict(pd_target=1.0), dict(m_samples=0.5),
                                    dict(snr_min=3, snr_max=1)])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            ExperimentConfig(**kw)


class TestConfigHash:

    def test_stable(self):
        assert config_hash(ExperimentConfig()) == config_hash(ExperimentConfig())
        assert len(config_hash(ExperimentConfig())) == 64

    def test_output_location_not_hashed(self):
        assert config_hash(ExperimentConfig(out='a', n_jobs=4)) == config_hash(ExperimentConfig(out='b'))

    def test_seed_hashed(self):
        assert config_hash(ExperimentConfig(seed=1)) != config_hash(ExperimentConfig(seed=2))


class TestLoadConfig:

    def test_from_file(self, tmp_path):
        path = tmp_path / 'exp.yaml'
        path.write_text('seed: 4\nsample_length: 256\nschemes: GFSK\npf_high: 0.1\n')
        cfg = load_config(path)
        assert (cfg.seed, cfg.sample_length, cfg.schemes, cfg.pf_high) == (4, 256, 'GFSK', 0.1)

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'exp.yaml'
        path.write_text('')
        assert load_config(path) == ExperimentConfig()

    def test_dump_round_trip(self):
        cfg = ExperimentConfig(seed=5, m_samples=128.0, schemes='QPSK')
        assert config_from_mapping(yaml.safe_load(dump_config(cfg))) == cfg
        assert math.isinf(config_from_mapping(yaml.safe_load(dump_config(ExperimentConfig()))).m_samples)

    @pytest.mark.parametrize('data', [{'seeds': 1}, {'seed': [1, 2]}, {'seed': 1.5}, {'reference_precision': 'yes'},
                                      {'lr': 'fast'}, ['seed', 1]])
    def test_rejected(self, data):
        with pytest.raises(ValidationError):
            config_from_mapping(data)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / 'exp.yaml'
        path.write_text('seed: [1\n')
        with pytest.raises(ValidationError):
            load_config(path)

    def test_integer_valued_float(self):
        assert config_from_mapping({'seed': 3.0}).seed == 3
