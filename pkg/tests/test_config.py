import math
from dataclasses import replace

import pytest

from dnh import config as cfgmod
from dnh.config import ExperimentConfig, config_hash, dumps_toml
from dnh.numerics import ConfigError


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoad:
    def test_defaults(self, tmp_path):
        cfg = cfgmod.load(write(tmp_path, ""))
        assert cfg == ExperimentConfig()
        assert (cfg.l0, cfg.l_max, cfg.meta.gamma, cfg.meta.delta_threshold) == (2, 5, 0.1, 0.05)

    def test_sections(self, tmp_path):
        cfg = cfgmod.load(write(tmp_path, 'seed = 4\n[stream]\nkind = "permuted_features"\n'
                                          "dim = 3\n[meta]\ntau = \"inf\"\ngamma = 0\n"))
        assert cfg.stream.kind == "permuted_features" and cfg.stream.seed == 4
        assert cfg.meta.tau == math.inf and cfg.meta.gamma == 0.0 and cfg.d == 3

    @pytest.mark.parametrize("text", ["bogus = 1\n", "[meta]\nbogus = 1\n", "[extra]\na = 1\n"])
    def test_unknown_keys(self, tmp_path, text):
        with pytest.raises(ConfigError, match="unknown"):
            cfgmod.load(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            cfgmod.load(tmp_path / "absent.toml")

    def test_malformed(self, tmp_path):
        with pytest.raises(ConfigError, match="malformed"):
            cfgmod.load(write(tmp_path, "a = = 1"))

    @pytest.mark.parametrize("text", ['l0 = "two"\n', "task_matrix = 1\n", "l0 = 9\n",
                                      '[stream]\nkind = "nope"\n', '[optimizer]\nkind = "sgd"\n',
                                      '[meta]\ngamma = -1\n'])
    def test_invalid_values(self, tmp_path, text):
        with pytest.raises(ConfigError):
            cfgmod.load(write(tmp_path, text))

    def test_repo_configs_load(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        files = sorted(root.glob("*.toml"))
        assert files
        for f in files:
            cfgmod.load(f)


class TestRoundtrip:
    def test_toml_roundtrip(self, tmp_path):
        cfg = replace(ExperimentConfig(), meta=ExperimentConfig().meta.disable_adaptation(),
                      init_freqs=(1.0, 0.25), task_matrix=True)
        back = cfgmod.load(write(tmp_path, dumps_toml(cfg)))
        assert back == cfg and config_hash(back) == config_hash(cfg)

    def test_hash_sensitive(self):
        a = ExperimentConfig()
        assert config_hash(a) == config_hash(ExperimentConfig())
        assert config_hash(a) != config_hash(a.with_seed(1))
        assert config_hash(a) != config_hash(replace(a, mode="static"))
        assert len(config_hash(a)) == 16


class TestDerived:
    def test_with_seed_reseeds_stream(self):
        cfg = ExperimentConfig().with_seed(9)
        assert cfg.seed == 9 and cfg.stream.seed == 9

    def test_level_freqs_extend_by_halving(self):
        assert replace(ExperimentConfig(), l0=4, init_freqs=(1.0,)).level_freqs() == [1.0, 0.5, 0.25, 0.125]

    def test_steps(self):
        cfg = ExperimentConfig()
        assert cfg.steps == 20000
        assert replace(cfg, total_steps=50).steps == 50
        assert replace(cfg, total_steps=10**9).steps == 20000
