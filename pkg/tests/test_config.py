import json

import pytest

from hevcrl.config import (
    RunConfig,
    build_corridor,
    build_cycle,
    build_env_factory,
    dump_config,
    load_config,
    trainer_config,
)
from hevcrl.cvpo import CvpoConfig
from hevcrl.errors import ConfigError
from hevcrl.lagrangian import PidConfig


class TestLoadConfig:
    def test_packaged_defaults(self):
        config = load_config()
        assert config.algorithm == "pid_lagrangian"
        assert config.seed == 16
        assert config.gamma == 0.995
        assert config.corridor["H"] == 0.55
        assert config.pid["K_P"] == 2.0
        assert config.cvpo["eps_T"] == 0.1

    def test_partial_toml_overlay_keeps_other_keys(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("seed = 3\n[corridor]\nH = 0.6\n")
        config = load_config(path)
        assert config.seed == 3
        assert config.corridor["H"] == 0.6
        # untouched keys still come from the packaged defaults
        assert config.corridor["L"] == 0.45
        assert config.pid["K_I"] == 0.5

    def test_json_and_toml_documents_are_equivalent(self, tmp_path):
        toml_path = tmp_path / "run.toml"
        toml_path.write_text('seed = 9\ncycle = "nedc"\n[pid]\nK_P = 7.0\n')
        json_path = tmp_path / "run.json"
        json_path.write_text(json.dumps(
            {"seed": 9, "cycle": "nedc", "pid": {"K_P": 7.0}}))
        assert dump_config(load_config(toml_path)) == \
            dump_config(load_config(json_path))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("episodes = 10\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_malformed_document_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("seed = = 3\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")


class TestValidation:
    def test_bad_algorithm(self):
        with pytest.raises(ConfigError):
            RunConfig(algorithm="ppo")

    def test_bad_gamma(self):
        with pytest.raises(ConfigError):
            RunConfig(gamma=0.0)

    def test_bad_epochs(self):
        with pytest.raises(ConfigError):
            RunConfig(epochs=0)


class TestInstanceConstruction:
    def test_builtin_cycles(self):
        assert build_cycle(RunConfig(cycle="trapezoid")).num_steps == 200
        assert build_cycle(RunConfig(cycle="nedc")).num_steps == 1180

    def test_cycle_from_file(self, tmp_path):
        path = tmp_path / "cyc.csv"
        path.write_text("time,speed_kmh\n0,0\n1,10\n2,20\n")
        assert build_cycle(RunConfig(cycle=str(path))).num_steps == 2

    def test_missing_cycle_file(self):
        with pytest.raises(ConfigError):
            build_cycle(RunConfig(cycle="no/such/file.csv"))

    def test_corridor_ts_defaults_to_cycle_steps(self):
        config = RunConfig()
        corridor = build_corridor(config, build_cycle(config))
        assert corridor.Ts == 200

    def test_bad_corridor_key(self):
        config = RunConfig(corridor={"H": 0.6, "L": 0.4, "B": 0.5,
                                     "bl": 10, "br": 100, "top": 1})
        with pytest.raises(ConfigError):
            build_corridor(config, build_cycle(config))

    def test_factory_builds_fresh_envs(self):
        factory, cycle, _, corridor = build_env_factory(load_config())
        env_a, env_b = factory(), factory()
        assert env_a is not env_b
        assert env_a.num_steps == cycle.num_steps == corridor.Ts


class TestTrainerConfig:
    def test_pid_defaults(self):
        tcfg = trainer_config(load_config(), horizon=200)
        assert isinstance(tcfg, PidConfig)
        assert (tcfg.K_P, tcfg.K_I, tcfg.K_D) == (2.0, 0.5, 1.0)
        assert tcfg.gamma == 0.995 and tcfg.eps_T == 0.2
        assert tcfg.cost_scale == 10.0

    def test_cvpo_section_overrides_shared_budget(self):
        config = load_config()
        config.algorithm = "cvpo"
        tcfg = trainer_config(config, horizon=200)
        assert isinstance(tcfg, CvpoConfig)
        assert tcfg.eps_T == 0.1 and tcfg.M == 16

    def test_steps_per_epoch_sets_episode_count(self):
        config = load_config()
        config.steps_per_epoch = 1000
        assert trainer_config(config, horizon=200).num_envs == 5

    def test_unknown_trainer_key(self):
        config = load_config()
        config.pid["K_Q"] = 1.0
        with pytest.raises(ConfigError):
            trainer_config(config, horizon=200)

    def test_hidden_list_becomes_tuple(self):
        config = load_config()
        config.pid["hidden"] = [16, 16]
        assert trainer_config(config, horizon=200).hidden == (16, 16)
