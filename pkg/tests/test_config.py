import pytest
from hypothesis import given, settings, strategies as st

from moc.config import ConfigError, ExperimentConfig, from_text, load_config, parse_text, parse_value


class TestConfig:
    def test_defaults_follow_ppo_table(self):
        cfg = ExperimentConfig()
        assert (cfg.lr, cfg.gamma, cfg.clip, cfg.vf_coef, cfg.ent_coef, cfg.max_grad_norm, cfg.minibatch) == (
            2.5e-4, 0.9995, 0.3, 0.5, 0.0, 10.0, 128)
        assert cfg.mu == cfg.gamma

    def test_round_trip(self):
        cfg = ExperimentConfig(task="push", seeds=(0, 1, 2), shaping_mu=0.5, policy_hidden=(32, 16), T_inner=0)
        assert from_text(cfg.to_text()) == cfg

    @given(st.floats(1e-9, 1.0), st.integers(1, 64), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, lr, n_envs, persist):
        cfg = ExperimentConfig(lr=lr, n_envs=n_envs, buffer_persist=persist)
        assert from_text(cfg.to_text()) == cfg

    def test_unknown_key_reports_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("task = push\n# comment\nwarp_factor = 9\n")
        with pytest.raises(ConfigError, match=r"c\.txt:3: .*warp_factor"):
            load_config(path)

    def test_bad_value_and_syntax(self):
        with pytest.raises(ConfigError, match="<config>:1"):
            parse_text("n_envs = many")
        with pytest.raises(ConfigError, match="<config>:2"):
            parse_text("task = reach\njust words")

    def test_last_writer_wins(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("lr = 0.1\nlr = 0.2\nn_envs = 4\n")
        cfg = load_config(path, {"n_envs": 3})
        assert (cfg.lr, cfg.n_envs) == (0.2, 3)

    def test_typed_values(self):
        assert parse_value("buffer_size", "1e6") == 1_000_000
        assert parse_value("seeds", "0, 1,2") == (0, 1, 2)
        assert parse_value("shaping_mu", "none") is None
        assert parse_value("first_order", "true") is True

    @pytest.mark.parametrize("over", [{"task": "fly"}, {"variant": "moc_plus"}, {"n_envs": 0}, {"unroll_K": 9},
                                      {"seeds": ()}, {"shaping_mode": "scaled"}])
    def test_validation(self, over):
        with pytest.raises(ConfigError):
            ExperimentConfig(**over)

    def test_loop_bounds(self):
        assert ExperimentConfig(n_steps=5000, total_env_steps=200_000).outer_episodes == 40
        assert ExperimentConfig(T_inner=0, T_outer=1).steps_per_episode == 0
