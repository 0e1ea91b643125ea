import pytest

from ctm.config import RunConfig, load_config, parse_config
from ctm.errors import ConfigError


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert (cfg.max_seq, cfg.batch_size, cfg.learning_rate, cfg.epoch, cfg.alpha_init) == (64, 32, 1e-3, 5, 1.0)

    def test_values_and_comments(self):
        cfg = parse_config("# header\nfusion = concat  # trailing\n\nepoch=2\nprompt_tuning = false\n"
                           "train_counts = 1, 2, 3\nvariants = baseline,te-labels\n")
        assert cfg.fusion == "concat"
        assert cfg.epoch == 2
        assert cfg.prompt_tuning is False
        assert cfg.train_counts == (1, 2, 3)
        assert cfg.variants == ("baseline", "te-labels")

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config("epoch = 1\n\nlearnin_rate = 0.1\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("epoch 1\n")

    @pytest.mark.parametrize("text", ["epoch = two", "learning_rate = fast", "prompt_tuning = maybe",
                                      "train_counts = 1,x,3"])
    def test_type_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    @pytest.mark.parametrize("text", ["fusion = multiply", "model = bert", "dataset = dev",
                                      "hypothesis_source = wiki", "batch_size = 0", "learning_rate = -1",
                                      "epoch = -1", "d = 30", "train_counts = 1,2"])
    def test_validation(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_to_text_round_trip(self):
        cfg = RunConfig().replace(fusion="concat", prompt_tuning=False, variants=("baseline",), seed=4)
        assert parse_config(cfg.to_text()) == cfg


class TestLoadConfig:
    def test_overrides_win_and_none_is_ignored(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 3\nepoch = 2\n")
        cfg = load_config(path, seed=9, epoch=None)
        assert (cfg.seed, cfg.epoch) == (9, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_no_file(self):
        assert load_config(None) == RunConfig()
