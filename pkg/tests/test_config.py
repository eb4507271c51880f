"""Dotted-key config format: defaults, round trip, validation, overrides."""

import pytest

from roadgen.config import TrainConfig
from roadgen.errors import ConfigError


def test_defaults_match_reference_recipe():
    c = TrainConfig()
    assert c.epochs == 20
    assert c.batch_size == 32
    assert c.inner_lr == 1e-4
    assert c.meta_lr == 0.001
    assert c.gamma == 0.7
    assert c.lam == 1.0
    assert c.tau == 0.05
    assert c.resize == 64
    assert c.loss_variant == "ce+ct+dg"
    assert c.hidden == (256, 128)
    assert c.embed_dim == 64
    assert c.epsilon == 1e-3
    assert c.max_pairs_per_class == 256


def test_text_round_trip_is_exact():
    c = TrainConfig(seed=17, gamma=0.35, hidden=(32, 16), loss_variant="ce+dg")
    text = c.to_text()
    assert TrainConfig.parse(text) == c
    # serialization is stable: parse → to_text reproduces the same bytes
    assert TrainConfig.parse(text).to_text() == text


def test_parse_tolerates_comments_and_blanks():
    text = """
    # a comment
    train.gamma = 0.5   # trailing comment

    train.seed = 3
    """
    c = TrainConfig.parse(text)
    assert c.gamma == 0.5 and c.seed == 3


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.parse("train.bogus = 1")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        TrainConfig.parse("train.seed = 1\ntrain.seed = 2")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        TrainConfig.parse("train.seed")


def test_bad_value_names_key():
    with pytest.raises(ConfigError, match="train.epochs"):
        TrainConfig.parse("train.epochs = soon")


def test_overrides_beat_file_values():
    c = TrainConfig.parse("train.gamma = 0.5")
    c2 = c.with_overrides({"train.gamma": "0.9", "train.loss_variant": "ce"})
    assert c2.gamma == 0.9
    assert c2.loss_variant == "ce"
    assert c.gamma == 0.5  # original untouched


def test_override_unknown_key_rejected():
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides({"nope.nope": "1"})


def test_validation_rules():
    TrainConfig(meta_lr=0.0, gamma=0.0, lam=0.0).validate()  # switches may be off
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(inner_lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss_variant="ce+xx").validate()
    with pytest.raises(ConfigError):
        TrainConfig(stats_refresh="sometimes").validate()
    with pytest.raises(ConfigError):
        TrainConfig(hidden=(0,)).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epsilon=0.0).validate()


def test_hidden_list_and_bools_parse():
    c = TrainConfig.parse("model.hidden = 64,32\nmetrics.weighted = true\n"
                          "dg.literal_metric = FALSE")
    assert c.hidden == (64, 32)
    assert c.weighted is True
    assert c.literal_metric is False


def test_variant_switches():
    assert TrainConfig(loss_variant="ce").contrastive_on is False
    assert TrainConfig(loss_variant="ce").dg_on is False
    assert TrainConfig(loss_variant="ce+ct").contrastive_on is True
    assert TrainConfig(loss_variant="ce+dg").dg_on is True
    assert TrainConfig(loss_variant="ce+ct+dg").contrastive_on is True
    assert TrainConfig(loss_variant="ce+ct+dg").dg_on is True


def test_file_round_trip(tmp_path):
    path = tmp_path / "run.cfg"
    c = TrainConfig(seed=99, tau=0.1)
    c.save(path)
    assert TrainConfig.from_file(path) == c


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_file(tmp_path / "absent.cfg")
