import pytest

from bayesseg import config as C
from bayesseg.densenet import TINY
from bayesseg.uncertainty import DecisionRule


def test_defaults_validate():
    cfg = C.RunConfig().validate()
    assert (cfg.height, cfg.width, cfg.n_samples, cfg.strategy) == (64, 96, 50, "UW-MAP")
    assert cfg.bn_recalibrate is False


def test_unknown_key_named():
    with pytest.raises(C.ConfigError, match="'learning_rate'"):
        C.parse_config("learning_rate = 0.1\n")


def test_comments_and_blank_lines():
    cfg = C.parse_config("# a comment\n\ntask = damage  # trailing\nseed = 4\n")
    assert cfg.task == "damage" and cfg.seed == 4


@pytest.mark.parametrize("line,match", [("seed = four", "seed"), ("strategy = UW-MLE", "strategy"),
                                        ("profile = huge", "profile"), ("task = roads", "task"),
                                        ("n_samples = 0", "n_samples"), ("just text", "line 1"),
                                        ("bn_recalibrate = maybe", "bn_recalibrate"),
                                        ("experiment = table9", "experiment"), ("width = 4", "8x8")])
def test_bad_values(line, match):
    with pytest.raises(C.ConfigError, match=match):
        C.parse_config(line + "\n")


@pytest.mark.parametrize("raw,value", [("true", True), ("False", False), ("1", True), ("0", False)])
def test_bool_values(raw, value):
    assert C.parse_config(f"bn_recalibrate = {raw}\n").bn_recalibrate is value


@pytest.mark.parametrize("strategy,scheme,kind", [("UW-MAP", "UW", "MAP"), ("UW-ML", "UW", "ML"),
                                                  ("MFW-MAP", "MFW", "MAP"), ("MFW-ML", "MFW", "ML")])
def test_strategies(strategy, scheme, kind):
    cfg = C.RunConfig(strategy=strategy).validate()
    assert (cfg.weight_scheme, cfg.rule_kind) == (scheme, kind)
    rule = cfg.decision_rule((0.9, 0.1))
    assert rule == (DecisionRule("ML", (0.9, 0.1)) if kind == "ML" else DecisionRule("MAP"))


def test_mfw_ml_is_an_extension():
    assert "MFW-ML" in C.STRATEGIES and "MFW-ML" not in C.PAPER_STRATEGIES


def test_network_spec_overrides():
    cfg = C.parse_config("db_layer_counts = 1,2,1\ngrowth_rate = 4\nstem_filters = 8\n")
    spec = cfg.network_spec(6, 1)
    assert spec.db_layer_counts == (1, 2, 1) and spec.growth_rate == 4 and spec.stem_filters == 8
    assert spec.num_classes == 6 and spec.input_channels == 1 and spec.dropout_p == 0.5
    assert cfg.network_spec(2, 3, benchmark=True).dropout_p == 0.0


def test_bad_layer_counts():
    with pytest.raises(C.ConfigError):
        C.parse_config("db_layer_counts = 1,2\n")


def test_train_config_carries_scheme_and_seed():
    cfg = C.RunConfig(strategy="MFW-MAP", seed=3, bn_recalibrate=True)
    tc = cfg.train_config()
    assert (tc.weight_scheme, tc.seed, tc.bn_recalibrate) == ("MFW", 3, True)
    assert cfg.train_config(seed=7).seed == 7


def test_seed_list():
    assert C.RunConfig(seed=5).seed_list == [5]
    assert C.RunConfig(seeds="0, 1,2").seed_list == [0, 1, 2]


def test_text_round_trip():
    cfg = C.RunConfig(task="component", seeds="0,1", bn_recalibrate=True, lr0=1e-3)
    assert C.parse_config(cfg.to_text()) == cfg


def test_replace_validates():
    with pytest.raises(C.ConfigError):
        C.RunConfig().replace(strategy="nope")


def test_profile_lookup():
    assert C.RunConfig().network_spec(2, 3).db_layer_counts == TINY.db_layer_counts
