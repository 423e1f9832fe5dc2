import pytest

from chnet.config import RunConfig, load_config, parse_config
from chnet.errors import InvalidArgument


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_config("\n".join(cfg.lines())) == cfg


def test_parse_types_and_comments():
    cfg = parse_config("""
        # stage sizes
        base_epochs = 12
        base_lr = 0.005   # trailing comment
        ks = 0, 4, 16
        split_mode = ordered
        point_hidden = (40, 20)
    """)
    assert cfg.base_epochs == 12 and cfg.base_lr == 0.005
    assert cfg.ks == (0, 4, 16)
    assert cfg.split_mode == "ordered"
    assert cfg.point_hidden == (40, 20)


def test_empty_tuple_value():
    assert parse_config("chn_context_hidden = ").chn_context_hidden == ()


def test_unknown_key_rejected():
    with pytest.raises(InvalidArgument, match="unknown config key"):
        parse_config("learning_rate = 1")


def test_bad_value_and_line():
    with pytest.raises(InvalidArgument, match="bad value"):
        parse_config("base_epochs = many")
    with pytest.raises(InvalidArgument, match="line 2"):
        parse_config("base_epochs = 2\nnonsense\n")


def test_replace_parses_strings():
    cfg = RunConfig().replace(meta_epochs="7", ks=(1, 2))
    assert cfg.meta_epochs == 7 and cfg.ks == (1, 2)


def test_load_config_file(tmp_path):
    (tmp_path / "cfg").write_text("maml_epochs = 3\n")
    assert load_config(tmp_path / "cfg").maml_epochs == 3


def test_stage_configs_carry_values():
    cfg = RunConfig(kl_weight=0.5, meta_batch_size=7, maml_inner_steps=2, chn_meta_dim=3)
    assert cfg.base_training().kl_weight == 0.5
    assert cfg.meta_training().feature_batch_size == 7
    assert cfg.maml().inner_steps == 2
    assert cfg.chn().meta_dim == 3
