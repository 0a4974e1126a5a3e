import pytest

from cdslab.config import dump_config, load_config, parse_config_text
from cdslab.errors import ConfigError


def test_defaults_and_overrides():
    cfg = parse_config_text("train.regime = cds\narch.widths = 8,16,32,64  # narrow\n", ["train.lr=0.1"])
    assert cfg.regime == "cds" and cfg.arch.widths == [8, 16, 32, 64] and cfg.train.lr == 0.1
    assert cfg.loss.tau == 0.5 and cfg.loss.T == 4.0 and cfg.loss.alpha == 0.3
    assert cfg.head_count() == 3 and cfg.run_name == "cds-s0"


def test_dump_parses_back_to_an_equal_config():
    cfg = parse_config_text("train.regime = dks\nsemi.fraction = 0.25\nrun.name = x\ndata.norm_mean = 0.1,0.2,0.3")
    assert parse_config_text(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "train.regime = sideways",
    "train.nope = 1",
    "bogus.key = 1",
    "train.lr = fast",
    "train.epochs",
    "arch.K = 3",
    "train.regime = cds-semi",
    "train.regime = kd-cds",
    "loss.tau = 0",
    "aug.flip_p = 2",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.cfg"))
