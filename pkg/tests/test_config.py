import pytest

from stfusion.core.entities import ConfigError, TrainConfig
from stfusion.utils.config.client import parse_flat_config, resolve_train_config

FLAT = """
# tuned for the small synthetic set
lr = 3e-4
batch_size = 8   # two per worker
use_dice = false

betas = 0.8, 0.99
"""


def test_flat_config_skips_comments_and_blank_lines():
    assert parse_flat_config(FLAT) == {"lr": "3e-4", "batch_size": "8", "use_dice": "false", "betas": "0.8, 0.99"}


def test_flat_config_reports_the_bad_line():
    with pytest.raises(ConfigError, match="Line 2"):
        parse_flat_config("lr = 1\nbatch_size 8\n")
    with pytest.raises(ConfigError):
        parse_flat_config("= 4\n")


def test_flags_override_file_override_defaults(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(FLAT)
    cfg = resolve_train_config(path, {"batch_size": 2, "lr": None})
    assert cfg.batch_size == 2
    assert cfg.lr == 3e-4
    assert cfg.use_dice is False
    assert cfg.betas == (0.8, 0.99)
    assert cfg.iterations == TrainConfig().iterations


def test_yaml_config(tmp_path):
    path = tmp_path / "train.yaml"
    path.write_text("preset: small\nloss_weights: {w_ce: 1.0, w_dice: 0.0, w_lovasz: 0.5}\n")
    cfg = resolve_train_config(path)
    assert cfg.preset == "small"
    assert cfg.loss_weights.w_dice == 0.0
    assert TrainConfig.from_yaml(cfg.to_yaml()) == cfg


def test_unknown_and_invalid_values(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("learning_rate = 1e-3\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        resolve_train_config(path)
    with pytest.raises(ConfigError):
        resolve_train_config(None, {"lr": -1.0})
    with pytest.raises(ConfigError):
        resolve_train_config(None, {"preset": "huge"})
    with pytest.raises(ConfigError):
        resolve_train_config(tmp_path / "missing.cfg")
