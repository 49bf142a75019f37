import glob
import os

import pytest

from dve.config import (
    apply_overrides,
    dump_config,
    load_config,
    train_config_from_tree,
)
from dve.errors import ConfigurationError
from dve.trainer import TrainConfig


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


def test_load_config_parses_types(tmp_path):
    path = write(
        tmp_path,
        """
[train]
arch = hourglass
embed_dim = 20
lr = 0.0005
use_dve = true
steps_per_epoch = none
pair_source = flow
[train.warp]
scale_range = 0.85, 1.15
control_grid = 4, 4
""",
    )
    tree = load_config(path)
    t = tree["train"]
    assert t["arch"] == "hourglass"
    assert t["embed_dim"] == 20
    assert t["lr"] == 0.0005
    assert t["use_dve"] is True
    assert t["steps_per_epoch"] is None
    assert t["warp"]["scale_range"] == (0.85, 1.15)
    assert t["warp"]["control_grid"] == (4, 4)


def test_load_config_missing_file():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/run.ini")


def test_train_config_from_tree(tmp_path):
    path = write(
        tmp_path,
        """
[train]
embed_dim = 7
epochs = 2
[train.warp]
rotation_range = 0.05
""",
    )
    cfg = train_config_from_tree(load_config(path))
    assert cfg.embed_dim == 7
    assert cfg.epochs == 2
    assert cfg.warp.rotation_range == 0.05
    assert cfg.warp.scale_range == (0.9, 1.1)  # untouched default


def test_unknown_keys_are_named(tmp_path):
    path = write(tmp_path, "[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigurationError) as exc:
        train_config_from_tree(load_config(path))
    assert "train.learning_rate" in str(exc.value)

    path2 = write(tmp_path, "[train.warp]\nwiggle = 0.1\n")
    with pytest.raises(ConfigurationError) as exc:
        train_config_from_tree(load_config(path2))
    assert "train.warp.wiggle" in str(exc.value)


def test_config_values_are_validated(tmp_path):
    path = write(tmp_path, "[train]\nlr = -1\n")
    with pytest.raises(ConfigurationError):
        train_config_from_tree(load_config(path))


def test_apply_overrides():
    cfg = TrainConfig(embed_dim=8)
    out = apply_overrides(cfg, {"embed_dim": 12, "epochs": None})
    assert out.embed_dim == 12
    assert out.epochs == TrainConfig().epochs
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, {"no_such_field": 1})
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, {"aux_per_pair": 999})


def test_dump_config_roundtrip(tmp_path):
    cfg = TrainConfig(embed_dim=9, epochs=3, use_dve=False, steps_per_epoch=17,
                      pair_source="warp")
    path = str(tmp_path / "dumped.ini")
    dump_config(cfg, path)
    back = train_config_from_tree(load_config(path))
    assert back == cfg


CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "*.ini"))),
                         ids=os.path.basename)
def test_shipped_configs_parse(path):
    cfg = train_config_from_tree(load_config(path))
    assert cfg.epochs >= 1
    assert cfg.arch in ("smallnet", "smallnet_plus", "hourglass")
    if cfg.use_dve:
        assert cfg.aux_pool_size >= cfg.aux_per_pair >= 1
