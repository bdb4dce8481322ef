from pathlib import Path

import pytest
import yaml

from modules.errors import ConfigInvalidError
from utils.config_utils import (
    TOY_DEFAULTS,
    config_from_flat,
    load_run_config,
    save_run_config,
    unflatten_dict,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


def _write(tmp_path, flat):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(flat))
    return path


@pytest.mark.parametrize("name", ["toy_config.yaml", "full_config.yaml"])
def test_shipped_configs_load(name):
    cfg = load_run_config(CONFIG_DIR / name)
    assert cfg.model.hop_length == 320
    assert Path(cfg.data.manifest).is_absolute()


def test_toy_scale_fills_unset_widths():
    cfg = load_run_config(CONFIG_DIR / "toy_config.yaml")
    for key, value in TOY_DEFAULTS.items():
        assert getattr(cfg.model, key) == value
    assert cfg.segment_samples == 20480


def test_toy_scale_keeps_explicit_widths():
    cfg = config_from_flat({"model.toy_scale": True, "model.codebook_size": 32})
    assert cfg.model.codebook_size == 32
    assert cfg.model.base_channels == TOY_DEFAULTS["base_channels"]


@pytest.mark.parametrize("flat", [
    {"model.codebok_size": 8},
    {"loss.rec": "heavy"},
    {"train.seed": -1},
    {"anon.selection": "nearest"},
    {"model.mel.n_mels": 40},
    {"model.strides": [2, 4, 5, 4]},
    {"model.strides": [2, 4, 40]},
])
def test_invalid_values_are_rejected(flat):
    with pytest.raises(ConfigInvalidError):
        config_from_flat(flat)


@pytest.mark.parametrize("flat", [
    {"model": {"codebook_size": 8}},
    {"seed": 3},
    {"train.seed": 1, "train": 2},
])
def test_keys_must_be_flat_and_dotted(flat):
    with pytest.raises(ConfigInvalidError):
        unflatten_dict(flat)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "conf").mkdir()
    path = tmp_path / "conf" / "run.yaml"
    path.write_text(yaml.safe_dump({"data.manifest": "../data/m.jsonl", "anon.pool": "/abs/pool.spkp"}))

    cfg = load_run_config(path)

    assert cfg.data.manifest == str((tmp_path / "data" / "m.jsonl").resolve())
    assert cfg.anon.pool == "/abs/pool.spkp"
    assert cfg.train.out_dir == str((tmp_path / "conf" / "runs" / "toy").resolve())


def test_flat_echo_round_trips(tiny_cfg, tmp_path):
    assert config_from_flat(tiny_cfg.flat()) == tiny_cfg

    save_run_config(tiny_cfg, tmp_path / "echo.yaml")
    assert load_run_config(tmp_path / "echo.yaml").model == tiny_cfg.model


def test_with_seed_sets_both_streams(tiny_cfg):
    cfg = tiny_cfg.with_seed(11)
    assert cfg.train.seed == 11 and cfg.anon.seed == 11
    assert tiny_cfg.with_seed(None) is tiny_cfg


def test_missing_or_malformed_files(tmp_path):
    with pytest.raises(ConfigInvalidError, match="not found"):
        load_run_config(tmp_path / "absent.yaml")

    (tmp_path / "list.yaml").write_text("- a\n- b\n")
    with pytest.raises(ConfigInvalidError):
        load_run_config(tmp_path / "list.yaml")

    (tmp_path / "broken.yaml").write_text("model.strides: [2, 4\n")
    with pytest.raises(ConfigInvalidError):
        load_run_config(tmp_path / "broken.yaml")


def test_empty_file_gives_defaults(tmp_path):
    path = _write(tmp_path, {})
    cfg = load_run_config(path)
    assert cfg.model.codebook_size == 256
    assert cfg.anon.alpha == 0.9
