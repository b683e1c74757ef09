"""JSON experiment configuration."""

import json

import pytest

from pewire.config import ExperimentConfig, load_config
from pewire.data import synthetic_quadrant, synthetic_stats
from pewire.errors import ConfigError
from pewire.model import DEIT_TI, TOY_TI


def test_defaults():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.model == TOY_TI.__class__(**{**TOY_TI.to_dict(), "num_classes": 4})
    assert cfg.primary_wiring.preset_string() == "mpvg"
    assert cfg.data.kind == "synthetic-quadrant"
    assert cfg.data.mean == (synthetic_stats(32, 4)[0],)
    assert (cfg.optim.epochs, cfg.optim.batch_size, cfg.optim.lr, cfg.optim.warmup_epochs) == (50, 128, 5e-4, 5)
    assert cfg.optim.weight_decay == 0.05
    assert cfg.seed == 0 and cfg.out_dir is None


def test_synthetic_stats_are_exact():
    # 63 of 64 patches hold background levels 0..15, one holds 255
    mean, std = synthetic_stats(32, 4)
    assert mean == pytest.approx((63 / 64 * 7.5 + 255 / 64) / 255)
    second = 63 / 64 * sum(k * k for k in range(16)) / 16 + 255 ** 2 / 64
    assert std == pytest.approx((second - (mean * 255) ** 2) ** 0.5 / 255)


def test_synthetic_stats_match_generated_pixels():
    raw, _ = synthetic_quadrant(4000, 3)
    mean, std = synthetic_stats(32, 4)
    assert raw.mean() / 255 == pytest.approx(mean, abs=1e-3)
    assert raw.std() / 255 == pytest.approx(std, abs=1e-3)


def test_preset_keeps_its_classes():
    cfg = ExperimentConfig.from_dict({"model": {"preset": "deit-ti"}, "data": {"image_size": 224, "patch_size": 16}})
    assert cfg.model == DEIT_TI


def test_round_trip_and_digest():
    raw = {"model": {"num_layers": 2}, "wiring": ["pvg", "mpvg,last=1"], "optim": {"epochs": 3, "warmup_epochs": 1}, "seed": 4}
    cfg = ExperimentConfig.from_dict(raw)
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.digest() == cfg.digest()
    assert cfg.to_json().endswith("}\n") and '"data": {' in cfg.to_json()


def test_overrides():
    cfg = ExperimentConfig.from_dict({}).with_overrides(wiring="lape", seed=3, out_dir="x")
    assert (cfg.primary_wiring.preset_string(), cfg.seed, cfg.out_dir) == ("lape", 3, "x")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"num_layers": 2}}).with_overrides(wiring="mpvg,last=5")


@pytest.mark.parametrize("raw", [
    {"modle": {}},
    {"model": {"depth": 3}},
    {"model": {"preset": "deit-xl"}},
    {"data": {"kind": "svhn"}},
    {"data": {"image_size": 16}},
    {"model": {"num_classes": 2}, "data": {"num_classes": 4}},
    {"model": {"embed_dim": 64.5}},
    {"optim": {"freeze_pe_zero": 1}},
    {"wiring": []},
    {"wiring": 3},
    {"wiring": "mpvg,last=9"},
    {"optim": {"epochs": 0}},
    {"optim": {"warmup_epochs": 60}},
    {"optim": {"lr": "fast"}},
    {"gradcheck": {"tolerance": 1}},
    {"seed": -1},
    {"seed": True},
    {"out_dir": 5},
    [],
])
def test_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_optional_sizes_accept_null():
    cfg = ExperimentConfig.from_dict({"data": {"kind": "cifar10-binary", "train_size": None}, "model": {"num_classes": 10}})
    assert cfg.data.train_size is None


def test_scalar_normalisation_promoted():
    cfg = ExperimentConfig.from_dict({"data": {"mean": 0.5, "std": 0.25}})
    assert cfg.data.mean == (0.5,) and cfg.data.std == (0.25,)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"seed\": ,\n}")
    with pytest.raises(ConfigError, match="line 2"):
        load_config(bad)
    assert load_config(None) == ExperimentConfig.from_dict({})
