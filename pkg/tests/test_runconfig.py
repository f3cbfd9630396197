import pytest

from f2p import runconfig
from f2p.errors import ConfigError


def test_defaults_and_seed_propagation():
    cfg = runconfig.load(overrides=[("seed", "5")])
    assert cfg.fusion.seed == cfg.embed.seed == cfg.finetune.seed == 5
    cfg = runconfig.load(overrides=[("seed", "5"), ("embed.seed", "9")])
    assert cfg.embed.seed == 9 and cfg.fusion.seed == 5


def test_typed_overrides():
    cfg = runconfig.load(overrides=[("spatial_transform", "yes"), ("fusion.encoder_channels", "4, 8, 8"),
                                    ("pre.rg_threshold", "auto"), ("finetune.lr", "2e-5"), ("dim", "256")])
    assert cfg.spatial_transform is True
    assert cfg.fusion.encoder_channels == (4, 8, 8)
    assert cfg.pre.rg_threshold == "auto"
    assert cfg.finetune.lr == 2e-5
    assert cfg.embed.dim == 256


def test_unknown_and_bad_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        runconfig.load(overrides=[("fusion.bogus", "1")])
    with pytest.raises(ConfigError, match="unknown config section"):
        runconfig.load(overrides=[("nope.x", "1")])
    with pytest.raises(ConfigError, match="unknown config key"):
        runconfig.load(overrides=[("bogus", "1")])
    with pytest.raises(ConfigError, match="bad value"):
        runconfig.load(overrides=[("seed", "abc")])
    with pytest.raises(ConfigError):
        runconfig.load(overrides=[("dim", "64")])
    with pytest.raises(ConfigError):
        runconfig.parse_pairs("just a line")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        runconfig.load(tmp_path / "none.cfg")


def test_dump_roundtrip(tmp_path):
    cfg = runconfig.load(overrides=[("seed", "3"), ("synth.n_ids", "6"), ("embed.margin", "0.3"),
                                    ("spatial_transform", "true")])
    path = runconfig.write_resolved(cfg, tmp_path)
    back = runconfig.load(path)
    assert back == cfg
    assert runconfig.dump(back) == path.read_text()


def test_shipped_configs_load():
    for name in ("desk.cfg", "smoke.cfg"):
        cfg = runconfig.load(f"configs/{name}")
        assert cfg.dim in (128, 256)
