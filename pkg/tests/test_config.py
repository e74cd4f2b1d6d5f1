import re

import pytest

from physrep.config import (
    DEFAULTS,
    ConfigError,
    config_hash,
    dataset_hash,
    load_config,
    pretrain_config,
    pretrain_hash,
    probe_config,
    probe_hash,
)


def test_defaults_load_and_build_stage_configs():
    cfg = load_config(environ={})
    assert cfg == DEFAULTS
    pre = pretrain_config(cfg, "jepa")
    assert pre.epochs == 6 and pre.vicreg.mu == 40.0 and pre.encoder.embed_dim == 64
    assert probe_config(cfg).epochs == 100
    assert cfg["probe"]["fractions"] == [0.1, 0.5, 1.0] and len(cfg["probe"]["seeds"]) >= 3


def test_file_then_env_then_set_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("probe:\n  epochs: 7\n  lr: 0.01\nseed: 3\n")
    env = {"PHYSREP_PROBE__EPOCHS": "9", "PHYSREP_PRETRAIN__VICREG__MU": "0", "HOME": "/x"}
    cfg = load_config(path, ["probe.lr=0.5"], environ=env)
    assert cfg["probe"]["epochs"] == 9
    assert cfg["probe"]["lr"] == 0.5
    assert cfg["pretrain"]["vicreg"]["mu"] == 0
    assert cfg["seed"] == 3


@pytest.mark.parametrize(
    "overrides, env, message",
    [
        (["probe.nope=1"], {}, "unknown config key 'probe.nope'"),
        ([], {"PHYSREP_PROBE__EPOCHS": "abc"}, "probe.epochs' expects int"),
        (["dataset.splits=[0.5, 0.5, 0.5]"], {}, "splits"),
        (["pretrain.methods=[byol]"], {}, "methods"),
        (["probe.fractions=[0.0, 1.0]"], {}, "fractions"),
        (["pretrain"], {}, "section.key=value"),
        (["pretrain=3"], {}, "section"),
    ],
)
def test_config_errors(overrides, env, message):
    with pytest.raises(ConfigError, match=re.escape(message)):
        load_config(None, overrides, environ=env)


def test_unknown_file_key(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("dataset:\n  gird: 16\n")
    with pytest.raises(ConfigError, match="dataset.gird"):
        load_config(path, environ={})


def test_config_hash_is_stable_64_bit():
    h = config_hash({"b": 1, "a": [1, 2]})
    assert re.fullmatch(r"[0-9a-f]{16}", h)
    assert h == config_hash({"a": [1, 2], "b": 1})


def test_stage_hashes_chain_downstream_only():
    base = load_config(environ={})
    probe_change = load_config(None, ["probe.epochs=5"], environ={})
    data_change = load_config(None, ["dataset.grid=16"], environ={})
    assert pretrain_hash(base, "advdiff", "jepa") == pretrain_hash(probe_change, "advdiff", "jepa")
    assert probe_hash(base, "advdiff", "jepa") != probe_hash(probe_change, "advdiff", "jepa")
    assert dataset_hash(base, "advdiff") != dataset_hash(data_change, "advdiff")
    assert probe_hash(base, "advdiff", "jepa") != probe_hash(data_change, "advdiff", "jepa")
    assert pretrain_hash(base, "advdiff", "jepa") != pretrain_hash(base, "advdiff", "mae")
