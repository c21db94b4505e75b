import pytest
import yaml

from univit.config import SEED_ENV, ConfigError, RunConfig, config_from_dict, load_config
from univit.training import STAGE1, STAGE2, STAGE3


def test_defaults_and_roundtrip(tmp_path):
    cfg = load_config(None, env={})
    assert cfg == RunConfig()
    p = tmp_path / "c.yaml"
    p.write_text(cfg.to_yaml())
    assert load_config(p, env={}) == cfg


def test_partial_document_fills_defaults():
    cfg = config_from_dict({"encoder": {"depth": 2}, "optim": {"lr": 3e-4}}, env={})
    assert cfg.encoder.depth == 2 and cfg.encoder.d == RunConfig().encoder.d
    assert cfg.optim.lr == 3e-4


@pytest.mark.parametrize("raw, where", [
    ({"encoderr": {}}, "encoderr"),
    ({"encoder": {"dpeth": 2}}, "encoder.dpeth"),
    ({"objective": {"lam": 0.1, "lamda": 1}}, "objective.lamda"),
])
def test_unknown_key_named(raw, where):
    with pytest.raises(ConfigError, match=f"'{where}'"):
        config_from_dict(raw, env={})


@pytest.mark.parametrize("raw", [
    {"encoder": {"depth": "two"}},
    {"encoder": {"depth": 2.5}},
    {"optim": {"lr": "fast"}},
    {"encoder": 3},
    {"optim": {"lr": -1.0}},
])
def test_bad_values_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw, env={})


def test_int_accepted_for_float():
    assert config_from_dict({"optim": {"lr": 1}}, env={}).optim.lr == 1.0


def test_seed_env_override_logged(caplog):
    cfg = config_from_dict({"seed": 3}, env={SEED_ENV: "11"})
    assert cfg.seed == 11
    assert SEED_ENV in caplog.text
    with pytest.raises(ConfigError):
        config_from_dict({}, env={SEED_ENV: "x"})


def test_stage_config_resolution():
    cfg = RunConfig(seed=5)
    s1 = cfg.stage_config("stage1")
    assert s1.stage == STAGE1 and s1.batch_3d == 0 and s1.seed == 5
    s2 = cfg.stage_config("stage2", "a.ckpt")
    assert s2.stage == STAGE2 and s2.init == "from_checkpoint" and s2.init_from == "a.ckpt"
    assert cfg.stage_config().stage == STAGE3
    with pytest.raises(ConfigError):
        cfg.stage_config("stage2")
    with pytest.raises(ConfigError):
        cfg.stage_config("stage9")


def test_yaml_is_plain():
    doc = yaml.safe_load(RunConfig().to_yaml())
    assert set(doc) == {"seed", "encoder", "views", "objective", "stage", "optim", "data", "eval"}


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("encoder: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p, env={})


def test_patch_sizes_must_agree():
    with pytest.raises(ConfigError, match="patch"):
        config_from_dict({"encoder": {"patch": 4}}, env={})
