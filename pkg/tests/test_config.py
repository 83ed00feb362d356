import json

import pytest
import yaml

from fedmim import config
from fedmim.config import ConfigError


def _write(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def test_packaged_default_loads():
    cfg = config.load(config.default_config_path())
    assert cfg.vit.patch_size == 8 and cfg.split.num_clients == 6
    assert cfg.seeds == (0, 1, 2) and len(cfg.tasks) == 6


def test_snapshot_roundtrip(tmp_path):
    cfg = config.load(config.default_config_path(), env={})
    p = tmp_path / "snap.yaml"
    p.write_text(cfg.snapshot())
    assert config.load(p, env={}) == cfg
    assert config.load(p, env={}).snapshot() == cfg.snapshot()


@pytest.mark.parametrize("raw,field", [
    ({"bogus": 1}, ""),
    ({"vit": {"patchsize": 8}}, "vit"),
    ({"vit": {"patch_size": "8"}}, "vit.patch_size"),
    ({"vit": {"patch_size": 6, "image_size": 32}}, "vit"),
    ({"vit": {"patch_size": 16, "image_size": 64}, "corpus": {"image_size": 32}}, "vit.image_size"),
    ({"corpus": {"scale": "huge"}}, "corpus.scale"),
    ({"corpus": {"image_size": 48}}, "corpus.image_size"),
    ({"corpus": {"path": "nowhere"}}, "corpus.path"),
    ({"split": {"mode": "ring"}}, "split.mode"),
    ({"split": {"ood_in_pretraining": "yes"}}, "split.ood_in_pretraining"),
    ({"fed": {"num_rounds": 1.5}}, "fed.num_rounds"),
    ({"tasks": ["MNIST"]}, "tasks"),
    ({"tasks": []}, "tasks"),
    ({"seeds": [-1]}, "seeds"),
    ({"seeds": [True]}, "seeds"),
    ({"finetune": {"seg_loss": "iou"}}, "finetune"),
])
def test_invalid_configs_name_the_field(tmp_path, raw, field):
    with pytest.raises(ConfigError) as exc:
        config.load(_write(tmp_path, raw), env={})
    assert exc.value.field_path == field
    payload = json.loads(exc.value.to_json())
    assert payload["error"] == "config" and payload["field"] == field


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("vit: [unclosed\n")
    with pytest.raises(ConfigError):
        config.load(bad)


def test_seed_environment_override(tmp_path):
    p = _write(tmp_path, {"seeds": [0, 1, 2]})
    assert config.load(p, env={"FEDMIM_SEED": "7"}).seeds == (7,)
    assert config.load(p, env={}).seeds == (0, 1, 2)
    with pytest.raises(ConfigError):
        config.load(p, env={"FEDMIM_SEED": "x"})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (tmp_path / "corp").mkdir()
    (tmp_path / "corp" / "corpus.json").write_text("{}")
    cfg = config.load(_write(sub, {"out": "../runs/x", "corpus": {"path": "../corp"}}), env={})
    assert cfg.out == str(tmp_path / "runs" / "x")
    assert cfg.corpus.path == str(tmp_path / "corp")


def test_vit_image_size_follows_corpus(tmp_path):
    cfg = config.load(_write(tmp_path, {"corpus": {"image_size": 64}, "vit": {"patch_size": 16}}), env={})
    assert cfg.vit.image_size == 64
