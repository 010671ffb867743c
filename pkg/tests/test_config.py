"""Run configuration: YAML loading, unknown-key rejection, flag overrides,
and the resolved snapshot."""

import pytest
import yaml

from casediag.config import (
    RunConfig,
    apply_overrides,
    build_config,
    load_config,
    resolved_dict,
    write_resolved,
)
from casediag.errors import UsageError


def test_empty_config_is_all_defaults():
    cfg = build_config({})
    assert cfg.seed == 0
    assert cfg.level == "disorder"
    assert cfg.encoder.variant == "resnet_vit_mix"
    assert cfg.train.epochs == 100
    assert cfg.fusion.max_scans == 30


def test_unknown_top_level_key_rejected():
    with pytest.raises(UsageError, match="wheels"):
        build_config({"wheels": 4})


def test_unknown_nested_key_names_full_path():
    with pytest.raises(UsageError, match=r"train\.momentum"):
        build_config({"train": {"momentum": 0.9}})


def test_geometry_owned_keys_rejected_in_encoder_section():
    for key in ("height", "width", "depth"):
        with pytest.raises(UsageError, match=f"encoder.{key}"):
            build_config({"encoder": {key: 128}})


def test_embed_dim_owned_by_encoder():
    with pytest.raises(UsageError, match=r"fusion\.embed_dim"):
        build_config({"fusion": {"embed_dim": 64}})
    with pytest.raises(UsageError, match=r"knowledge\.embed_dim"):
        build_config({"knowledge": {"embed_dim": 64}})
    cfg = build_config({"encoder": {"embed_dim": 64}})
    assert cfg.fusion.embed_dim == 64
    assert cfg.knowledge.embed_dim == 64


def test_geometry_propagates_to_encoder():
    cfg = build_config({"geometry": {"height": 64, "width": 64, "depth": 8}})
    assert (cfg.encoder.height, cfg.encoder.width, cfg.encoder.depth) == (64, 64, 8)


def test_yaml_lists_coerce_to_tuples():
    cfg = build_config({
        "augment": {"noise_sigma": [0.02, 0.04], "gamma": [0.8, 1.2]},
        "encoder": {"cube_size": [16, 16, 4], "patch_size": 16},
    })
    assert cfg.augment.noise_sigma == (0.02, 0.04)
    assert cfg.augment.gamma == (0.8, 1.2)
    assert cfg.encoder.cube_size == (16, 16, 4)


def test_invalid_section_value_carries_path():
    with pytest.raises(UsageError, match="train"):
        build_config({"train": {"peak_lr": -1.0}})


def test_bad_level_rejected():
    with pytest.raises(UsageError):
        build_config({"level": "organ"})


def test_non_mapping_root_rejected():
    with pytest.raises(UsageError):
        build_config([1, 2, 3])
    with pytest.raises(UsageError):
        build_config({"train": [1]})


def test_overrides_win_over_file_values(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 1, "train": {"epochs": 50, "warmup_epochs": 2}}))
    cfg = load_config(path, {"seed": 9, "train.epochs": 60})
    assert cfg.seed == 9
    assert cfg.train.epochs == 60
    assert cfg.train.warmup_epochs == 2  # untouched file value survives


def test_override_onto_scalar_path_rejected():
    with pytest.raises(UsageError):
        apply_overrides({"seed": 3}, {"seed.deep": 1})


def test_missing_config_file_rejected(tmp_path):
    with pytest.raises(UsageError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_invalid_yaml_rejected(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("train: [unclosed\n")
    with pytest.raises(UsageError, match="YAML"):
        load_config(path)


def test_resolved_snapshot_round_trips(tmp_path):
    cfg = build_config({
        "seed": 7,
        "geometry": {"height": 64, "width": 64, "depth": 8},
        "encoder": {"variant": "resnet_vit_mix", "embed_dim": 64, "patch_size": 16,
                    "cube_size": [16, 16, 4]},
        "train": {"epochs": 30, "warmup_epochs": 3},
    })
    write_resolved(cfg, tmp_path)
    snapshot = tmp_path / "resolved_config.yaml"
    assert snapshot.exists()
    reloaded_raw = yaml.safe_load(snapshot.read_text())
    # strip owned keys the snapshot spells out before rebuilding
    for section, keys in (("encoder", ("height", "width", "depth")),
                          ("fusion", ("embed_dim",)), ("knowledge", ("embed_dim",))):
        for k in keys:
            reloaded_raw[section].pop(k)
    reloaded = build_config(reloaded_raw)
    assert resolved_dict(reloaded) == resolved_dict(cfg)


def test_resolved_dict_is_yaml_safe():
    plain = resolved_dict(RunConfig())
    dumped = yaml.safe_dump(plain)
    assert yaml.safe_load(dumped) == plain
