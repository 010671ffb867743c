"""Command-line surface: argument handling, exit codes, and the generate
command's reproducibility."""

import filecmp
import os

import yaml

from casediag.cli import main

GEN = {
    "seed": 3,
    "generate": {"n_classes": 3, "n_cases": 12, "height": 16, "width": 16,
                 "depth": 4, "normal_rate": 0.2},
}


def write_cfg(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_bare_invocation_prints_help_and_exits_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().out.lower()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"trian": {"epochs": 2}})
    code = main(["train", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 2
    assert "trian" in capsys.readouterr().err


def test_train_without_manifest_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"train": {"epochs": 2, "warmup_epochs": 0}})
    code = main(["train", "--config", cfg, "--out", str(tmp_path / "out")])
    assert code == 2
    assert "manifest" in capsys.readouterr().err


def test_zeroshot_requires_mapping(tmp_path, capsys):
    cfg = write_cfg(tmp_path, GEN)
    code = main(["zeroshot", "--config", cfg, "--out", str(tmp_path / "out"),
                 "--checkpoint", str(tmp_path / "model.pt")])
    assert code == 2
    assert "mapping" in capsys.readouterr().err


def test_generate_refuses_nonempty_out_without_force(tmp_path, capsys):
    cfg = write_cfg(tmp_path, GEN)
    out = tmp_path / "corpus"
    out.mkdir()
    (out / "stale.txt").write_text("old artifacts")
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 2
    assert "force" in capsys.readouterr().err.lower()
    assert main(["generate", "--config", cfg, "--out", str(out), "--force"]) == 0
    assert (out / "manifest.jsonl").exists()


def test_generate_is_byte_identical_across_runs(tmp_path):
    cfg = write_cfg(tmp_path, GEN)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["generate", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["generate", "--config", cfg, "--out", str(out_b)]) == 0

    names_a = sorted(
        os.path.relpath(os.path.join(r, f), out_a)
        for r, _, files in os.walk(out_a) for f in files if f != ".lock"
    )
    names_b = sorted(
        os.path.relpath(os.path.join(r, f), out_b)
        for r, _, files in os.walk(out_b) for f in files if f != ".lock"
    )
    assert names_a == names_b
    mismatched = [
        n for n in names_a
        if n != "resolved_config.yaml" and not filecmp.cmp(out_a / n, out_b / n, shallow=False)
    ]
    assert mismatched == []


def test_generate_writes_resolved_config(tmp_path):
    cfg = write_cfg(tmp_path, GEN)
    out = tmp_path / "c"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["generate"]["n_cases"] == 12
    assert resolved["seed"] == 3
    assert resolved["out"] == str(out)


def test_seed_flag_changes_generated_voxels(tmp_path):
    cfg = write_cfg(tmp_path, GEN)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["generate", "--config", cfg, "--out", str(out_a)]) == 0
    assert main(["generate", "--config", cfg, "--out", str(out_b), "--seed", "4"]) == 0
    import numpy as np

    voxels_a = sorted((out_a / "voxels").iterdir())
    voxels_b = sorted((out_b / "voxels").iterdir())
    diff = any(
        a.name != b.name or not np.array_equal(np.load(a), np.load(b))
        for a, b in zip(voxels_a, voxels_b)
    )
    assert diff
