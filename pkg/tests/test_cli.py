from __future__ import annotations

import json
import struct

import pytest

from cgdl import cli
from cgdl.checkpoint import load_checkpoint
from cgdl.errors import ConfigError


def test_resolve_config_precedence():
    msgs = []
    cfg = cli.resolve_config(
        "train",
        file_values={"epochs": 5, "learning_rate": 0.01, "layer_dims": [8, 4]},
        env={"CGDL_EPOCHS": "7", "CGDL_LADDER": "false"},
        flag_values={"epochs": "9"},
        report=msgs.append,
    )
    assert cfg.epochs == 9 and cfg.learning_rate == 0.01 and cfg.layer_dims == [8, 4]
    assert cfg.ladder is False
    assert len(msgs) == 2 and "environment" in msgs[0] and "flags" in msgs[1]


def test_resolve_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown config keys"):
        cli.resolve_config("eval", flag_values={"epochs": 3}, env={})
    with pytest.raises(ConfigError):
        cli.resolve_config("train", flag_values={"epochs": "many"}, env={})
    with pytest.raises(ConfigError):
        cli.resolve_config("train", flag_values={"ladder": "1"}, env={})


def _gen(tmp_path, seed=0):
    out = tmp_path / "data"
    rc = cli.main(["gen-data", "--out", str(out), "--seed", str(seed), "--set", "per_class=36",
                   "--set", "unseen_count=20", "--set", "noise_count=20", "--set", "image_side=8"])
    assert rc == 0
    return out


def _train(tmp_path, data, name="run", extra=()):
    out = tmp_path / name
    rc = cli.main(["train", "--out", str(out), "--set", f"data_dir={data}", "--set", "epochs=25",
                   "--set", "learning_rate=0.005", "--set", "batch_size=16",
                   "--set", "layer_dims=[16, 8]", "--set", "latent_dim=4", *extra])
    return rc, out


def test_full_pipeline(tmp_path, capsys):
    data = _gen(tmp_path)
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["sets"]["train"]["num_samples"] == 4 * 30
    assert manifest["sets"]["test"]["num_samples"] == 4 * 6
    rc, run = _train(tmp_path, data)
    assert rc == 0
    assert {p.name for p in run.iterdir()} == {"model.ckpt", "train_log.csv", "run.json"}
    ck = load_checkpoint(run / "model.ckpt")
    assert ck.detector is not None and ck.run_config["epochs"] == 25 and "out" not in ck.run_config
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--out", str(ev), "--set", f"checkpoint={run / 'model.ckpt'}",
                     "--set", f"data_dir={data}"]) == 0
    rep = json.loads((ev / "report.json").read_text())["report"]
    assert rep["macro_f1_classes"] == 5 and rep["num_unknown_samples"] == 40
    rows = (ev / "confusion.csv").read_text().splitlines()
    assert rows[0].startswith("truth,") and len(rows) == 6
    lat = tmp_path / "lat"
    assert cli.main(["export-latents", "--out", str(lat), "--set", f"checkpoint={run / 'model.ckpt'}",
                     "--set", f"data_dir={data}"]) == 0
    assert len((lat / "latents-test.csv").read_text().splitlines()) == 25
    assert "closed-set accuracy" in capsys.readouterr().out


def test_eval_detector_override(tmp_path):
    data = _gen(tmp_path)
    _, run = _train(tmp_path, data)
    ev = tmp_path / "ev"
    assert cli.main(["eval", "--out", str(ev), "--set", f"checkpoint={run / 'model.ckpt'}",
                     "--set", f"data_dir={data}", "--set", "detector=re"]) == 0
    assert json.loads((ev / "report.json").read_text())["report"]["detector"] == "re"


def test_config_file_and_exit_codes(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data_dir: {data}\nepochs: 2\nbogus: 1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert cli.main(["train", "--out", str(tmp_path / "y"),
                     "--set", f"data_dir={tmp_path / 'missing'}"]) == cli.EXIT_IO
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"CGDLCKPT" + struct.pack("<IQ", 99, 0))
    assert cli.main(["eval", "--out", str(tmp_path / "e"), "--set", f"checkpoint={bad}",
                     "--set", f"data_dir={data}"]) == cli.EXIT_CHECKPOINT
    rc, _ = _train(tmp_path, data, "z", ("--set", "learning_rate=1e9"))
    assert rc == cli.EXIT_DIVERGED
    assert cli.main(["ablate", "--set", "variants=[\"VIII\"]"]) == cli.EXIT_CONFIG


def test_ablate_command(tmp_path):
    out = tmp_path / "abl"
    rc = cli.main(["ablate", "--out", str(out), "--set", "num_seeds=1", "--set", "variants=[\"IV\", \"VII\"]",
                   "--set", "unknown_counts=[1]", "--set", "pool_classes=4", "--set", "num_known=3",
                   "--set", "per_class=24", "--set", "image_side=8", "--set", "layer_dims=[16, 8]",
                   "--set", "latent_dim=4", "--set", "epochs=20", "--set", "learning_rate=0.005",
                   "--set", "batch_size=16"])
    assert rc == 0
    assert {p.name for p in out.iterdir()} >= {"ablation_cells.csv", "ablation_table.csv",
                                               "ablation_summary.json", "run.json"}
