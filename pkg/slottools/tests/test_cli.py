import json
import os

import pandas as pd
import pytest

from .. import cli
from ..config import ConfigError
from ..config import save_config


@pytest.fixture()
def config_file(tmp_path, tiny_config):
    path = str(tmp_path / "tiny.json")
    save_config(tiny_config, path)
    return path


@pytest.fixture()
def trained(tmp_path, config_file):
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", config_file, "--out", out, "--quiet"]) == 0
    return out


def test_choose_codebook_size_reference_log():
    history = [(256, 176.9), (512, 253.9), (1024, 242.8)]
    assert cli.choose_codebook_size(history[:2]) is None
    assert cli.choose_codebook_size(history) == 512


@pytest.mark.parametrize(
    "history,expected",
    [
        ([(64, 10.0), (128, 10.5)], 128),
        ([(64, 10.0), (128, 9.0)], 64),
        ([(64, 10.0), (128, 20.0), (256, 21.0)], 256),
        ([(64, 10.0)], None),
    ],
)
def test_choose_codebook_size(history, expected):
    assert cli.choose_codebook_size(history) == expected


def test_search_stops_at_plateau():
    measured = []
    table = {64: 30.0, 128: 50.0, 256: 52.0, 512: 80.0}

    def measure(size):
        measured.append(size)
        return table[size]

    chosen, plateaued, history = cli.search_codebook_size(measure, 64, 1024)
    assert (chosen, plateaued) == (256, True)
    assert measured == [64, 128, 256]
    assert history[-1] == (256, 52.0)


def test_search_without_plateau_picks_largest():
    chosen, plateaued, history = cli.search_codebook_size(lambda size: float(size), 64, 256)
    assert (chosen, plateaued) == (256, False)
    assert [h[0] for h in history] == [64, 128, 256]


def test_search_needs_two_sizes():
    with pytest.raises(ConfigError):
        cli.search_codebook_size(lambda size: 1.0, 64, 100)


def test_content_hash_is_git_blob_hash():
    assert cli.content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["transmogrify"],
        ["train", "--bogus"],
        ["eval"],
    ],
)
def test_usage_errors_exit_one(argv):
    assert cli.main(argv) == 1


def test_missing_config_exits_one(tmp_path):
    assert cli.main(["flops", "--config", str(tmp_path / "missing.json")]) == 1


def test_flops_command(tmp_path, config_file, capsys):
    out = str(tmp_path / "flops")
    assert cli.main(["flops", "--config", config_file, "--out", out]) == 0
    assert "overhead" in capsys.readouterr().out
    table = pd.read_csv(os.path.join(out, "flops.csv"))
    assert (table["analytic"] == table["runtime"]).all()
    with open(os.path.join(out, "manifest.json")) as f:
        assert sorted(json.load(f)["layout"]) == ["flops.csv", "flops.txt"]


def test_train_writes_manifest(trained):
    with open(os.path.join(trained, "manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["command"] == "train"
    assert manifest["config"]["n_slots"] == 3
    assert len(manifest["config_hash"]) == 64
    assert {"loss.csv", "eval.csv", "config.json", os.path.join("checkpoints", "final.ckpt")} <= set(manifest["layout"])
    assert manifest["finished"] >= manifest["started"]


def test_eval_command(tmp_path, trained):
    out = str(tmp_path / "eval")
    checkpoint = os.path.join(trained, "checkpoints", "final.ckpt")
    assert cli.main(["eval", "--checkpoint", checkpoint, "--out", out, "--scenes", "2", "--quiet"]) == 0
    summary = pd.read_csv(os.path.join(out, "summary.csv"))
    assert list(summary["slots"]) == ["modulated", "unmodulated"]
    assert list(summary.columns) == ["slots", "fg_ari", "mbo_i", "mbo_c", "miou"]
    assert len(pd.read_csv(os.path.join(out, "per_scene.csv"))) == 2


def test_eval_reading_and_mask_options(tmp_path, trained):
    checkpoint = os.path.join(trained, "checkpoints", "final.ckpt")
    argv = ["eval", "--checkpoint", checkpoint, "--out", str(tmp_path / "e"), "--scenes", "1", "--quiet"]
    assert cli.main(argv + ["--mbo-mode", "per-pred", "--last-block-masks"]) == 0


def test_visualize_commands(tmp_path, trained):
    checkpoint = os.path.join(trained, "checkpoints", "final.ckpt")
    out = str(tmp_path / "viz")
    assert cli.main(["visualize", "--checkpoint", checkpoint, "--out", out, "--scenes", "2", "--sample-id", "1"]) == 0
    assert os.path.isfile(os.path.join(out, "sample1", "pred_mask.ppm"))
    assert cli.main(["visualize", "--checkpoint", checkpoint, "--out", out, "--scenes", "2", "--sample-id", "5"]) == 2
    concepts = str(tmp_path / "concepts")
    assert cli.main(["visualize", "--checkpoint", checkpoint, "--out", concepts, "--scenes", "2", "--codebook", "--quiet"]) == 0
    assert os.path.isfile(os.path.join(concepts, "concepts.csv"))


def test_codebook_command(tmp_path, trained):
    out = str(tmp_path / "codes")
    checkpoint = os.path.join(trained, "checkpoints", "final.ckpt")
    assert cli.main(["codebook", "--checkpoint", checkpoint, "--out", out, "--scenes", "2", "--quiet"]) == 0
    report = pd.read_csv(os.path.join(out, "codebook.csv"))
    assert len(report) == 4
    assert report["usage_count"].sum() == 2 * 3


def test_missing_checkpoint_exits_two(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "e")]) == 2


def test_gen_and_train_from_disk(tmp_path, config_file):
    data = str(tmp_path / "data")
    assert cli.main(["gen", "--config", config_file, "--out", data, "--train-scenes", "3", "--eval-scenes", "2", "--quiet"]) == 0
    assert os.path.isfile(os.path.join(data, "manifest.json"))
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", config_file, "--out", out, "--data", data, "--steps", "2", "--quiet"]) == 0


def test_dataset_shape_mismatch_exits_two(tmp_path, tiny_config):
    other = str(tmp_path / "other.json")
    save_config(tiny_config.replace(height=6), other)
    data = str(tmp_path / "data")
    assert cli.main(["gen", "--config", other, "--out", data, "--train-scenes", "2", "--eval-scenes", "1", "--quiet"]) == 0
    tiny = str(tmp_path / "tiny.json")
    save_config(tiny_config, tiny)
    assert cli.main(["train", "--config", tiny, "--out", str(tmp_path / "run"), "--data", data, "--quiet"]) == 2


def test_ablate_command(tmp_path, config_file):
    out = str(tmp_path / "ablation")
    assert cli.main(["ablate", "--config", config_file, "--out", out, "--steps", "1", "--seeds", "0", "1", "--quiet"]) == 0
    table = pd.read_csv(os.path.join(out, "ablation.csv"))
    assert list(table["variant"]) == ["baseline", "m_c+m_s+shift", "m_s+shift", "m_c+vq+m_s", "m_c+vq", "full"]
    assert len(pd.read_csv(os.path.join(out, "ablation_per_seed.csv"))) == 12
    assert os.path.isfile(os.path.join(out, "ablation.txt"))


def test_iterations_command(tmp_path, config_file):
    out = str(tmp_path / "iterations")
    assert cli.main(["iterations", "--config", config_file, "--out", out, "--steps", "1", "--quiet"]) == 0
    table = pd.read_csv(os.path.join(out, "iterations.csv"))
    assert list(table["variant"]) == ["baseline_T2", "baseline_T4", "full_T2"]


def test_select_codebook_size_command(tmp_path, config_file):
    out = str(tmp_path / "codebook_size")
    assert cli.main(["select-codebook-size", "--config", config_file, "--out", out, "--quiet"]) == 0
    table = pd.read_csv(os.path.join(out, "perplexity.csv"))
    assert table["chosen"].sum() == 1
    assert set(table["codebook_size"]) <= {2, 4, 8}


def test_unexpected_errors_exit_two(monkeypatch, config_file, capsys):
    def broken(args):
        raise ValueError("shapes do not line up")

    monkeypatch.setattr(cli, "cmd_flops", broken)
    assert cli.main(["flops", "--config", config_file]) == 2
    assert "shapes do not line up" in capsys.readouterr().err


def test_negative_seed_exits_one(config_file):
    assert cli.main(["flops", "--config", config_file, "--seed", "-1", "--no-measure"]) == 1


def test_train_is_reproducible(tmp_path, config_file):
    logs = []
    for name in ("first", "second"):
        out = str(tmp_path / name)
        assert cli.main(["train", "--config", config_file, "--out", out, "--seed", "3", "--no-eval", "--quiet"]) == 0
        with open(os.path.join(out, "loss.csv"), "rb") as f:
            logs.append(f.read())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) > 1
