import csv
import subprocess
import sys

import numpy as np
import pytest

from gvdiff.cli import main, run_cli
from gvdiff.grounding import serialize_track
from gvdiff.io import read_video, write_mask, write_video

from conftest import random_track

CFG = "height = 8\nwidth = 8\nbase_width = 8\ntext_width = 16\ngrounded_width = 16\nnum_freqs = 4\nsteps = 2\n"


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("GVD_SEED", raising=False)
    (tmp_path / "c.cfg").write_text(CFG)
    (tmp_path / "t.json").write_bytes(serialize_track(random_track(0, num_frames=4)))
    return tmp_path


def _sample(out, *extra):
    return main(["sample", "--config", "c.cfg", "--track", "t.json", "--prompt", "a cat", "--out", out, *extra])


def test_sample_twice_byte_identical(work):
    assert _sample("a.gvdm", "--seed", "7") == 0
    assert _sample("b.gvdm", "--seed", "7") == 0
    assert (work / "a.gvdm").read_bytes() == (work / "b.gvdm").read_bytes()
    assert read_video(work / "a.gvdm").shape == (4, 4, 8, 8)


def test_env_seed_overrides_flag(work, monkeypatch):
    _sample("a.gvdm", "--seed", "7")
    monkeypatch.setenv("GVD_SEED", "7")
    _sample("b.gvdm", "--seed", "8")
    assert (work / "a.gvdm").read_bytes() == (work / "b.gvdm").read_bytes()


def test_gate_stats_one_row_per_layer(work):
    _sample("a.gvdm")
    assert main(["gate-stats", "--trace", "a.gvdm.gates.csv", "--out", "g.csv"]) == 0
    rows = list(csv.reader((work / "g.csv").open()))
    assert rows[0] == ["layer_index", "skip_percent", "samples"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
    assert all(0 <= float(r[1]) <= 100 and r[2] == "2" for r in rows[1:])
    svg = (work / "g.csv.svg").read_text()
    assert svg.startswith("<?xml") and "<dc:date>" not in svg


def test_gate_stats_chart_deterministic(work):
    _sample("a.gvdm")
    main(["gate-stats", "--trace", "a.gvdm.gates.csv", "--out", "g.csv", "--plot", "a.svg"])
    main(["gate-stats", "--trace", "a.gvdm.gates.csv", "--out", "g.csv", "--plot", "b.svg"])
    assert (work / "a.svg").read_bytes() == (work / "b.svg").read_bytes()


def test_missing_track(work, capsys):
    assert _sample("a.gvdm") == 0
    assert main(["sample", "--config", "c.cfg", "--track", "missing.json", "--out", "x"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_invalid_config_names_key(work, capsys):
    (work / "bad.cfg").write_text("steps = 2\nguidance = 3\n")
    assert main(["sample", "--config", "bad.cfg", "--track", "t.json", "--out", "x"]) == 1
    assert "guidance" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run_cli(["paint"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_process():
    res = subprocess.run([sys.executable, "-m", "gvdiff.cli", "paint"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr


def test_long_range_and_prompt_at(work):
    assert main(["long-range", "--config", "c.cfg", "--track", "t.json", "--window", "2",
                 "--total-frames", "4", "--prompt-at", "0:a cat", "--prompt-at", "3:a dog",
                 "--out", "lr.gvdm"]) == 0
    assert read_video(work / "lr.gvdm").shape == (4, 4, 8, 8)


def test_metrics(work):
    _sample("a.gvdm")
    assert main(["metrics", "--config", "c.cfg", "--video", "a.gvdm", "--prompt", "a cat",
                 "--track", "t.json", "--out", "m.csv"]) == 0
    rows = dict(list(csv.reader((work / "m.csv").open()))[1:])
    assert set(rows) == {"temporal_consistency", "prompt_consistency", "condition_similarity"}
    assert float(rows["condition_similarity"]) == 100.0


def test_composite(work, rng):
    bg, gen = rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(2, 4, 8, 8))
    write_video(work / "bg.gvdm", bg)
    write_video(work / "gen.gvdm", gen)
    mask = np.zeros((2, 8, 8))
    mask[:, 2:5, 2:5] = 1
    write_mask(work / "m.gvdm", mask)
    assert main(["composite", "--background", "bg.gvdm", "--generated", "gen.gvdm",
                 "--mask", "m.gvdm", "--out", "o.gvdm"]) == 0
    out = read_video(work / "o.gvdm")
    assert np.array_equal(out[:, :, 3, 3], read_video(work / "gen.gvdm")[:, :, 3, 3])
    assert np.array_equal(out[:, :, 0, 0], read_video(work / "bg.gvdm")[:, :, 0, 0])


def test_train_writes_checkpoint(work):
    (work / "c.cfg").write_text(CFG + "train_videos = 2\ntrain_frames = 2\nbatch_size = 2\n")
    assert main(["train", "--config", "c.cfg", "--stage", "base", "--train-steps", "2", "--out", "w.gvck"]) == 0
    assert (work / "w.gvck").read_bytes()[:4] == b"GVCK"
    assert _sample("a.gvdm", "--checkpoint", "w.gvck") == 0
