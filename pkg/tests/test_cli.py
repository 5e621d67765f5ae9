import json
import subprocess
import sys
from pathlib import Path

import pytest

from lencap import world
from lencap.cli import read_config_file, run

FIXTURES = Path(__file__).parent / "fixtures"
TINY_MODEL = ["--image-size", "64", "--patch", "16", "--d-model", "16", "--enc-layers", "1",
              "--dec-layers", "1", "--heads", "2"]


def test_gen_scenes(tmp_path, capsys):
    out = tmp_path / "scenes.jsonl"
    assert run(["gen-scenes", "--count", "100", "--seed", "1", "--out", str(out)]) == 0
    assert len(world.read_scenes(out)) == 100
    assert "resolved config" in capsys.readouterr().err


def test_bad_flags_exit_2(capsys):
    assert run(["gen-scenes", "--count", "x", "--out", "o"]) == 2
    assert run(["no-such-command"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert run(["stats", "--in", str(tmp_path / "missing.jsonl")]) == 1
    assert "lencap stats: error" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# scene generation\ncount = 7\nseed=3  # inline comment\nmax-objects=2\n")
    assert read_config_file(cfg) == {"count": "7", "seed": "3", "max_objects": "2"}
    out = tmp_path / "s.jsonl"
    assert run(["gen-scenes", "--config", str(cfg), "--out", str(out)]) == 0
    scenes = world.read_scenes(out)
    assert len(scenes) == 7 and all(len(s.objects) <= 2 for s in scenes)
    assert run(["gen-scenes", "--config", str(cfg), "--count", "4", "--out", str(out)]) == 0
    assert len(world.read_scenes(out)) == 4


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("count=3\nbogus=1\n")
    assert run(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["gen-scenes", "--count", "12", "--seed", "5", "--out", str(d / "s.jsonl")]) == 0
    assert run(["build-dataset", "--scenes", str(d / "s.jsonl"), "--out", str(d / "shard.jsonl")]) == 0
    assert run(["train", "--shard", str(d / "shard.jsonl"), "--out", str(d / "m.fxcp"),
                "--curve", str(d / "curve.csv"), "--steps", "4", "--warmup", "1",
                "--batch", "8", *TINY_MODEL]) == 0
    return d


def test_stats_output(pipeline, capsys):
    assert run(["stats", "--in", str(pipeline / "shard.jsonl"), "--out-dir",
                str(pipeline / "stats")]) == 0
    out = capsys.readouterr().out
    assert "prefix_share_bos" in out and "prefix_share_length" in out and "length_8" in out
    assert (pipeline / "stats" / "length_histogram.png").exists()


def test_train_outputs(pipeline):
    assert (pipeline / "curve.csv").read_text().startswith("step,loss,lr\n")
    assert (pipeline / "curve.png").read_bytes()[:4] == b"\x89PNG"


def test_decode_records(pipeline, capsys):
    assert run(["decode", "--checkpoint", str(pipeline / "m.fxcp"), "--scenes",
                str(pipeline / "s.jsonl"), "--limit", "2", "--prefix", "LEN_4 the color is"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rec = json.loads(lines[0])
    assert rec["prefix"] == ["LEN_4", "the", "color", "is"]
    assert rec["terminated_by"] in ("eos", "max_steps")
    assert run(["decode", "--checkpoint", str(pipeline / "m.fxcp"), "--scenes",
                str(pipeline / "s.jsonl"), "--limit", "1", "--mode", "nucleus",
                "--samples", "3"]) == 0


@pytest.mark.parametrize("cmd,files", [
    ("eval-length", ["length_compliance.csv", "length_compliance.png"]),
    ("eval-region", ["region_classification.csv", "region_confusion.png"]),
    ("eval-dense", ["dense_map.csv", "dense_map.png"]),
    ("eval-prefix", ["prefix_extraction.csv", "prefix_extraction.png"]),
])
def test_eval_reports(pipeline, cmd, files):
    out = pipeline / cmd
    extra = ["--k", "2"] if cmd == "eval-region" else []
    assert run([cmd, "--checkpoint", str(pipeline / "m.fxcp"), "--scenes",
                str(pipeline / "s.jsonl"), "--limit", "3", "--out-dir", str(out), *extra]) == 0
    for f in files:
        assert (out / f).stat().st_size > 0


def test_prompt_command(capsys):
    assert run(["prompt", "--spec", str(FIXTURES / "prompt_video.json")]) == 0
    assert capsys.readouterr().out == (FIXTURES / "prompt_video.txt").read_text() + "\n"


def test_grad_check_command(capsys):
    assert run(["grad-check", "--max-coords", "3"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lencap", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "gen-scenes" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "lencap", "train"], capture_output=True, text=True)
    assert proc.returncode == 2
