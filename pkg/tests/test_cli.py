import json
import subprocess
import sys

import pytest

from alignkit.checkpoint import load_generator, load_policy
from alignkit.cli import main

TINY_TOML = """
[data.train]
image_score = 12
natural_video_score = 6
video_multidim = 6
pair = 12
vqa = 6

[data.heldout]
image_score = 10
natural_video_score = 4
video_multidim = 4
pair = 12
vqa = 4

[stage1.grpo]
epochs = 1
group_size = 4

[stage2]
steps_per_epoch = 6

[stage2.grpo]
epochs = 1
group_size = 4

[stage3]
prompts = 2
pool_size = 3
rounds = 1
pretrain_steps = 5

[stage3.dpo]
steps = 2
minibatch = 2

[stage3.judge_grpo]
epochs = 1
group_size = 4
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        assert _run("gen-data", "--config", tmp_path / "none.toml", "--out", tmp_path) == 1
        assert "config file not found" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert _run("bogus") == 1

    def test_missing_required_flag(self, tmp_path):
        assert _run("stage2", "--out", tmp_path) == 1

    def test_bad_seed(self, tmp_path):
        assert _run("gen-data", "--seed", "-3", "--out", tmp_path) == 1
        assert _run("gen-data", "--seed", str(2 ** 64), "--out", tmp_path) == 1

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[stage1]\nspeed = 3\n")
        assert _run("gen-data", "--config", path, "--out", tmp_path) == 1

    def test_missing_dataset(self, tmp_path):
        assert _run("stage1", "--out", tmp_path) == 1

    def test_eval_generator_needs_baseline(self, tmp_path, cfg):
        assert _run("gen-data", "--config", cfg, "--out", tmp_path) == 0
        assert _run("eval", "--config", cfg, "--out", tmp_path, "--generator", tmp_path / "g.ckpt") == 1


class TestCommands:
    def test_gradcheck(self, tmp_path, capsys):
        assert _run("gradcheck", "--cases", 5, "--out", tmp_path) == 0
        out = capsys.readouterr().out
        worst = float(out.strip().splitlines()[-1].split()[-1])
        assert worst < 1e-4

    def test_end_to_end(self, tmp_path, cfg, capsys):
        out = tmp_path / "run"
        common = ["--config", cfg, "--out", out, "--seed", 7]
        assert _run("gen-data", *common) == 0
        assert (out / "data" / "oracle.jsonl").exists()
        assert _run("stage1", *common) == 0
        s1 = out / "stage1-12.ckpt"
        load_policy(s1)
        assert _run("stage2", *common, "--policy", s1) == 0
        s2 = out / "stage2-6.ckpt"
        assert _run("stage3", *common, "--judge", s2) == 0
        load_generator(out / "generator-1.ckpt")
        assert (out / "stage3-judge-1.ckpt").exists()
        rounds = json.loads((out / "stage3-rounds.json").read_text())
        assert rounds[0]["initial_pairs"] == 2
        audit = (out / "stage3-audit.jsonl").read_text().splitlines()
        assert len(audit) == 2 * 3 * 2

        capsys.readouterr()
        assert _run("eval", *common, "--policy", s2) == 0
        report = json.loads(capsys.readouterr().out)
        assert {"image_score", "tmr_gap", "length_in_range", "pairs", "format_rate"} <= set(report)
        assert _run("eval", *common, "--generator", out / "generator-1.ckpt", "--baseline", out / "generator-0.ckpt") == 0
        report = json.loads(capsys.readouterr().out)
        assert 0.0 <= report["win_rate"] <= 1.0

        assert _run("report", "--out", out, out / "stage1-log.jsonl", out / "stage2-log.jsonl") == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split()[:2] == ["log", "epoch"]
        assert len(lines) == 3

        resolved = json.loads((out / "stage2-config.json").read_text())
        assert resolved["seed"] == 7
        assert resolved["plan"]["stage2"]["steps_per_epoch"] == 6

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "alignkit", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gradcheck" in proc.stdout
