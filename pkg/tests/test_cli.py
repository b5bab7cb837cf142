"""CLI workflow: commands, determinism, error categories, exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from flowedit.cli import main
from tests.conftest import TINY_ARCH


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestTrain:
    def test_train_writes_artifacts(self, runner, tmp_path):
        cfg = {
            "dataset": {"kind": "shapes", "n": 64, "seed": 3},
            "model": {"kind": "uvit", **TINY_ARCH},
            "optim": {"lr": 1e-3, "batch_size": 4, "steps": 5},
            "seed": 1,
            "out_dir": str(tmp_path / "run"),
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        result = run_ok(runner, ["train", "--config", str(cfg_path)])
        payload = json.loads(result.output.strip().splitlines()[-1])
        out = tmp_path / "run"
        assert (out / "checkpoint.bin").exists()
        assert (out / "config.json").exists()
        assert (out / "loss_history.txt").exists()
        assert payload["steps"] == 5 and not payload["aborted"]

    def test_two_moons_training(self, runner, tmp_path):
        cfg = {
            "dataset": {"kind": "two_moons", "n": 128, "seed": 2},
            "model": {"kind": "mlp_field", "dim": 2, "hidden": [16], "time_features": 4},
            "optim": {"lr": 1e-3, "batch_size": 16, "steps": 5},
            "out_dir": str(tmp_path / "moons"),
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        run_ok(runner, ["train", "--config", str(cfg_path)])
        assert (tmp_path / "moons" / "checkpoint.bin").exists()


class TestSampleAndEdit:
    def test_sample_twice_is_byte_identical(self, runner, tiny_run, tmp_path):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        for out in (out1, out2):
            run_ok(runner, ["sample", "--checkpoint", str(tiny_run["checkpoint"]),
                            "--seed", "7", "--prompt", "a large bright circle center",
                            "--solver", "euler", "--steps", "20", "--out", str(out)])
        f1, f2 = out1 / "sample_7.png", out2 / "sample_7.png"
        assert f1.read_bytes() == f2.read_bytes()

    def test_edit_with_zero_weight_matches_sample(self, runner, tiny_run, tmp_path):
        sample_dir = tmp_path / "base"
        run_ok(runner, ["sample", "--checkpoint", str(tiny_run["checkpoint"]),
                        "--seed", "3", "--prompt", "a small dim square left",
                        "--solver", "euler", "--steps", "20", "--out", str(sample_dir)])
        edited = tmp_path / "edit.png"
        run_ok(runner, ["edit", "--checkpoint", str(tiny_run["checkpoint"]),
                        "--bank", str(tiny_run["bank"]), "--seed", "3",
                        "--prompt", "a small dim square left", "--attr", "large=0",
                        "--solver", "euler", "--steps", "20", "--out", str(edited)])
        assert edited.read_bytes() == (sample_dir / "sample_3.png").read_bytes()

    def test_edit_with_unknown_attribute_exits_2(self, runner, tiny_run, tmp_path):
        result = runner.invoke(main, [
            "edit", "--checkpoint", str(tiny_run["checkpoint"]), "--bank", str(tiny_run["bank"]),
            "--seed", "1", "--attr", "smile=2", "--solver", "euler", "--steps", "5",
            "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["error"] == "unknown_attribute" and "smile" in err["message"]

    def test_invert_then_edit_from_noise(self, runner, tiny_run, tmp_path):
        sample_dir = tmp_path / "src"
        run_ok(runner, ["sample", "--checkpoint", str(tiny_run["checkpoint"]),
                        "--seed", "5", "--prompt", "a large dim circle right",
                        "--solver", "euler", "--steps", "10", "--out", str(sample_dir)])
        noise_path = tmp_path / "noise.bin"
        result = run_ok(runner, ["invert", "--checkpoint", str(tiny_run["checkpoint"]),
                                 "--image", str(sample_dir / "sample_5.png"),
                                 "--prompt", "a large dim circle right",
                                 "--solver", "euler", "--steps", "10",
                                 "--out", str(noise_path)])
        assert noise_path.exists()
        assert Path(str(noise_path) + ".trajectory.json").exists()
        summary = json.loads(result.output.strip().splitlines()[-1])
        assert summary["accepted_steps"] == 10
        run_ok(runner, ["edit", "--checkpoint", str(tiny_run["checkpoint"]),
                        "--bank", str(tiny_run["bank"]), "--noise", str(noise_path),
                        "--prompt", "a large dim circle right", "--attr", "large=1",
                        "--solver", "euler", "--steps", "10",
                        "--out", str(tmp_path / "edited.png")])
        assert (tmp_path / "edited.png").exists()

    def test_reweight_command(self, runner, tiny_run, tmp_path):
        out = tmp_path / "rw.png"
        run_ok(runner, ["reweight", "--checkpoint", str(tiny_run["checkpoint"]),
                        "--seed", "2", "--prompt", "a large bright circle center",
                        "--target", "bright", "--scale", "2.0",
                        "--solver", "euler", "--steps", "10", "--out", str(out)])
        assert out.exists()


class TestAnalysis:
    def test_collect_directions_command(self, runner, tiny_run, tmp_path):
        bank_path = tmp_path / "bank.bin"
        result = run_ok(runner, [
            "collect-directions", "--checkpoint", str(tiny_run["checkpoint"]),
            "--attribute", "large", "--pos-filter", "size>=4.5", "--neg-filter", "size<=3.5",
            "--grid", "5", "--per-side", "3", "--dataset-n", "128", "--dataset-seed", "5",
            "--out", str(bank_path)])
        payload = json.loads(result.output.strip().splitlines()[-1])
        assert payload["attributes"] == ["large"] and payload["grid_n"] == 5
        from flowedit.persist import load_bank

        bank = load_bank(bank_path)
        assert bank.directions["large"].shape[0] == 6

    def test_pca_command(self, runner, tiny_run, tmp_path):
        out = tmp_path / "pca.bin"
        result = run_ok(runner, ["pca", "--checkpoint", str(tiny_run["checkpoint"]),
                                 "--grid-time", "0.5", "--components", "2",
                                 "--samples", "12", "--dataset-n", "32", "--grid", "4",
                                 "--out", str(out)])
        payload = json.loads(result.output.strip().splitlines()[-1])
        variances = payload["explained_variance"]
        assert len(variances) == 2 and variances[0] >= variances[1]

    def test_attn_maps_command(self, runner, tiny_run, tmp_path):
        out = tmp_path / "attn"
        result = run_ok(runner, ["attn-maps", "--checkpoint", str(tiny_run["checkpoint"]),
                                 "--prompt", "a large bright circle center",
                                 "--block", "1", "--step", "2", "--n-steps", "10",
                                 "--out", str(out)])
        entries = json.loads(result.output.strip().splitlines()[-1])
        assert len(entries) == TINY_ARCH["prompt_length"]
        for e in entries:
            assert Path(e["file"]).exists()

    def test_eval_quick(self, runner, tiny_run, tmp_path):
        out = tmp_path / "report.json"
        result = run_ok(runner, ["eval", "--checkpoint", str(tiny_run["checkpoint"]),
                                 "--bank", str(tiny_run["bank"]), "--quick", "--out", str(out)])
        report = json.loads(out.read_text())
        assert "cycle" in report and "edit_flip" in report


class TestErrors:
    def test_missing_checkpoint_exits_3(self, runner, tmp_path):
        result = runner.invoke(main, ["sample", "--checkpoint", str(tmp_path / "nope.bin"),
                                      "--seed", "1"])
        assert result.exit_code == 3
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["error"] == "missing_file"

    def test_corrupt_checkpoint_exits_3(self, runner, tiny_run, tmp_path):
        bad = tmp_path / "bad.bin"
        blob = bytearray(Path(tiny_run["checkpoint"]).read_bytes())
        blob[100] ^= 0x01
        bad.write_bytes(bytes(blob))
        result = runner.invoke(main, ["sample", "--checkpoint", str(bad), "--seed", "1"])
        assert result.exit_code == 3
        assert json.loads(result.stderr.strip().splitlines()[-1])["error"] == "digest_mismatch"

    def test_bad_attr_syntax_exits_2(self, runner, tiny_run, tmp_path):
        result = runner.invoke(main, ["edit", "--checkpoint", str(tiny_run["checkpoint"]),
                                      "--bank", str(tiny_run["bank"]), "--seed", "1",
                                      "--attr", "large", "--out", str(tmp_path / "x.png")])
        assert result.exit_code == 2

    def test_unknown_prompt_word_exits_2(self, runner, tiny_run, tmp_path):
        result = runner.invoke(main, ["sample", "--checkpoint", str(tiny_run["checkpoint"]),
                                      "--seed", "1", "--prompt", "a gigantic martian blob",
                                      "--out", str(tmp_path / "s")])
        assert result.exit_code == 2
        assert json.loads(result.stderr.strip().splitlines()[-1])["error"] == "vocabulary"
