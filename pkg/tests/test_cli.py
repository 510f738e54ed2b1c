"""Command-line surface: subcommands, exit codes, artifact layout."""

import json
import os

import numpy as np
import pytest

from invgfx import cli, containers
from invgfx.autodiff.gradcheck import CheckCase
from invgfx.autodiff.tensor import Tensor
from invgfx.checks import REGISTRY


TOY_CFG = """task = toy2d
iters = 30
batch = 4
beta = 0.1
recon_lr = 0.01
adv_lr = 0.01
checkpoint_every = 15
eval_every = 10
"""


@pytest.fixture
def toy_config_path(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CFG)
    return path


class TestGradcheckCommand:
    def test_single_op_scope(self, capsys):
        code = cli.main(["gradcheck", "--scope", "matmul", "--instances", "3"])
        out = capsys.readouterr().out
        assert code == 0
        assert "matmul" in out and "ok" in out

    def test_unknown_op_is_usage_error(self, capsys):
        code = cli.main(["gradcheck", "--scope", "warp_drive"])
        assert code == 2
        assert "warp_drive" in capsys.readouterr().err

    def test_list_names(self, capsys):
        assert cli.main(["gradcheck", "--list"]) == 0
        assert "conv2d" in capsys.readouterr().out

    def test_broken_adjoint_fails_naming_the_op(self, capsys):
        # negative control: a deliberately wrong gradient must exit 1
        @REGISTRY.register("broken_fixture_op")
        def _broken(rng):
            from invgfx.autodiff import ops

            a = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)

            def fwd():
                out = ops.mul(a, a.data.copy())  # silently drops da path
                return ops.reduce_sum(out)

            return CheckCase([a], fwd)

        try:
            code = cli.main(["gradcheck", "--scope", "broken_fixture_op",
                             "--instances", "2"])
            out = capsys.readouterr().out
            assert code == 1
            assert "broken_fixture_op" in out and "FAIL" in out
        finally:
            del REGISTRY._factories["broken_fixture_op"]


class TestTrainCommand:
    def test_artifacts_and_determinism(self, toy_config_path, tmp_path, capsys):
        out_a = tmp_path / "run_a"
        out_b = tmp_path / "run_b"
        assert cli.main(["train", "--config", str(toy_config_path),
                         "--out", str(out_a)]) == 0
        assert cli.main(["train", "--config", str(toy_config_path),
                         "--out", str(out_b)]) == 0
        for out in (out_a, out_b):
            assert (out / "config.txt").exists()
            assert (out / "metrics.csv").exists()
            assert (out / "eval.json").exists()
            names = sorted(os.listdir(out / "checkpoints"))
            assert names == ["ckpt_000000.bin", "ckpt_000015.bin",
                             "ckpt_000030.bin"]
        assert (out_a / "metrics.csv").read_bytes() \
            == (out_b / "metrics.csv").read_bytes()

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        code = cli.main(["train", "--config", str(tmp_path / "nope.cfg")])
        assert code == 2

    def test_iters_override(self, toy_config_path, tmp_path):
        out = tmp_path / "short"
        assert cli.main(["train", "--config", str(toy_config_path),
                         "--out", str(out), "--iters-override", "4"]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1 + 4

    def test_zero_iteration_run(self, toy_config_path, tmp_path):
        out = tmp_path / "zero"
        assert cli.main(["train", "--config", str(toy_config_path),
                         "--out", str(out), "--iters-override", "0"]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1
        assert (out / "checkpoints" / "ckpt_000000.bin").exists()

    def test_help_config(self, toy_config_path, capsys):
        assert cli.main(["train", "--config", str(toy_config_path),
                         "--help-config"]) == 0
        assert "sfm.prior" in capsys.readouterr().out


class TestEvalCommand:
    def test_eval_checkpoint(self, toy_config_path, tmp_path, capsys):
        out = tmp_path / "run"
        cli.main(["train", "--config", str(toy_config_path), "--out", str(out)])
        ckpt = out / "checkpoints" / "ckpt_000030.bin"
        report_path = tmp_path / "metrics.json"
        code = cli.main(["eval", "--checkpoint", str(ckpt),
                         "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["checkpoint_iteration"] == 30
        assert "dist_to_solution" in report["aggregate"]

    def test_eval_matches_training_final_state(self, toy_config_path, tmp_path):
        out = tmp_path / "run"
        cli.main(["train", "--config", str(toy_config_path), "--out", str(out)])
        train_eval = json.loads((out / "eval.json").read_text())
        from invgfx.experiments import run_eval

        report = run_eval(str(out / "checkpoints" / "ckpt_000030.bin"))
        assert report["aggregate"]["dist_to_solution"] == pytest.approx(
            train_eval["aggregate"]["dist_to_solution"], rel=1e-12)

    def test_version_mismatch_is_failure(self, toy_config_path, tmp_path,
                                         capsys):
        out = tmp_path / "run"
        cli.main(["train", "--config", str(toy_config_path), "--out", str(out)])
        ckpt = out / "checkpoints" / "ckpt_000030.bin"
        blob = bytearray(ckpt.read_bytes())
        blob[4] = 9
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(blob))
        assert cli.main(["eval", "--checkpoint", str(bad)]) == 2


class TestSynthCommand:
    def test_toy2d_export(self, toy_config_path, tmp_path):
        out = tmp_path / "data"
        assert cli.main(["synth", "--config", str(toy_config_path),
                         "--out", str(out)]) == 0
        assert (out / "manifest.txt").exists()
        mems = containers.load_fgrid(out / "memories.fgrid")
        assert mems.shape[1:] == (2, 2)

    def test_pose_export_and_eval(self, tmp_path):
        cfg_path = tmp_path / "pose.cfg"
        cfg_path.write_text(
            "task = pose\niters = 2\nbatch = 2\npose.samples = 8\n"
            "pose.bank_size = 8\npose.image_size = 16\npose.gen_width = 4\n"
            "pose.disc_width = 8\npose.basis_k = 20\ncheckpoint_every = 2\n"
            "eval_every = 1\nbeta = 0.0\n")
        data = tmp_path / "poses"
        assert cli.main(["synth", "--config", str(cfg_path),
                         "--out", str(data)]) == 0
        assert (data / "skeletons.csv").exists()
        assert (data / "basis_vectors.fgrid").exists()

        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        report_path = tmp_path / "r.json"
        code = cli.main(["eval",
                         "--checkpoint", str(out / "checkpoints" / "ckpt_000002.bin"),
                         "--dataset", str(data), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert len(report["per_sample"]) == 8

    def test_sfm_export_and_eval(self, tmp_path):
        cfg_path = tmp_path / "sfm.cfg"
        cfg_path.write_text(
            "task = sfm\niters = 2\nbatch = 2\nsfm.scenes = 3\n"
            "sfm.bank_scenes = 3\nsfm.image_size = 16\nsfm.width = 4\n"
            "checkpoint_every = 2\neval_every = 1\nbeta = 0.0\n")
        data = tmp_path / "scenes"
        assert cli.main(["synth", "--config", str(cfg_path),
                         "--out", str(data)]) == 0
        dirs = sorted(d for d in os.listdir(data) if d.startswith("scene_"))
        assert dirs == ["scene_0000", "scene_0001", "scene_0002"]

        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        report_path = tmp_path / "r.json"
        code = cli.main(["eval",
                         "--checkpoint", str(out / "checkpoints" / "ckpt_000002.bin"),
                         "--dataset", str(data), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert len(report["per_sample"]) == 3
        agg = report["aggregate"]["logdepth_l1"]
        per = np.mean([r["logdepth_l1"] for r in report["per_sample"]])
        assert agg == pytest.approx(per, rel=1e-12)
