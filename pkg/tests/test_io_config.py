"""File containers, config parsing, checkpoint round trips."""

import numpy as np
import pytest

from invgfx import containers
from invgfx.config import (
    ExperimentConfig,
    from_dict,
    load_config,
    parse_config_text,
    schema_help,
)
from invgfx.errors import CheckpointVersionError, ConfigError, DomainError


class TestFgrid:
    def test_roundtrip_bits(self, rng, tmp_path):
        for shape in ((4,), (3, 5), (2, 3, 4), (1, 2, 3, 4)):
            arr = rng.normal(size=shape)
            path = tmp_path / "a.fgrid"
            containers.save_fgrid(path, arr)
            back = containers.load_fgrid(path)
            assert back.shape == arr.shape
            assert np.array_equal(back, arr)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.fgrid"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DomainError):
            containers.load_fgrid(path)

    def test_version_mismatch_rejected(self, rng, tmp_path):
        path = tmp_path / "v.fgrid"
        containers.save_fgrid(path, rng.normal(size=(2, 2)))
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # version byte
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            containers.load_fgrid(path)

    def test_truncated_payload_rejected(self, rng, tmp_path):
        path = tmp_path / "t.fgrid"
        containers.save_fgrid(path, rng.normal(size=(4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DomainError):
            containers.load_fgrid(path)


class TestPnm:
    def test_binary_roundtrip_quantized(self, rng, tmp_path):
        img = rng.uniform(0, 1, (3, 5, 7))
        path = tmp_path / "img.ppm"
        containers.save_pnm(path, img)
        back = containers.load_pnm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_gray_binary(self, rng, tmp_path):
        img = rng.uniform(0, 1, (1, 4, 6))
        path = tmp_path / "img.pgm"
        containers.save_pnm(path, img)
        back = containers.load_pnm(path)
        assert back.shape == (1, 4, 6)

    def test_ascii_with_comments(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P2\n# a comment\n2 2\n255\n0 64\n128 255\n")
        img = containers.load_pnm(path)
        assert img.shape == (1, 2, 2)
        assert img[0, 0, 0] == 0.0
        assert img[0, 1, 1] == 1.0

    def test_ascii_color(self, tmp_path):
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P3\n1 1\n255\n255 0 0\n")
        img = containers.load_pnm(path)
        assert img.shape == (3, 1, 1)
        assert img[0, 0, 0] == 1.0 and img[1, 0, 0] == 0.0


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        tensors = {"a/w": rng.normal(size=(3, 4)), "b": rng.normal(size=(2,))}
        path = tmp_path / "ckpt.bin"
        containers.save_checkpoint(path, tensors, iteration=17,
                                   state_json='{"iteration": 17, "ema": {}, "rng_state": {}}',
                                   rng_states={"batch": {"x": 1}},
                                   config={"task": "toy2d"})
        header, back = containers.load_checkpoint(path)
        assert header["iteration"] == 17
        assert header["config"]["task"] == "toy2d"
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])

    def test_version_mismatch(self, rng, tmp_path):
        path = tmp_path / "ckpt.bin"
        containers.save_checkpoint(path, {"a": rng.normal(size=2)}, 0,
                                   "{}", {})
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            containers.load_checkpoint(path)


class TestConfig:
    def test_parse_and_defaults(self):
        cfg = parse_config_text("task = sfm\nseed = 3\nbeta=0.5\n")
        assert cfg.task == "sfm"
        assert cfg["seed"] == 3
        assert cfg["beta"] == 0.5
        assert cfg["iters"] == 1000  # default

    def test_comments_and_blanks(self):
        cfg = parse_config_text("# hi\n\ntask = pose # trailing\n")
        assert cfg.task == "pose"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("task = sfm\nbogus = 1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("task = sfm\nseed = 1\nseed = 2\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("task = sfm\nseed = banana\n")

    def test_missing_task_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed = 1\n")

    def test_bad_task_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("task = quantum\n")

    def test_render_roundtrip(self):
        cfg = ExperimentConfig(task="sr", values={"seed": 5, "beta": 0.25})
        again = parse_config_text(cfg.render())
        assert again.task == "sr"
        assert again["seed"] == 5 and again["beta"] == 0.25

    def test_from_dict_validates(self):
        with pytest.raises(ConfigError):
            from_dict({"task": "sfm", "mystery": 1})
        cfg = from_dict({"task": "sfm", "seed": 2})
        assert cfg["seed"] == 2

    def test_file_loading(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("task = toy2d\niters = 3\n")
        cfg = load_config(path)
        assert cfg.task == "toy2d" and cfg["iters"] == 3

    def test_schema_help_mentions_every_key(self):
        text = schema_help()
        for key in ("task", "beta", "sfm.prior", "pose.sigma"):
            assert key in text

    def test_train_config_construction(self):
        cfg = parse_config_text("task = sfm\nbeta = 0.1\ntheta_d = 0.695\n")
        tc = cfg.train_config()
        assert tc.beta == 0.1 and tc.theta_d == 0.695
