"""Container format: round trips, digests, determinism, PNG export."""

import numpy as np
import pytest

from flowedit import persist
from flowedit.editing import DirectionBank
from flowedit.errors import (
    DigestMismatchError,
    MissingFileError,
    UnsupportedFormatError,
)
from flowedit.flow import FlowConfig, MLPField, MLPFieldConfig, make_checkpoint


@pytest.fixture
def checkpoint():
    model = MLPField(MLPFieldConfig(dim=2, hidden=(8,), time_features=4), seed=1)
    rng = np.random.default_rng(5)
    rng.standard_normal(10)
    from flowedit.optim import Adam

    opt = Adam(model.parameters(), lr=1e-3)
    return make_checkpoint(model, FlowConfig(), opt, rng,
                           loss_history=np.array([3.0, 2.0], np.float32), seed=7)


class TestContainers:
    def test_checkpoint_round_trip_bit_exact(self, tmp_path, checkpoint):
        path = tmp_path / "model.ckpt"
        persist.save_checkpoint(path, checkpoint)
        loaded = persist.load_checkpoint(path)
        assert loaded["arch"] == checkpoint["arch"]
        assert loaded["flow"] == checkpoint["flow"]
        assert loaded["seed"] == checkpoint["seed"]
        assert loaded["rng_state"]["state"]["state"] == checkpoint["rng_state"]["state"]["state"]
        for k, v in checkpoint["params"].items():
            np.testing.assert_array_equal(loaded["params"][k], v)
        for k in checkpoint["optimizer"]["m"]:
            np.testing.assert_array_equal(loaded["optimizer"]["m"][k], checkpoint["optimizer"]["m"][k])
        np.testing.assert_array_equal(loaded["loss_history"], checkpoint["loss_history"])

    def test_save_is_byte_deterministic(self, tmp_path, checkpoint):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        persist.save_checkpoint(p1, checkpoint)
        persist.save_checkpoint(p2, checkpoint)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupted_byte_fails_digest(self, tmp_path, checkpoint):
        path = tmp_path / "model.ckpt"
        persist.save_checkpoint(path, checkpoint)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DigestMismatchError):
            persist.load_checkpoint(path)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        persist.save_container(path, "dataset", {}, {"a": np.zeros(3, np.float32)})
        with pytest.raises(UnsupportedFormatError):
            persist.load_container(path, expect_kind="checkpoint")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            persist.load_container(tmp_path / "nope.bin")

    def test_not_a_container(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello world, this is not a container at all....")
        with pytest.raises(UnsupportedFormatError):
            persist.load_container(path)


class TestBank:
    def test_bank_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        bank = DirectionBank(
            grid_n=4, latent_shape=(1, 4, 4),
            directions={"large": rng.normal(size=(5, 1, 4, 4)).astype(np.float32)},
            provenance={"large": {"provenance": "real-image inversion", "pos_count": 3, "neg_count": 3}},
        )
        path = tmp_path / "bank.bin"
        persist.save_bank(path, bank)
        loaded = persist.load_bank(path)
        assert loaded.grid_n == 4 and loaded.latent_shape == (1, 4, 4)
        np.testing.assert_array_equal(loaded.directions["large"], bank.directions["large"])
        assert loaded.provenance == bank.provenance


class TestDataset:
    def test_shapes_dataset_round_trip(self, tmp_path):
        from flowedit.data import gen_shapes

        samples = gen_shapes(12, seed=9)
        path = tmp_path / "shapes.bin"
        persist.save_shapes_dataset(path, samples, seed=9)
        loaded, seed = persist.load_shapes_dataset(path)
        assert seed == 9 and len(loaded) == 12
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.caption == b.caption and a.shape == b.shape

    def test_dataset_digest_stable(self, tmp_path):
        from flowedit.data import gen_shapes

        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        persist.save_shapes_dataset(p1, gen_shapes(8, seed=2), seed=2)
        persist.save_shapes_dataset(p2, gen_shapes(8, seed=2), seed=2)
        assert persist.file_digest(p1) == persist.file_digest(p2)


class TestPng:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(1, 16, 16)).astype(np.float32)
        path = tmp_path / "img.png"
        persist.save_png(path, img)
        back = persist.load_png(path)
        assert back.shape == (1, 16, 16)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_png_bytes_deterministic(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(1, 16, 16)).astype(np.float32)
        assert persist.image_to_png_bytes(img) == persist.image_to_png_bytes(img)

    def test_values_clamped(self, tmp_path):
        img = np.array([[[-1.0, 2.0], [0.5, 0.25]]], dtype=np.float32)
        path = tmp_path / "clamp.png"
        persist.save_png(path, img)
        back = persist.load_png(path)
        assert back.min() == 0.0 and back.max() == 1.0
