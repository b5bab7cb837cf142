"""Codec round trips."""

import numpy as np
import pytest

from flowedit.codec import DownsampleCodec, IdentityCodec, get_codec
from flowedit.errors import ShapeError


class TestIdentity:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(1, 16, 16)).astype(np.float32)
        codec = IdentityCodec()
        np.testing.assert_array_equal(codec.decode(codec.encode(img)), img)

    def test_latent_shape(self):
        assert IdentityCodec().latent_shape((1, 16, 16)) == (1, 16, 16)


class TestDownsample:
    def test_encode_halves_extents(self):
        codec = DownsampleCodec()
        latent = codec.encode(np.zeros((1, 16, 16), dtype=np.float32))
        assert latent.shape == (1, 8, 8)

    def test_constant_round_trip_exact(self):
        codec = DownsampleCodec()
        img = np.full((1, 8, 8), 0.625, dtype=np.float32)
        np.testing.assert_allclose(codec.decode(codec.encode(img)), img, atol=1e-7)

    def test_pooling_average_values(self):
        codec = DownsampleCodec()
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        latent = codec.encode(img)
        assert latent[0, 0, 0] == img[0, :2, :2].mean()

    def test_odd_extent_raises(self):
        with pytest.raises(ShapeError):
            DownsampleCodec().encode(np.zeros((1, 5, 6), dtype=np.float32))


def test_get_codec_dispatch():
    assert get_codec("identity").name == "identity"
    assert get_codec("downsample").name == "downsample"
    with pytest.raises(ShapeError):
        get_codec("vae")
