"""Synthetic datasets and their measurement oracles."""

import numpy as np
import pytest

from flowedit.data import (
    LARGE_THRESHOLD,
    attribute_oracle,
    default_vocabulary,
    gen_shapes,
    gen_two_moons,
    oracle_bin,
    render_shape,
    two_moons_centroid,
)
from flowedit.errors import OracleError
from flowedit.prompts import tokenize


class TestTwoMoons:
    def test_seed_determinism(self):
        np.testing.assert_array_equal(gen_two_moons(500, 0.1, 7), gen_two_moons(500, 0.1, 7))

    def test_zero_noise_lies_on_half_circles(self):
        pts = gen_two_moons(1000, 0.0, 3)
        r_outer = np.abs(np.hypot(pts[:, 0], pts[:, 1]) - 1.0)
        r_inner = np.abs(np.hypot(pts[:, 0] - 1.0, pts[:, 1] - 0.5) - 1.0)
        assert np.minimum(r_outer, r_inner).max() < 1e-6

    def test_empirical_mean_matches_analytic_centroid(self):
        pts = gen_two_moons(100_000, 0.1, 5)
        assert np.abs(pts.mean(axis=0) - two_moons_centroid()).max() < 0.02


class TestGenShapes:
    def test_seed_determinism(self):
        a, b = gen_shapes(64, seed=3), gen_shapes(64, seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            assert x.caption == y.caption

    def test_bin_balance(self):
        samples = gen_shapes(10_000, seed=11)
        for frac in (
            np.mean([s.size_bin == "large" for s in samples]),
            np.mean([s.brightness_bin == "bright" for s in samples]),
            np.mean([s.shape == "circle" for s in samples]),
        ):
            assert 0.45 <= frac <= 0.55
        for pos in ("left", "center", "right"):
            frac = np.mean([s.position == pos for s in samples])
            assert 1 / 3 - 0.05 <= frac <= 1 / 3 + 0.05

    def test_captions_tokenize_cleanly(self):
        vocab = default_vocabulary()
        for s in gen_shapes(200, seed=4):
            tokenize(s.caption, vocab, 8)

    def test_images_in_unit_range(self):
        for s in gen_shapes(100, seed=6):
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0


class TestOracles:
    def test_circle_size_five_measured_within_half_pixel(self):
        img = render_shape("circle", 5.0, 0.8, 7.5, 7.5)
        assert 4.5 <= attribute_oracle(img, "size") <= 5.5

    def test_brightness_scales_exactly_linearly(self):
        img = render_shape("square", 4.0, 0.9, 7.5, 7.5)
        full = attribute_oracle(img, "brightness")
        half = attribute_oracle(0.5 * img, "brightness")
        assert half == 0.5 * full

    def test_blank_image_raises(self):
        with pytest.raises(OracleError):
            attribute_oracle(np.zeros((1, 16, 16), dtype=np.float32), "size")

    def test_oracle_bins_match_labels(self):
        samples = gen_shapes(1500, seed=21)
        agree = {"size": 0, "brightness": 0, "shape": 0}
        for s in samples:
            if oracle_bin(s.image, "size") == s.size_bin:
                agree["size"] += 1
            if oracle_bin(s.image, "brightness") == s.brightness_bin:
                agree["brightness"] += 1
            if oracle_bin(s.image, "shape") == s.shape:
                agree["shape"] += 1
        for attr, count in agree.items():
            assert count / len(samples) >= 0.99, attr

    def test_size_threshold_constant_is_bin_boundary(self):
        small = gen_shapes(1, seed=0)[0]
        assert (small.size >= LARGE_THRESHOLD) == (small.size_bin == "large")
