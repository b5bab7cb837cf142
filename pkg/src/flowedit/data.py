"""Deterministic synthetic datasets with exact attribute ground truth.

Two generators: a 2D two-moons distribution for validating the flow
objective, and a 16x16 single-channel captioned shapes set for editing
experiments. Every sample is a pure function of (attributes, seed);
attribute oracles measure rendered images without access to the labels.

Oracle formulas (documented here because tests pin their tolerances):
  * size: A = sum(I/peak over I > 0.02*peak) is the anti-aliased foreground
    area; radius estimate sqrt(A/pi) for circles, half-side sqrt(A)/2 for
    squares, with the shape chosen by the corner-mass statistic.
  * brightness: mean over pixels >= 0.9*peak (interior pixels only, so the
    estimate is exact for solid shapes and linear under global scaling).
  * shape: matched-filter statistic err(circle fit) - err(square fit), where
    each fit renders the candidate shape at the mass-derived size over a
    small grid of sub-pixel centers around the intensity centroid; positive
    means the square template fits better. Threshold at 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleError, ValidationError
from .prompts import Vocabulary

IMAGE_SIZE = 16
SIZE_RANGE = (2.0, 6.0)
LARGE_THRESHOLD = 4.0
BRIGHTNESS_RANGE = (0.3, 1.0)
BRIGHT_THRESHOLD = 0.65
POSITIONS = {"left": -2.5, "center": 0.0, "right": 2.5}

TEMPLATE_WORDS = ["a", "large", "small", "bright", "dim", "circle", "square",
                  "left", "center", "right"]


def default_vocabulary(size: int = 64) -> Vocabulary:
    return Vocabulary(TEMPLATE_WORDS, size=size)


@dataclass(frozen=True)
class ShapeSample:
    image: np.ndarray          # (1, 16, 16) float32 in [0, 1]
    shape: str                 # circle | square
    size: float                # radius (circle) or half-side (square), px
    brightness: float
    cx: float
    cy: float
    position: str              # left | center | right
    caption: str
    seed: int

    @property
    def size_bin(self) -> str:
        return "large" if self.size >= LARGE_THRESHOLD else "small"

    @property
    def brightness_bin(self) -> str:
        return "bright" if self.brightness >= BRIGHT_THRESHOLD else "dim"


def gen_two_moons(n: int, noise_sd: float = 0.1, seed: int = 0) -> np.ndarray:
    """Two interleaved half-circles, shuffled, deterministic per seed."""
    rng = np.random.default_rng(seed)
    n_outer = (n + 1) // 2
    n_inner = n - n_outer
    th_out = rng.uniform(0.0, np.pi, n_outer)
    th_in = rng.uniform(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(th_out), np.sin(th_out)], axis=1)
    inner = np.stack([1.0 - np.cos(th_in), 0.5 - np.sin(th_in)], axis=1)
    pts = np.concatenate([outer, inner], axis=0)
    if noise_sd > 0:
        pts = pts + rng.normal(0.0, noise_sd, pts.shape)
    return pts[rng.permutation(n)].astype(np.float32)


def two_moons_centroid() -> np.ndarray:
    """Analytic mean of the construction: ((0 + 1)/2, (2/pi + 0.5 - 2/pi)/2)."""
    return np.array([0.5, 0.25])


def render_shape(shape: str, size: float, brightness: float, cx: float, cy: float,
                 image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased rendering with ~1px linear coverage at the edge."""
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    if shape == "circle":
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        coverage = np.clip(size + 0.5 - dist, 0.0, 1.0)
    elif shape == "square":
        covx = np.clip(size + 0.5 - np.abs(xs - cx), 0.0, 1.0)
        covy = np.clip(size + 0.5 - np.abs(ys - cy), 0.0, 1.0)
        coverage = covx * covy
    else:
        raise ValidationError(f"unknown shape '{shape}'")
    return (brightness * coverage)[None].astype(np.float32)


def _sample_attributes(rng: np.random.Generator) -> dict:
    shape = "circle" if rng.uniform() < 0.5 else "square"
    size = float(rng.uniform(*SIZE_RANGE))
    brightness = float(rng.uniform(*BRIGHTNESS_RANGE))
    position = ("left", "center", "right")[rng.integers(0, 3)]
    cx = (IMAGE_SIZE - 1) / 2 + POSITIONS[position] + float(rng.uniform(-0.5, 0.5))
    cy = (IMAGE_SIZE - 1) / 2 + float(rng.uniform(-0.5, 0.5))
    return dict(shape=shape, size=size, brightness=brightness, position=position, cx=cx, cy=cy)


def make_caption(shape: str, size: float, brightness: float, position: str) -> str:
    size_word = "large" if size >= LARGE_THRESHOLD else "small"
    bright_word = "bright" if brightness >= BRIGHT_THRESHOLD else "dim"
    return f"a {size_word} {bright_word} {shape} {position}"


def gen_shapes(n: int, seed: int = 0) -> list[ShapeSample]:
    """n captioned shape samples; per-sample RNG comes from a splittable seed tree."""
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        attrs = _sample_attributes(rng)
        image = render_shape(attrs["shape"], attrs["size"], attrs["brightness"],
                             attrs["cx"], attrs["cy"])
        caption = make_caption(attrs["shape"], attrs["size"], attrs["brightness"],
                               attrs["position"])
        samples.append(ShapeSample(image=image, caption=caption, seed=i, **attrs))
    return samples


def dataset_arrays(samples: list[ShapeSample], vocab: Vocabulary, prompt_length: int):
    """Stack a sample list into (images, token_ids) training arrays."""
    from .prompts import tokenize

    images = np.stack([s.image for s in samples]).astype(np.float32)
    tokens = np.stack([tokenize(s.caption, vocab, prompt_length) for s in samples])
    return images, tokens


# -- oracles ------------------------------------------------------------------


def _foreground_stats(image: np.ndarray):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    peak = img.max()
    if peak <= 0.0:
        raise OracleError("blank image: oracle measurement undefined")
    return img, peak


def _normalized_mass(img: np.ndarray, peak: float) -> float:
    return float(img[img > 0.02 * peak].sum() / peak)


def _shape_statistic(img: np.ndarray, peak: float) -> float:
    """Matched-filter statistic: positive when the square template fits better."""
    w = np.where(img > 0.02 * peak, img / peak, 0.0)
    ys, xs = np.mgrid[0:img.shape[0], 0:img.shape[1]].astype(np.float64)
    tot = w.sum()
    cy0, cx0 = (w * ys).sum() / tot, (w * xs).sum() / tot
    area = w.sum()
    target = img / peak
    offsets = np.linspace(-0.5, 0.5, 5)
    fit_err = {}
    for shape, size in (("circle", np.sqrt(area / np.pi)), ("square", np.sqrt(area) / 2.0)):
        err = np.inf
        for dy in offsets:
            for dx in offsets:
                cand = render_shape(shape, size, 1.0, cx0 + dx, cy0 + dy,
                                    image_size=img.shape[0])[0].astype(np.float64)
                err = min(err, float(((cand - target) ** 2).sum()))
        fit_err[shape] = err
    return fit_err["circle"] - fit_err["square"]


def attribute_oracle(image: np.ndarray, attribute: str) -> float:
    """Measure size / brightness / shape from pixels alone (no labels)."""
    img, peak = _foreground_stats(image)
    if attribute == "brightness":
        return float(img[img >= 0.9 * peak].mean())
    if attribute == "shape":
        return _shape_statistic(img, peak)
    if attribute == "size":
        mass = _normalized_mass(img, peak)
        if _shape_statistic(img, peak) >= 0.0:
            return float(np.sqrt(mass) / 2.0)
        return float(np.sqrt(mass / np.pi))
    raise ValidationError(f"unknown attribute '{attribute}'")


def oracle_bin(image: np.ndarray, attribute: str) -> str:
    """Bin an oracle measurement with the generator's thresholds."""
    value = attribute_oracle(image, attribute)
    if attribute == "size":
        return "large" if value >= LARGE_THRESHOLD else "small"
    if attribute == "brightness":
        return "bright" if value >= BRIGHT_THRESHOLD else "dim"
    if attribute == "shape":
        return "square" if value >= 0.0 else "circle"
    raise ValidationError(f"unknown attribute '{attribute}'")
