"""Pluggable image <-> latent codecs standing in for a frozen autoencoder.

Codecs are stateless pure functions over arrays and never participate in
training gradients. The identity codec is the default everywhere.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class IdentityCodec:
    """latent == image; exact inverse."""

    name = "identity"
    scale = 1

    def encode(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float32).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float32).copy()

    def latent_shape(self, image_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(image_shape)


class DownsampleCodec:
    """2x average-pool encoder with bilinear decoder."""

    name = "downsample"
    scale = 2

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        h, w = image.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"downsample codec needs even spatial extents, got {image.shape}")
        pooled = image.reshape(*image.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
        return pooled.astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        h, w = latent.shape[-2:]
        out_h, out_w = 2 * h, 2 * w
        # Bilinear upsample with align_corners=False pixel-center convention.
        ys = (np.arange(out_h) + 0.5) / 2 - 0.5
        xs = (np.arange(out_w) + 0.5) / 2 - 0.5
        y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
        x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
        y1 = np.clip(y0 + 1, 0, h - 1)
        x1 = np.clip(x0 + 1, 0, w - 1)
        wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
        wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
        g = latent[..., :, :]
        top = g[..., y0[:, None], x0[None, :]] * (1 - wx) + g[..., y0[:, None], x1[None, :]] * wx
        bot = g[..., y1[:, None], x0[None, :]] * (1 - wx) + g[..., y1[:, None], x1[None, :]] * wx
        return (top * (1 - wy) + bot * wy).astype(np.float32)

    def latent_shape(self, image_shape: tuple[int, ...]) -> tuple[int, ...]:
        *lead, h, w = image_shape
        if h % 2 or w % 2:
            raise ShapeError(f"downsample codec needs even spatial extents, got {image_shape}")
        return (*lead, h // 2, w // 2)


CODECS = {"identity": IdentityCodec, "downsample": DownsampleCodec}


def get_codec(name: str):
    if name not in CODECS:
        raise ShapeError(f"unknown codec '{name}'")
    return CODECS[name]()
