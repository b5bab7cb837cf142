"""Transformer velocity network over [time | prompt | image] tokens.

The sequence layout is fixed: index 0 is the time token, indices 1..L the
prompt tokens, and the remaining (H/p)*(W/p) entries the image tokens.
Blocks are pre-LayerNorm self-attention + MLP with residuals; the first
depth/2 block outputs are fused into the mirrored late blocks through
concat + linear projection (long skip connections). Editing enters through
`EditHooks`: a latent offset added to the network input before patchify,
and post-softmax attention reweighting of selected prompt columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError, VocabularyError
from .prompts import ReweightSpec
from .tensor import Tensor

_TIME_SCALE = 1000.0   # t in [0,1] is stretched before the sinusoidal basis


@dataclass(frozen=True)
class UViTConfig:
    image_size: int = 16
    channels: int = 1
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    prompt_length: int = 8
    vocab_size: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.depth % 2:
            raise ValidationError(f"depth must be even for skip pairing, got {self.depth}")
        if self.embed_dim % self.heads:
            raise ValidationError(
                f"embed dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def image_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def token_count(self) -> int:
        return 1 + self.prompt_length + self.image_tokens

    @property
    def image_token_range(self) -> range:
        return range(1 + self.prompt_length, self.token_count)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        return {
            "kind": "uvit",
            "image_size": self.image_size,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "prompt_length": self.prompt_length,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UViTConfig":
        fields = {k: v for k, v in d.items() if k != "kind"}
        return cls(**fields)


@dataclass
class EditHooks:
    """Per-forward editing inputs. All optional; an empty hooks object is a no-op.

    u_offset is added to the latent before patchify (the editing space lives
    at the network input). reweight scales post-softmax attention from image
    rows to its prompt columns in the blocks it selects. attention_sink, when
    given, receives {block_index: (B, heads, T, T) array}; the dict is owned
    by the caller, keeping retention per-call.
    """

    u_offset: Optional[np.ndarray] = None
    reweight: Optional[ReweightSpec | tuple[ReweightSpec, ...]] = None
    attention_sink: Optional[dict] = None

    def reweight_specs(self) -> tuple[ReweightSpec, ...]:
        if self.reweight is None:
            return ()
        if isinstance(self.reweight, ReweightSpec):
            return (self.reweight,)
        return tuple(self.reweight)


def patchify(x: Tensor | np.ndarray, patch_size: int) -> Tensor:
    """(B,C,H,W) or (C,H,W) -> (B, T, p*p*C) tokens in raster order."""
    t = T.as_tensor(x)
    squeeze = t.ndim == 3
    if squeeze:
        t = T.reshape(t, (1, *t.shape))
    b, c, h, w = t.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by patch size {p}")
    t = T.reshape(t, (b, c, h // p, p, w // p, p))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    tokens = T.reshape(t, (b, (h // p) * (w // p), c * p * p))
    return T.reshape(tokens, tokens.shape[1:]) if squeeze else tokens


def unpatchify(tokens: Tensor | np.ndarray, patch_size: int, channels: int,
               height: int, width: int) -> Tensor:
    """Exact inverse of patchify."""
    t = T.as_tensor(tokens)
    squeeze = t.ndim == 2
    if squeeze:
        t = T.reshape(t, (1, *t.shape))
    b, n, dim = t.shape
    p = patch_size
    hp, wp = height // p, width // p
    if n != hp * wp or dim != channels * p * p:
        raise ShapeError(f"token grid {t.shape} does not match {channels}x{height}x{width}/p={p}")
    t = T.reshape(t, (b, hp, wp, channels, p, p))
    t = T.transpose(t, (0, 3, 1, 4, 2, 5))
    out = T.reshape(t, (b, channels, height, width))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def sinusoidal_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos basis of t*_TIME_SCALE; injective over the sampling grids in use."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float32)) * np.float32(_TIME_SCALE)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float32) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class UViT:
    """U-ViT velocity model; parameters live in a flat name -> Tensor dict."""

    def __init__(self, config: UViTConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters -----------------------------------------------------------

    def _normal(self, rng, shape, std=0.02):
        return Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)

    def _zeros(self, shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def _ones(self, shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    def _init_params(self, rng):
        cfg = self.config
        d = cfg.embed_dim
        patch_dim = cfg.patch_size ** 2 * cfg.channels
        p = self.params
        p["patch_embed.w"] = self._normal(rng, (patch_dim, d))
        p["patch_embed.b"] = self._zeros((d,))
        p["token_embed.w"] = self._normal(rng, (cfg.vocab_size, d))
        p["pos_embed"] = self._normal(rng, (cfg.token_count, d))
        p["time_mlp.w1"] = self._normal(rng, (d, 4 * d))
        p["time_mlp.b1"] = self._zeros((4 * d,))
        p["time_mlp.w2"] = self._normal(rng, (4 * d, d))
        p["time_mlp.b2"] = self._zeros((d,))
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            p[f"{pre}.ln1.g"] = self._ones((d,))
            p[f"{pre}.ln1.b"] = self._zeros((d,))
            p[f"{pre}.attn.wqkv"] = self._normal(rng, (d, 3 * d))
            p[f"{pre}.attn.bqkv"] = self._zeros((3 * d,))
            p[f"{pre}.attn.wo"] = self._normal(rng, (d, d))
            p[f"{pre}.attn.bo"] = self._zeros((d,))
            p[f"{pre}.ln2.g"] = self._ones((d,))
            p[f"{pre}.ln2.b"] = self._zeros((d,))
            p[f"{pre}.mlp.w1"] = self._normal(rng, (d, 4 * d))
            p[f"{pre}.mlp.b1"] = self._zeros((4 * d,))
            p[f"{pre}.mlp.w2"] = self._normal(rng, (4 * d, d))
            p[f"{pre}.mlp.b2"] = self._zeros((d,))
            if i >= cfg.depth // 2:
                p[f"{pre}.skip.w"] = self._normal(rng, (2 * d, d))
                p[f"{pre}.skip.b"] = self._zeros((d,))
        p["head.ln.g"] = self._ones((d,))
        p["head.ln.b"] = self._zeros((d,))
        # Small but nonzero head init so gradients reach every parameter
        # from the very first step.
        p["head.w"] = self._normal(rng, (d, patch_dim), std=0.02)
        p["head.b"] = self._zeros((patch_dim,))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- submodules -----------------------------------------------------------

    def time_embed(self, t) -> Tensor:
        """Sinusoidal features of t through a learned 2-layer MLP. (B,) -> (B, d)."""
        feats = Tensor(sinusoidal_features(t, self.config.embed_dim))
        p = self.params
        h = T.gelu(T.add(T.matmul(feats, p["time_mlp.w1"]), p["time_mlp.b1"]))
        return T.add(T.matmul(h, p["time_mlp.w2"]), p["time_mlp.b2"])

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        normed = T.layer_norm(x)
        return T.add(T.mul(normed, self.params[f"{prefix}.g"]), self.params[f"{prefix}.b"])

    def attention_block(self, x: Tensor, block: int,
                        reweight: tuple[ReweightSpec, ...],
                        attention_sink: Optional[dict]) -> Tensor:
        """Pre-LN multi-head self-attention + MLP with residuals."""
        cfg = self.config
        p = self.params
        pre = f"blocks.{block}"
        b, n, d = x.shape
        heads = cfg.heads
        dh = d // heads

        h = self._layer_norm(x, f"{pre}.ln1")
        qkv = T.add(T.matmul(h, p[f"{pre}.attn.wqkv"]), p[f"{pre}.attn.bqkv"])
        q = T.narrow(qkv, 2, 0, d)
        k = T.narrow(qkv, 2, d, d)
        v = T.narrow(qkv, 2, 2 * d, d)

        def split(tns):
            return T.transpose(T.reshape(tns, (b, n, heads, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        live = [spec for spec in reweight if spec.applies_to_block(block)]
        if live:
            attn = T.mul(attn, Tensor(self._reweight_mask(live)))
        if attention_sink is not None:
            attention_sink[block] = attn.data.copy()
        mixed = T.matmul(attn, v)
        mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        x = T.add(x, T.add(T.matmul(mixed, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"]))

        h2 = self._layer_norm(x, f"{pre}.ln2")
        h2 = T.gelu(T.add(T.matmul(h2, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
        h2 = T.add(T.matmul(h2, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
        return T.add(x, h2)

    def _reweight_mask(self, specs: list[ReweightSpec]) -> np.ndarray:
        """Ones everywhere except c at (image rows, prompt columns)."""
        cfg = self.config
        n = cfg.token_count
        mask = np.ones((n, n), dtype=np.float32)
        rows = cfg.image_token_range
        for spec in specs:
            for j in spec.positions:
                if not (0 <= j < cfg.prompt_length):
                    raise ValidationError(
                        f"reweight position {j} outside prompt length {cfg.prompt_length}")
                mask[rows.start: rows.stop, 1 + j] *= np.float32(spec.scale)
        return mask

    # -- forward --------------------------------------------------------------

    def forward(self, x_t, prompt_tokens, t, hooks: EditHooks | None = None) -> Tensor:
        """Velocity prediction with x_t's shape. See EditHooks for editing inputs."""
        cfg = self.config
        hooks = hooks or EditHooks()
        x = T.as_tensor(x_t)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        if x.shape[1:] != cfg.latent_shape:
            raise ShapeError(f"latent shape {x.shape[1:]} does not match config {cfg.latent_shape}")
        b = x.shape[0]

        if prompt_tokens is None:
            ids = np.zeros((b, cfg.prompt_length), dtype=np.int64)   # all-pad: unconditional
        else:
            ids = np.atleast_2d(np.asarray(prompt_tokens))
        if ids.shape != (b, cfg.prompt_length) and ids.shape == (1, cfg.prompt_length):
            ids = np.repeat(ids, b, axis=0)
        if ids.shape != (b, cfg.prompt_length):
            raise ShapeError(f"prompt tokens shape {ids.shape}, expected ({b}, {cfg.prompt_length})")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise VocabularyError(f"token id out of range [0, {cfg.vocab_size})")

        if hooks.u_offset is not None:
            offset = np.asarray(hooks.u_offset, dtype=np.float32)
            if offset.shape not in (x.shape, x.shape[1:]):
                raise ShapeError(f"u_offset shape {offset.shape} incompatible with latent {x.shape}")
            x = T.add(x, Tensor(offset))

        t_arr = np.full((b,), t, dtype=np.float32) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float32)
        time_tok = T.reshape(self.time_embed(t_arr), (b, 1, cfg.embed_dim))
        prompt_tok = T.take(self.params["token_embed.w"], ids)
        img_tok = T.add(T.matmul(patchify(x, cfg.patch_size), self.params["patch_embed.w"]),
                        self.params["patch_embed.b"])
        seq = T.concat([time_tok, prompt_tok, img_tok], axis=1)
        seq = T.add(seq, self.params["pos_embed"])

        half = cfg.depth // 2
        reweight = hooks.reweight_specs()
        skips: list[Tensor] = []
        for i in range(cfg.depth):
            if i >= half:
                partner = skips[cfg.depth - 1 - i]
                fused = T.concat([seq, partner], axis=2)
                seq = T.add(T.matmul(fused, self.params[f"blocks.{i}.skip.w"]),
                            self.params[f"blocks.{i}.skip.b"])
            seq = self.attention_block(seq, i, reweight, hooks.attention_sink)
            if i < half:
                skips.append(seq)

        out = self._layer_norm(seq, "head.ln")
        img_part = T.narrow(out, 1, 1 + cfg.prompt_length, cfg.image_tokens)
        patches = T.add(T.matmul(img_part, self.params["head.w"]), self.params["head.b"])
        v = unpatchify(patches, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)
        return T.reshape(v, v.shape[1:]) if squeeze else v
