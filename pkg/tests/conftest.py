"""Shared fixtures: a tiny throwaway run for interface tests and the
desk-scale trained runs for the acceptance suite."""

import json
from pathlib import Path

import numpy as np
import pytest

from flowedit import persist
from flowedit.data import dataset_arrays, default_vocabulary, gen_shapes, gen_two_moons
from flowedit.flow import ArrayDataset, FlowConfig, MLPField, MLPFieldConfig, train
from flowedit.uvit import UViT, UViTConfig

# Tiny interface-test model: 16x16 images, 4x4 patches, shallow and narrow.
TINY_ARCH = dict(image_size=16, channels=1, patch_size=4, embed_dim=32, depth=4,
                 heads=4, prompt_length=8, vocab_size=64)

# Desk-scale training recipe shared by the acceptance fixtures; values were
# calibrated once and pinned (see tests/test_acceptance.py for thresholds).
SHAPES_TRAIN = dict(dataset_n=4096, dataset_seed=100, lr=1e-3, batch_size=16,
                    caption_dropout=0.2, steps=4000, train_seed=42, model_seed=0)
MOONS_TRAIN = dict(n=8000, noise_sd=0.1, data_seed=1, lr=1e-3, batch_size=256,
                   steps=6000, train_seed=3, model_seed=0)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A quickly trained tiny checkpoint + bank on disk for CLI/service tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = UViTConfig(**TINY_ARCH)
    model = UViT(cfg, seed=1)
    vocab = default_vocabulary()
    samples = gen_shapes(256, seed=5)
    images, tokens = dataset_arrays(samples, vocab, cfg.prompt_length)
    result = train(model, ArrayDataset(images, tokens),
                   {"lr": 1e-3, "batch_size": 8, "caption_dropout": 0.2},
                   steps=60, seed=9, flow=FlowConfig())
    ckpt_path = out / "checkpoint.bin"
    persist.save_checkpoint(ckpt_path, result.checkpoint)

    from flowedit.evaluation import collect_bank_batched

    pos = [s for s in samples if s.size >= 4.5][:6]
    neg = [s for s in samples if s.size <= 3.5][:6]
    pos_i, pos_t = dataset_arrays(pos, vocab, cfg.prompt_length)
    neg_i, neg_t = dataset_arrays(neg, vocab, cfg.prompt_length)
    bank = collect_bank_batched(model, pos_i, pos_t, neg_i, neg_t, "large", 10)
    bank_path = out / "bank.bin"
    persist.save_bank(bank_path, bank)
    return {"dir": out, "checkpoint": ckpt_path, "bank": bank_path,
            "model": model, "vocab": vocab}


@pytest.fixture(scope="session")
def moons_model():
    """Two-moons MLP field trained with the pinned calibration recipe."""
    cfg = MOONS_TRAIN
    data = gen_two_moons(cfg["n"], noise_sd=cfg["noise_sd"], seed=cfg["data_seed"])
    model = MLPField(MLPFieldConfig(), seed=cfg["model_seed"])
    result = train(model, ArrayDataset(data),
                   {"lr": cfg["lr"], "batch_size": cfg["batch_size"]},
                   steps=cfg["steps"], seed=cfg["train_seed"])
    assert not result.aborted
    return {"model": model, "result": result}


@pytest.fixture(scope="session")
def shapes_model():
    """Desk-scale U-ViT trained on captioned shapes (pinned recipe)."""
    cfg = SHAPES_TRAIN
    vocab = default_vocabulary()
    samples = gen_shapes(cfg["dataset_n"], seed=cfg["dataset_seed"])
    model = UViT(UViTConfig(), seed=cfg["model_seed"])
    images, tokens = dataset_arrays(samples, vocab, UViTConfig().prompt_length)
    result = train(model, ArrayDataset(images, tokens),
                   {"lr": cfg["lr"], "batch_size": cfg["batch_size"],
                    "caption_dropout": cfg["caption_dropout"]},
                   steps=cfg["steps"], seed=cfg["train_seed"])
    assert not result.aborted
    return {"model": model, "vocab": vocab, "result": result}


@pytest.fixture(scope="session")
def shapes_banks(shapes_model):
    """Direction banks for the "large" attribute at grids N in {10, 25, 50, 100}."""
    from flowedit.evaluation import collect_bank_batched, size_direction_sets

    model = shapes_model["model"]
    vocab = shapes_model["vocab"]
    length = UViTConfig().prompt_length
    pos, neg = size_direction_sets(per_side=128)
    pos_i, pos_t = dataset_arrays(pos, vocab, length)
    neg_i, neg_t = dataset_arrays(neg, vocab, length)
    return {n: collect_bank_batched(model, pos_i, pos_t, neg_i, neg_t, "large", n)
            for n in (10, 25, 50, 100)}
