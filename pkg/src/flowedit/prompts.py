"""Closed-vocabulary prompt handling and attention reweighting.

Prompts are fixed-length token sequences over a small template vocabulary
(id 0 is reserved for padding). Attention reweighting scales post-softmax
attention entries from image-token rows to selected prompt-token columns;
rows are deliberately not renormalized afterwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError, VocabularyError

PAD_ID = 0


class Vocabulary:
    """Deterministic word <-> id map of fixed capacity V; id 0 is padding."""

    def __init__(self, words: list[str], size: int = 64):
        if len(set(words)) != len(words):
            raise VocabularyError("duplicate words in vocabulary")
        if len(words) + 1 > size:
            raise VocabularyError(f"{len(words)} words exceed vocabulary capacity {size - 1}")
        self.size = size
        self.word_to_id = {w: i + 1 for i, w in enumerate(words)}
        self.id_to_word = {i + 1: w for i, w in enumerate(words)}

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    @property
    def words(self) -> list[str]:
        return [self.id_to_word[i] for i in sorted(self.id_to_word)]

    def to_dict(self) -> dict:
        return {"size": self.size, "words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], size=d["size"])


def tokenize(caption: str, vocab: Vocabulary, length: int) -> np.ndarray:
    """Left-aligned token ids padded with PAD_ID to exactly `length`."""
    words = caption.split()
    if len(words) > length:
        raise VocabularyError(f"caption has {len(words)} words, prompt length is {length}")
    ids = np.full(length, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        if w not in vocab.word_to_id:
            raise VocabularyError(f"unknown word '{w}'")
        ids[i] = vocab.word_to_id[w]
    return ids


def detokenize(ids: np.ndarray, vocab: Vocabulary) -> str:
    words = []
    for t in np.asarray(ids).tolist():
        if t == PAD_ID:
            continue
        if t not in vocab.id_to_word:
            raise VocabularyError(f"token id {t} is not in the vocabulary")
        words.append(vocab.id_to_word[t])
    return " ".join(words)


def find_target_tokens(prompt_ids: np.ndarray, target_words: list[str], vocab: Vocabulary) -> list[int]:
    """Prompt positions whose id matches any target word. Absent words warn, not raise."""
    target_ids = set()
    for w in target_words:
        if w not in vocab.word_to_id:
            warnings.warn(f"target word '{w}' is not in the vocabulary", stacklevel=2)
            continue
        target_ids.add(vocab.word_to_id[w])
    positions = [j for j, t in enumerate(np.asarray(prompt_ids).tolist()) if t in target_ids]
    if not positions:
        warnings.warn(f"no prompt token matches targets {target_words}", stacklevel=2)
    return positions


@dataclass(frozen=True)
class ReweightSpec:
    """Attention rescaling request: scale c on prompt positions, gated by t_edit."""

    positions: tuple[int, ...]
    scale: float
    t_edit: float = 0.5
    blocks: tuple[int, ...] | str = "all"   # "all" or explicit block indices
    allow_negative: bool = False

    def __post_init__(self):
        if self.scale < 0 and not self.allow_negative:
            raise ValidationError(
                f"reweight scale {self.scale} is negative; pass allow_negative to permit it"
            )
        if not (0.0 < self.t_edit <= 1.0):
            raise ValidationError(f"t_edit must lie in (0, 1], got {self.t_edit}")

    def applies_to_block(self, block: int) -> bool:
        return self.blocks == "all" or block in self.blocks


def apply_reweight(m: np.ndarray, target_cols, c: float, image_rows: range) -> np.ndarray:
    """Scale post-softmax attention entries (image row, target column) by c.

    `m` is one head's attention map (rows attend over columns); every entry
    outside image_rows x target_cols is returned untouched, and no
    renormalization is performed.
    """
    cols = list(target_cols)
    n = m.shape[-1]
    if any(j < 0 or j >= n for j in cols):
        raise ShapeError(f"reweight column out of range for {m.shape}")
    if len(image_rows) and (image_rows.start < 0 or image_rows.stop > m.shape[-2]):
        raise ShapeError(f"image row range {image_rows} out of range for {m.shape}")
    if not cols:
        return m
    out = m.copy()
    rows = slice(image_rows.start, image_rows.stop)
    out[..., rows, cols] = out[..., rows, cols] * np.float32(c)
    return out


def prompt_append(ids: np.ndarray, words: list[str], vocab: Vocabulary) -> np.ndarray:
    """Append words after the last non-pad token, keeping total length fixed."""
    ids = np.asarray(ids)
    used = int(np.count_nonzero(ids != PAD_ID))
    if used + len(words) > ids.shape[0]:
        raise VocabularyError(f"appending {len(words)} words overflows prompt length {ids.shape[0]}")
    out = ids.copy()
    for k, w in enumerate(words):
        if w not in vocab.word_to_id:
            raise VocabularyError(f"unknown word '{w}'")
        out[used + k] = vocab.word_to_id[w]
    return out


def prompt_remove(ids: np.ndarray, words: list[str], vocab: Vocabulary) -> np.ndarray:
    """Remove every occurrence of the given words, re-packing left and re-padding."""
    drop = {vocab.word_to_id[w] for w in words if w in vocab.word_to_id}
    kept = [t for t in np.asarray(ids).tolist() if t != PAD_ID and t not in drop]
    out = np.full_like(np.asarray(ids), PAD_ID)
    out[: len(kept)] = kept
    return out


def prompt_replace(ids: np.ndarray, old: str, new: str, vocab: Vocabulary) -> np.ndarray:
    for w in (old, new):
        if w not in vocab.word_to_id:
            raise VocabularyError(f"unknown word '{w}'")
    ids = np.asarray(ids)
    old_id = vocab.word_to_id[old]
    if not np.any(ids == old_id):
        raise VocabularyError(f"replace target '{old}' is absent from the prompt")
    out = ids.copy()
    out[out == old_id] = vocab.word_to_id[new]
    return out


def prompt_edit(ids: np.ndarray, operation: str, vocab: Vocabulary, **kwargs) -> np.ndarray:
    """Dispatch append/remove/replace prompt edits by name."""
    if operation == "append":
        return prompt_append(ids, kwargs["words"], vocab)
    if operation == "remove":
        return prompt_remove(ids, kwargs["words"], vocab)
    if operation == "replace":
        return prompt_replace(ids, kwargs["old"], kwargs["new"], vocab)
    raise ValidationError(f"unknown prompt operation '{operation}'")
