"""Versioned binary containers with content digests, and PNG image export.

Layout: magic "FEC1" | u64 header length | JSON header | raw tensor payload |
sha256 of everything before the digest. The header carries the container
kind, a JSON meta dict, and per-tensor (name, dtype, shape, offset). All
writes are byte-deterministic: sorted keys, fixed separators, no
timestamps.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DigestMismatchError,
    MissingFileError,
    PersistenceError,
    UnsupportedFormatError,
)

_MAGIC = b"FEC1"
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<u1"}


def save_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise PersistenceError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = json.dumps(
        {"format_version": 1, "kind": kind, "meta": meta, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = _MAGIC + struct.pack("<Q", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def load_container(path, expect_kind: str | None = None):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    blob = path.read_bytes()
    if len(blob) < 44 or blob[:4] != _MAGIC:
        raise UnsupportedFormatError(f"{path} is not a flowedit container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatchError(f"content digest mismatch in {path}")
    header_len = struct.unpack("<Q", body[4:12])[0]
    header = json.loads(body[12:12 + header_len].decode("utf-8"))
    if header.get("format_version") != 1:
        raise UnsupportedFormatError(f"unknown format version {header.get('format_version')}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise UnsupportedFormatError(f"expected kind '{expect_kind}', found '{header['kind']}'")
    payload = body[12 + header_len:]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], tensors


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, checkpoint: dict) -> None:
    tensors = {f"params/{k}": v for k, v in checkpoint["params"].items()}
    opt = checkpoint.get("optimizer")
    meta = {
        "arch": checkpoint["arch"],
        "flow": checkpoint["flow"],
        "seed": checkpoint.get("seed"),
        "rng_state": _encode_rng(checkpoint.get("rng_state")),
        "optimizer_step_count": opt["step_count"] if opt else None,
    }
    if opt:
        tensors.update({f"optim/m/{k}": v for k, v in opt["m"].items()})
        tensors.update({f"optim/v/{k}": v for k, v in opt["v"].items()})
    history = checkpoint.get("loss_history")
    tensors["loss_history"] = np.asarray(history if history is not None else [], dtype=np.float32)
    save_container(path, "checkpoint", meta, tensors)


def load_checkpoint(path) -> dict:
    _, meta, tensors = load_container(path, expect_kind="checkpoint")
    params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
    checkpoint = {
        "arch": meta["arch"],
        "flow": meta["flow"],
        "seed": meta["seed"],
        "rng_state": _decode_rng(meta["rng_state"]),
        "params": params,
        "loss_history": tensors.get("loss_history", np.zeros(0, np.float32)),
        "optimizer": None,
    }
    if meta.get("optimizer_step_count") is not None:
        checkpoint["optimizer"] = {
            "step_count": meta["optimizer_step_count"],
            "m": {k[len("optim/m/"):]: v for k, v in tensors.items() if k.startswith("optim/m/")},
            "v": {k[len("optim/v/"):]: v for k, v in tensors.items() if k.startswith("optim/v/")},
        }
    return checkpoint


def _encode_rng(state):
    # PCG64 state holds 128-bit ints; stringify for JSON round-tripping.
    if state is None:
        return None
    return json.loads(json.dumps(state, default=str))


def _decode_rng(state):
    if state is None:
        return None
    out = dict(state)
    inner = dict(out.get("state", {}))
    for key in ("state", "inc"):
        if key in inner:
            inner[key] = int(inner[key])
    out["state"] = inner
    return out


# -- direction banks ---------------------------------------------------------------


def save_bank(path, bank) -> None:
    meta = {
        "grid_n": bank.grid_n,
        "latent_shape": list(bank.latent_shape),
        "provenance": bank.provenance,
    }
    tensors = {f"directions/{k}": v for k, v in bank.directions.items()}
    save_container(path, "direction_bank", meta, tensors)


def load_bank(path):
    from .editing import DirectionBank

    _, meta, tensors = load_container(path, expect_kind="direction_bank")
    directions = {k[len("directions/"):]: v.astype(np.float32)
                  for k, v in tensors.items() if k.startswith("directions/")}
    return DirectionBank(
        grid_n=int(meta["grid_n"]),
        latent_shape=tuple(meta["latent_shape"]),
        directions=directions,
        provenance=meta.get("provenance", {}),
    )


# -- datasets ------------------------------------------------------------------------


def save_shapes_dataset(path, samples, seed: int) -> None:
    meta = {
        "seed": seed,
        "n": len(samples),
        "captions": [s.caption for s in samples],
        "shapes": [s.shape for s in samples],
        "positions": [s.position for s in samples],
    }
    tensors = {
        "images": np.stack([s.image for s in samples]).astype(np.float32),
        "sizes": np.array([s.size for s in samples], dtype=np.float32),
        "brightness": np.array([s.brightness for s in samples], dtype=np.float32),
        "centers": np.array([[s.cx, s.cy] for s in samples], dtype=np.float32),
    }
    save_container(path, "dataset", meta, tensors)


def load_shapes_dataset(path):
    from .data import ShapeSample

    _, meta, tensors = load_container(path, expect_kind="dataset")
    samples = []
    for i in range(meta["n"]):
        samples.append(ShapeSample(
            image=tensors["images"][i],
            shape=meta["shapes"][i],
            size=float(tensors["sizes"][i]),
            brightness=float(tensors["brightness"][i]),
            cx=float(tensors["centers"][i][0]),
            cy=float(tensors["centers"][i][1]),
            position=meta["positions"][i],
            caption=meta["captions"][i],
            seed=i,
        ))
    return samples, meta["seed"]


# -- images --------------------------------------------------------------------------


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """Clamp to [0,1], quantize to 8 bit, encode grayscale or RGB PNG."""
    import io

    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    quant = np.clip(arr, 0.0, 1.0)
    quant = np.round(quant * 255.0).astype(np.uint8)
    img = Image.fromarray(quant, mode="L" if quant.ndim == 2 else "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, image: np.ndarray) -> None:
    Path(path).write_bytes(image_to_png_bytes(image))


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr
