"""Binary and JSON wire formats shared with external tools.

Tensor files: little-endian header (magic "SPRT", u32 version=1, u32 h, u32 w,
u32 d) followed by h*w*d float32 values, row-major, bit-exact. Prompt sets are
plain JSON; instance label maps are 16-bit grayscale PNGs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"SPRT"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"tensor files hold h x w x d data, got shape {array.shape}")
    h, w, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, d))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated tensor header")
    magic, version, h, w, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size :]
    expected = h * w * d * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).copy()


def write_prompts(path, prompts) -> None:
    doc = {
        "image_id": prompts.image_id,
        "positives": [[int(r), int(c)] for r, c in prompts.positives],
        "negatives": [[int(r), int(c)] for r, c in prompts.negatives],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_prompts(path):
    from .prompting import PromptSet

    with open(path, "r") as fh:
        doc = json.load(fh)
    return PromptSet(
        image_id=doc["image_id"],
        positives=[tuple(p) for p in doc["positives"]],
        negatives=[tuple(p) for p in doc["negatives"]],
    )


def write_label_map(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535 or labels.min(initial=0) < 0:
        raise ValueError("label map does not fit 16-bit")
    Image.fromarray(labels.astype(np.uint16)).save(path)  # saved as 16-bit grayscale


def read_label_map(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64).astype(np.uint16)


def write_mask_file(path, mask: np.ndarray, score: float) -> None:
    """Patch mask as a d=1 tensor of exact {0.0, 1.0} plus a score sidecar."""
    path = Path(path)
    write_tensor(path, np.asarray(mask, dtype=np.float32))
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"score": float(score)}, fh)


def read_mask_file(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    tensor = read_tensor(path)
    if tensor.shape[2] != 1:
        raise ValueError(f"{path}: mask tensors must have d=1")
    values = tensor[:, :, 0]
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValueError(f"{path}: mask values must be exactly 0.0 or 1.0")
    with open(path.with_suffix(".json"), "r") as fh:
        sidecar = json.load(fh)
    return values.astype(bool), float(sidecar["score"])
