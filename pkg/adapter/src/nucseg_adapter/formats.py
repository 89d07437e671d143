"""Interchange file writers (independent implementation of the wire formats).

Tensor files: little-endian header (magic "SPRT", u32 version=1, u32 h, u32 w,
u32 d) followed by h*w*d float32 values, row-major. Mask files are d=1 tensors
with values exactly 0.0/1.0 plus a JSON sidecar {"score": float}.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

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


def write_mask(path, mask: np.ndarray, score: float) -> None:
    path = Path(path)
    values = np.where(np.asarray(mask, dtype=bool), np.float32(1.0), np.float32(0.0))
    write_tensor(path, values)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"score": float(score)}, fh)


def read_prompts(path):
    with open(path, "r") as fh:
        doc = json.load(fh)
    positives = [(int(r), int(c)) for r, c in doc["positives"]]
    negatives = [(int(r), int(c)) for r, c in doc["negatives"]]
    return doc["image_id"], positives, negatives
