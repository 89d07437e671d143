"""TorchScript model loading and invocation.

Encoder contract: module(x) -> features, with x a float32 [1, 3, P, P] tensor
scaled to [0, 1] and features [1, d, c, c] (c must divide P). Segmenter
contract: module(x, points, labels) -> (logits, score), with points a float32
[1, n, 2] tensor of (x, y) pixel coordinates, labels [1, n] with 1 for the
positive and 0 for negatives, logits [1, 1, P, P] (mask = logits > 0), and
score a scalar tensor. Inference runs on CPU with gradients disabled.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch


class CheckpointMissing(FileNotFoundError):
    pass


def load_model(path) -> torch.jit.ScriptModule:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(
            f"model checkpoint {path} not found; export your encoder or promptable "
            f"segmenter with torch.jit.script(...).save() and pass its path via --model"
        )
    model = torch.jit.load(str(path), map_location="cpu")
    model.eval()
    return model


def _to_tensor(patch: np.ndarray) -> torch.Tensor:
    arr = np.asarray(patch, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def encode_patch(model, patch: np.ndarray) -> np.ndarray:
    """Run the encoder on one RGB patch; returns a (c, c, d) float32 grid."""
    with torch.no_grad():
        out = model(_to_tensor(patch))
    if out.dim() != 4 or out.shape[0] != 1 or out.shape[2] != out.shape[3]:
        raise ValueError(f"encoder must return [1, d, c, c], got {tuple(out.shape)}")
    return out[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def segment_group(model, patch: np.ndarray, positive, negatives):
    """Run the segmenter on one prompt group; returns (bool mask, score)."""
    pts = [(float(positive[1]), float(positive[0]))]
    pts += [(float(c), float(r)) for r, c in negatives]
    labels = [1.0] + [0.0] * len(negatives)
    points_t = torch.tensor([pts], dtype=torch.float32)
    labels_t = torch.tensor([labels], dtype=torch.float32)
    with torch.no_grad():
        logits, score = model(_to_tensor(patch), points_t, labels_t)
    if logits.dim() != 4 or logits.shape[:2] != (1, 1):
        raise ValueError(f"segmenter must return logits [1, 1, P, P], got {tuple(logits.shape)}")
    mask = (logits[0, 0] > 0).numpy()
    return mask, float(score.reshape(-1)[0])
