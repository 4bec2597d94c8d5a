"""Discrete masks <-> signed label tensors.

Two codings are supported. ``signed_single`` (binary task only) maps the mask
to one channel holding +1 on foreground and -1 on background. ``onehot``
maps a C-class mask to C channels holding +1 on the true class, -1 elsewhere.
"""

from __future__ import annotations

import numpy as np

CODINGS = ("signed_single", "onehot")


def channels(classes: int, coding: str = "signed_single") -> int:
    if coding == "signed_single":
        if classes != 2:
            raise ValueError("signed_single coding needs exactly 2 classes")
        return 1
    if coding == "onehot":
        return classes
    raise ValueError(f"unknown label coding {coding!r}; expected one of {CODINGS}")


def encode(mask: np.ndarray, classes: int = 2, coding: str = "signed_single") -> np.ndarray:
    """Return a float32 ``(C_eff, H, W)`` tensor with entries in {-1, +1}."""
    mask = np.asarray(mask)
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if mask.ndim != 2:
        raise ValueError(f"mask must be H x W, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= classes):
        raise ValueError(f"mask entries must lie in 0..{classes - 1}, found max {mask.max()}")
    n = channels(classes, coding)
    if coding == "signed_single":
        return np.where(mask == 1, 1.0, -1.0).astype(np.float32)[None]
    onehot = mask[None] == np.arange(n).reshape(-1, 1, 1)
    return np.where(onehot, 1.0, -1.0).astype(np.float32)


def decode(x: np.ndarray, threshold: float = 0.0, coding: str = "signed_single") -> np.ndarray:
    """Turn a (soft) label tensor back into an integer ``H x W`` mask.

    Single-channel: foreground where value > threshold (strictly).
    Multi-channel: argmax over channels; ties go to the lower class index.
    """
    if coding not in CODINGS:
        raise ValueError(f"unknown label coding {coding!r}; expected one of {CODINGS}")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if coding == "signed_single" or x.shape[0] == 1:
        return (x[0] > threshold).astype(np.uint8)
    return np.argmax(x, axis=0).astype(np.uint8)
