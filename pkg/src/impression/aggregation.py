"""Quality-aware fusion of the impression with a new keyframe feature."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .nets import Params, quality_forward
from .tensor import ShapeError


def _same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def adaptive_weights(impression_aligned: np.ndarray, keyfeat: np.ndarray, params: Params) -> np.ndarray:
    """Per-position softmax weight (1, h, w) of ``keyfeat`` against the impression."""
    _same_shape(impression_aligned, keyfeat)
    s_imp = quality_forward(impression_aligned, params)
    s_key = quality_forward(keyfeat, params)
    return ad.pair_softmax(Var(s_imp), Var(s_key)).value


def fuse(impression_aligned: np.ndarray, keyfeat: np.ndarray, w) -> np.ndarray:
    """Task feature ``(1 - w) * impression + w * keyfeat``; ``w`` is a map or scalar."""
    _same_shape(impression_aligned, keyfeat)
    w = np.asarray(w, dtype=float)
    if w.ndim == 3 and w.shape != (1,) + keyfeat.shape[1:]:
        raise ShapeError(f"weight map {w.shape} does not match feature {keyfeat.shape}")
    return (1.0 - w) * impression_aligned + w * keyfeat


def impression_update(keyfeat: np.ndarray, task_feat: np.ndarray, g: float) -> np.ndarray:
    """Memory-gated impression ``(1 - g) * keyfeat + g * task_feat``."""
    _same_shape(keyfeat, task_feat)
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"memory gate must lie in [0, 1], got {g}")
    return (1.0 - g) * keyfeat + g * task_feat


def contribution_profile(g: float, fixed_w: float, n_segments: int) -> list[float]:
    """Linear weight of keyframe ``k - m`` (m = 0..n-1) in the task feature of segment ``k``.

    Assumes spatially uniform weights ``fixed_w`` and identity warps, with the
    first segment's task feature equal to its own keyframe feature.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if not 0.0 <= fixed_w <= 1.0 or not 0.0 <= g <= 1.0:
        raise ValueError("g and fixed_w must lie in [0, 1]")
    # coefficient vectors over keyframes 0..n-1
    n = n_segments
    imp = np.zeros(n)
    imp[0] = 1.0
    task = imp.copy()
    for k in range(1, n):
        key = np.zeros(n)
        key[k] = 1.0
        task = (1.0 - fixed_w) * imp + fixed_w * key
        imp = (1.0 - g) * key + g * task
    return task[::-1].tolist()


def write_contribution_csv(path, g: float, fixed_w: float, n_segments: int) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["offset", "coefficient"])
        for m, c in enumerate(contribution_profile(g, fixed_w, n_segments)):
            out.writerow([m, repr(c)])
