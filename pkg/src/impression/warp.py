"""Bilinear backward warping of feature maps along a flow field.

For a target position ``p`` the warped value is read from ``p + flow(p)`` in
the reference feature. Channel 0 of the flow is dx, channel 1 is dy, both in
feature-grid pixels. Samples falling outside the grid read zero.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import ShapeError


def translation_flow(dx: float, dy: float, h: int, w: int) -> np.ndarray:
    """Spatially constant flow field of shape (2, h, w)."""
    if h < 1 or w < 1:
        raise ValueError("flow field needs h, w >= 1")
    flow = np.empty((2, h, w))
    flow[0] = dx
    flow[1] = dy
    return flow


def _check(feature, flow, scale):
    if feature.ndim != 3 or flow.shape != (2,) + feature.shape[1:]:
        raise ShapeError(f"flow {flow.shape} does not match feature {feature.shape}")
    if scale is not None and scale.shape != (1,) + feature.shape[1:]:
        raise ShapeError(f"scale map {scale.shape} does not match feature {feature.shape}")


@lru_cache(maxsize=32)
def _grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()]).astype(float)


def _sampling(flow):
    """Corner indices (4, HW), masked bilinear weights (4, HW) and fractions.

    Corners are ordered (y0, x0), (y0, x1), (y1, x0), (y1, x1). Out-of-grid
    corners get index 0 and weight 0.
    """
    _, h, w = flow.shape
    src = _grid(h, w) + flow.reshape(2, -1)
    base = np.floor(src)
    ax, ay = src - base
    x0, y0 = base.astype(np.intp)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1])
    ys = np.stack([y0, y0, y0 + 1, y0 + 1])
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    idx = np.where(valid, ys * w + xs, 0)
    bx, by = 1.0 - ax, 1.0 - ay
    wts = np.stack([bx * by, ax * by, bx * ay, ax * ay]) * valid
    return idx, wts, valid, ax, ay


def bilinear_warp(feature: np.ndarray, flow: np.ndarray, scale: np.ndarray | None = None) -> np.ndarray:
    """Warp ``feature`` (C, H, W) by ``flow`` (2, H, W), times ``scale`` (1, H, W)."""
    _check(feature, flow, scale)
    c, h, w = feature.shape
    # Two cells of zero padding on every side; clamping the base cell into the
    # padded range sends fully out-of-grid samples to zeros without masks.
    src = _grid(h, w) + flow.reshape(2, -1)
    base = np.floor(src)
    ax, ay = src - base
    x0 = np.clip(base[0], -2, w).astype(np.intp) + 2
    y0 = np.clip(base[1], -2, h).astype(np.intp) + 2
    stride = w + 4
    padded = np.zeros((c, h + 4, stride), dtype=np.result_type(feature, flow))
    padded[:, 2 : h + 2, 2 : w + 2] = feature
    flat = padded.reshape(c, -1)
    i00 = y0 * stride + x0
    bx, by = 1.0 - ax, 1.0 - ay
    out = (flat[:, i00] * (bx * by) + flat[:, i00 + 1] * (ax * by)
           + flat[:, i00 + stride] * (bx * ay) + flat[:, i00 + stride + 1] * (ax * ay))
    out = out.reshape(c, h, w)
    if scale is not None:
        out = out * scale
    return out


def bilinear_warp_backward(feature, flow, scale, upstream_grad):
    """Return ``(grad_feature, grad_flow, grad_scale)`` for :func:`bilinear_warp`.

    At integer sample coordinates the flow gradient is the one-sided
    derivative from the floor cell.
    """
    _check(feature, flow, scale)
    if upstream_grad.shape != feature.shape:
        raise ShapeError(f"upstream gradient {upstream_grad.shape} != {feature.shape}")
    c, h, w = feature.shape
    n = h * w
    idx, wts, valid, ax, ay = _sampling(flow)
    vals = feature.reshape(c, -1)[:, idx] * valid  # (c, 4, n)
    up = upstream_grad.reshape(c, n)

    sampled = (vals * wts).sum(axis=1)
    grad_scale = (up * sampled).sum(axis=0).reshape(1, h, w)

    g = up if scale is None else up * scale.reshape(1, n)
    v00, v01, v10, v11 = vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3]
    grad_flow = np.empty((2, n))
    grad_flow[0] = (g * ((1 - ay) * (v01 - v00) + ay * (v11 - v10))).sum(axis=0)
    grad_flow[1] = (g * ((1 - ax) * (v10 - v00) + ax * (v11 - v01))).sum(axis=0)

    flat_idx = idx[None] + (np.arange(c) * n)[:, None, None]
    grad_feature = np.bincount(
        flat_idx.ravel(), weights=(g[:, None, :] * wts).ravel(), minlength=c * n
    ).reshape(c, h, w)
    return grad_feature, grad_flow.reshape(2, h, w), grad_scale
