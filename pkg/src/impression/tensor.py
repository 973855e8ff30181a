"""Dense (C, H, W) tensors and the convolution primitives built on them.

Tensors are plain numpy arrays in channel-major layout. Everything defaults
to float64; float32 is accepted where callers opt in explicitly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"IMPT"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a contiguous 3-D array of the requested dtype."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class KernelBank:
    """Convolution weights of shape (out, in, kh, kw) plus geometry."""

    weight: np.ndarray
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel bank must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        d, p, s = self.dilation, self.padding, self.stride
        return (h + 2 * p - d * (kh - 1) - 1) // s + 1, (w + 2 * p - d * (kw - 1) - 1) // s + 1


def _im2col(x: np.ndarray, kb: KernelBank) -> np.ndarray:
    c, h, w = x.shape
    kh, kw = kb.weight.shape[2:]
    ho, wo = kb.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"convolution output would be empty for input {x.shape}")
    p, d, s = kb.padding, kb.dilation, kb.stride
    if p:
        xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, p : p + h, p : p + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i * d : i * d + s * (ho - 1) + 1 : s, j * d : j * d + s * (wo - 1) + 1 : s]
    return cols


def conv2d_with_cache(x: np.ndarray, kb: KernelBank, bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate and also return the im2col buffer for a later backward."""
    if x.ndim != 3:
        raise ShapeError(f"expected (C, H, W) input, got {x.shape}")
    if x.shape[0] != kb.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, kernels expect {kb.in_channels}")
    cols = _im2col(x, kb)
    ho, wo = cols.shape[-2:]
    out = kb.weight.reshape(kb.out_channels, -1) @ cols.reshape(-1, ho * wo)
    out = out.reshape(kb.out_channels, ho, wo)
    if bias is not None:
        out += np.asarray(bias).reshape(-1, 1, 1)
    return out, cols


def conv2d(x: np.ndarray, kernels: KernelBank, bias=None) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of a (C, H, W) tensor."""
    return conv2d_with_cache(x, kernels, bias)[0]


def conv2d_backward(grad_out: np.ndarray, input_shape, cols: np.ndarray, kb: KernelBank, input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias.

    With ``input_grad=False`` the (often largest) input gradient is skipped
    and returned as ``None``.
    """
    o = kb.out_channels
    c, h, w = input_shape
    kh, kw = kb.weight.shape[2:]
    ho, wo = grad_out.shape[1:]
    g2 = grad_out.reshape(o, -1)
    grad_w = (g2 @ cols.reshape(-1, ho * wo).T).reshape(kb.weight.shape)
    grad_b = g2.sum(axis=1)
    if not input_grad:
        return None, grad_w, grad_b
    dcols = (kb.weight.reshape(o, -1).T @ g2).reshape(c, kh, kw, ho, wo)
    p, d, s = kb.padding, kb.dilation, kb.stride
    dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i * d : i * d + s * (ho - 1) + 1 : s, j * d : j * d + s * (wo - 1) + 1 : s] += dcols[:, i, j]
    grad_x = dxp[:, p : p + h, p : p + w] if p else dxp
    return grad_x, grad_w, grad_b


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise ``a * x + y``."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise product; a (1, H, W) ``y`` is broadcast over channels."""
    if y.shape != x.shape and not (y.ndim == 3 and y.shape[0] == 1 and y.shape[1:] == x.shape[1:]):
        raise ShapeError(f"cannot multiply {x.shape} by {y.shape}")
    return x * y


# -- serialization -----------------------------------------------------------

def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim != 3:
        raise ShapeError(f"only (C, H, W) tensors can be serialized, got {arr.shape}")
    fh.write(MAGIC)
    fh.write(struct.pack("<5I", FORMAT_VERSION, _DTYPE_TAGS[dt], *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, tag, c, h, w = struct.unpack("<5I", fh.read(20))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dt = _TAG_DTYPES[tag]
    n = c * h * w
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).reshape(c, h, w).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(Path(path), "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)
