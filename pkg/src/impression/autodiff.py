"""A small reverse-mode differentiation tape over (C, H, W) arrays.

Ops take :class:`Var` inputs. When none of the inputs belongs to a tape the op
just computes its value, so the same network code serves inference and
training.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .warp import bilinear_warp as _warp, bilinear_warp_backward as _warp_backward


_branches: list | None = None


@contextmanager
def branch_log():
    """Collect the discrete branch every piecewise op takes while the block runs.

    ReLU records its active mask, warp the integer cell of each sample and the
    L1 box loss the sign of each residual. Two evaluations with equal logs lie
    on one smooth piece of the function.
    """
    global _branches
    outer, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = outer


def _log_branch(arr) -> None:
    if _branches is not None:
        _branches.append(np.asarray(arr).copy())


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"


class Tape:
    """Ordered record of differentiable ops; ``backward`` may run once."""

    def __init__(self):
        self._records: list[tuple[int, tuple[Var, ...], object]] = []
        self._size = 0
        self._watched: dict[str, Var] = {}
        self._consumed = False
        self.op_counts: Counter = Counter()

    def __len__(self):
        return len(self._records)

    def watch(self, value, name: str) -> Var:
        if name in self._watched:
            raise TapeError(f"{name!r} is already watched")
        var = Var(value, self, self._size)
        self._size += 1
        self._watched[name] = var
        return var

    def watch_all(self, values, prefix: str = "") -> dict[str, Var]:
        return {k: self.watch(v, prefix + k) for k, v in values.items()}

    def record(self, op: str, value, parents, vjp) -> Var:
        if self._consumed:
            raise TapeError("cannot record on a consumed tape")
        out = Var(value, self, self._size)
        self._size += 1
        self._records.append((out.index, tuple(parents), vjp))
        self.op_counts[op] += 1
        return out

    def backward(self, out: Var, seed=None) -> dict[str, np.ndarray]:
        """Propagate from ``out`` and return gradients of all watched values."""
        if self._consumed:
            raise TapeError("tape has already been consumed by backward()")
        if out.tape is not self:
            raise TapeError("output does not belong to this tape")
        self._consumed = True
        grads: list = [None] * self._size
        grads[out.index] = np.ones_like(out.value, dtype=float) if seed is None else seed
        for index, parents, vjp in reversed(self._records):
            g = grads[index]
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        self._records.clear()
        return {
            name: np.zeros_like(var.value, dtype=float) if grads[var.index] is None else grads[var.index]
            for name, var in self._watched.items()
        }


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _emit(op: str, value, parents, vjp) -> Var:
    for p in parents:
        if p.tape is not None:
            return p.tape.record(op, value, parents, vjp)
    return Var(value)


# -- ops ---------------------------------------------------------------------

def conv2d(x: Var, weight: Var, bias: Var | None = None, stride=1, padding=0, dilation=1) -> Var:
    kb = T.KernelBank(weight.value, stride=stride, dilation=dilation, padding=padding)
    out, cols = T.conv2d_with_cache(x.value, kb, None if bias is None else bias.value)
    shape = x.value.shape

    def vjp(g):
        gx, gw, gb = T.conv2d_backward(g, shape, cols, kb, input_grad=x.tape is not None)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, parents, vjp)


def relu(x: Var) -> Var:
    mask = x.value > 0
    _log_branch(mask)
    return _emit("relu", x.value * mask, (x,), lambda g: (g * mask,))


def add(a: Var, b: Var) -> Var:
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def add_scalar(a: Var, c: float) -> Var:
    return _emit("add_scalar", a.value + c, (a,), lambda g: (g,))


def concat(a: Var, b: Var) -> Var:
    ca = a.value.shape[0]
    return _emit("concat", np.concatenate([a.value, b.value]), (a, b), lambda g: (g[:ca], g[ca:]))


def warp(feature: Var, flow: Var, scale: Var | None = None) -> Var:
    s = None if scale is None else scale.value
    out = _warp(feature.value, flow.value, s)
    if _branches is not None:
        h, w = flow.shape[1:]
        _log_branch(np.floor(flow.value + np.mgrid[0:h, 0:w][::-1]))

    def vjp(g):
        gf, gflow, gs = _warp_backward(feature.value, flow.value, s, g)
        return (gf, gflow) if scale is None else (gf, gflow, gs)

    parents = (feature, flow) if scale is None else (feature, flow, scale)
    return _emit("warp", out, parents, vjp)


def pair_softmax(score_a: Var, score_b: Var) -> Var:
    """Weight of ``b`` in a two-way softmax taken independently per position."""
    d = score_b.value - score_a.value
    w = np.empty_like(d)
    pos = d >= 0
    w[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    w[~pos] = e / (1.0 + e)

    def vjp(g):
        gd = g * w * (1.0 - w)
        return -gd, gd

    return _emit("pair_softmax", w, (score_a, score_b), vjp)


def fuse(a: Var, b: Var, w: Var) -> Var:
    """``(1 - w) * a + w * b`` with a single-channel ``w`` broadcast over channels."""
    av, bv, wv = a.value, b.value, w.value
    out = (1.0 - wv) * av + wv * bv

    def vjp(g):
        gw = (g * (bv - av)).sum(axis=0, keepdims=True) if wv.shape[0] == 1 else g * (bv - av)
        return g * (1.0 - wv), g * wv, gw

    return _emit("fuse", out, (a, b, w), vjp)


def blend(a: Var, b: Var, g: float) -> Var:
    """``(1 - g) * a + g * b`` for a constant scalar ``g``."""
    return _emit("blend", (1.0 - g) * a.value + g * b.value, (a, b), lambda gr: (gr * (1.0 - g), gr * g))


def detection_loss(head: Var, targets, num_classes: int, weights=(1.0, 1.0, 1.0)) -> Var:
    """Scalar detection loss over a (1 + K + 4, h, w) head output.

    ``targets`` is a :class:`impression.nets.GridTargets`. Objectness uses
    binary cross-entropy averaged over all cells; class cross-entropy and L1
    box regression are averaged over positive cells.
    """
    k = num_classes
    z = head.value
    obj = z[0]
    cls = z[1 : 1 + k]
    box = z[1 + k :]
    pos = targets.positive
    npos = int(pos.sum())
    ncell = obj.size
    w_obj, w_cls, w_box = weights

    y = pos.astype(float)
    bce = np.maximum(obj, 0) - obj * y + np.log1p(np.exp(-np.abs(obj)))
    loss = w_obj * bce.sum() / ncell
    sig = 0.5 * (1.0 + np.tanh(0.5 * obj))
    g = np.zeros_like(z)
    g[0] = w_obj * (sig - y) / ncell
    if npos:
        m = cls.max(axis=0, keepdims=True)
        e = np.exp(cls - m)
        prob = e / e.sum(axis=0, keepdims=True)
        onehot = np.zeros_like(cls)
        ys, xs = np.nonzero(pos)
        onehot[targets.classes[ys, xs], ys, xs] = 1.0
        logp = cls - m - np.log(e.sum(axis=0, keepdims=True))
        loss += w_cls * -(onehot * logp).sum() / npos
        g[1 : 1 + k] = w_cls * (prob - onehot) * pos / npos
        diff = (box - targets.boxes) * pos
        loss += w_box * np.abs(diff).sum() / npos
        g[1 + k :] = w_box * np.sign(diff) / npos
        _log_branch(np.sign(diff))

    return _emit("detection_loss", np.float64(loss), (head,), lambda gr: (gr * g,))
