"""Keyframe placement, the runtime cost model and speed/accuracy sweeps."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .nets import ModelSpec, NetSpec, Params, feature_forward, flow_forward, task_forward
from .pipeline import SegmentConfig, run_impression
from .warp import bilinear_warp


class UntrainedParamsError(ValueError):
    """Raised when a benchmark is asked to score parameters that were never trained."""


def _check_lk(l: int, k: int) -> None:
    if l < 1:
        raise ValueError(f"segment length must be >= 1, got {l}")
    if not 0 <= k < l:
        raise ValueError(f"keyframe offset {k} outside [0, {l})")


def propagation_distance_sum(l: int, k: int) -> int:
    """Total warp distance of one segment, counting the impression hop of length ``l``."""
    _check_lk(l, k)
    before, after = k, l - 1 - k
    return before * (before + 1) // 2 + after * (after + 1) // 2 + l


def avg_propagation_distance(l: int, k: int) -> float:
    """Mean per-frame propagation distance for keyframe offset ``k`` in a segment of ``l``."""
    return propagation_distance_sum(l, k) / l


def optimal_keyframe(l: int) -> int:
    """Offset minimizing the average propagation distance; ties go to the smaller offset."""
    if l < 1:
        raise ValueError(f"segment length must be >= 1, got {l}")
    best = min(range(l), key=lambda k: (propagation_distance_sum(l, k), k))
    return best


@dataclass(frozen=True)
class CostModel:
    """Per-invocation cost of each pipeline component (any consistent unit)."""

    c_feat: float
    c_flow: float
    c_warp: float
    c_agg: float
    c_task: float

    def __post_init__(self):
        for name in ("c_feat", "c_flow", "c_warp", "c_agg", "c_task"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def runtime_ratio_exact(cost: CostModel, l: int):
    """Cost of one sparse segment over ``l`` per-frame evaluations.

    Works for floats and for :class:`fractions.Fraction` fields alike.
    """
    if l < 1:
        raise ValueError(f"segment length must be >= 1, got {l}")
    den = l * (cost.c_feat + cost.c_task)
    if den == 0:
        raise ZeroDivisionError("feature and task costs are both zero")
    return (cost.c_agg + l * (cost.c_warp + cost.c_flow + cost.c_task) + cost.c_feat) / den


def runtime_ratio_approx(cost: CostModel, l: int):
    """Two-term estimate: flow cost over feature cost plus one feature pass per segment."""
    if l < 1:
        raise ValueError(f"segment length must be >= 1, got {l}")
    if cost.c_feat == 0:
        raise ZeroDivisionError("feature cost is zero")
    return cost.c_flow / cost.c_feat + Fraction(1, l)


def _best_time(fn, repeats: int, number: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def calibrate_cost_model(params: Params, image_size: int = 64, repeats: int = 7, number: int = 5,
                         seed: int = 0) -> CostModel:
    """Time each component in isolation and return milliseconds per call (minimum over repeats)."""
    rng = np.random.default_rng(seed)
    c = params.spec.image_channels
    a = rng.uniform(0, 1, (c, image_size, image_size))
    b = rng.uniform(0, 1, (c, image_size, image_size))
    fa, fb = feature_forward(a, params), feature_forward(b, params)
    flow, scale = flow_forward(a, b, params)

    def aggregate():
        w = agg.adaptive_weights(fa, fb, params)
        agg.impression_update(fb, agg.fuse(fa, fb, w), 1.0)

    ms = {
        "c_feat": _best_time(lambda: feature_forward(a, params), repeats, number),
        "c_flow": _best_time(lambda: flow_forward(a, b, params), repeats, number),
        "c_warp": _best_time(lambda: bilinear_warp(fa, flow, scale), repeats, number),
        "c_agg": _best_time(aggregate, repeats, number),
        "c_task": _best_time(lambda: task_forward(fa, params), repeats, number),
    }
    return CostModel(**{k: 1e3 * v for k, v in ms.items()})


def _net_macs(net: NetSpec, h: int, w: int) -> tuple[int, int, int]:
    """Multiply-accumulates of a conv stack plus its output size."""
    total = 0
    for layer in net.layers:
        h = (h + 2 * layer.padding - layer.dilation * (layer.k - 1) - 1) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.dilation * (layer.k - 1) - 1) // layer.stride + 1
        total += layer.out_ch * layer.in_ch * layer.k * layer.k * h * w
    return total, h, w


def mac_cost_model(spec: ModelSpec, height: int = 64, width: int = 64) -> CostModel:
    """Deterministic cost model counting multiply-accumulates per component call."""
    feat, fh, fw = _net_macs(spec.feature, height, width)
    flow, gh, gw = _net_macs(spec.flow, height, width)
    flow += spec.flow.layers[-1].in_ch * gh * gw  # scale head
    c, n = spec.feature_channels, fh * fw
    warp = 4 * c * n + c * n  # four bilinear taps plus the scale product
    qual, _, _ = _net_macs(spec.quality, fh, fw)
    agg_cost = 2 * qual + 4 * n + 2 * c * n + 2 * c * n  # two score maps, softmax, fuse, update
    task, _, _ = _net_macs(spec.task, fh, fw)
    return CostModel(float(feat), float(flow), float(warp), float(agg_cost), float(task))


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    l: int
    g: float
    k: int
    mAP: float
    measured_ms_per_frame: float
    predicted_ratio: float
    dbar: float

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("l must be >= 1")


def sweep(l_values, clips, params: Params, g_values=(1.0,), k: int | None = None, flow_source: str = "oracle",
          cost: CostModel | None = None, evaluate=None) -> list[SweepPoint]:
    """Run the impression pipeline on every clip for each (l, g) grid point.

    ``k`` defaults to the optimal offset per ``l`` (clamped to ``l - 1`` when
    given explicitly). ``cost`` feeds the predicted ratio and defaults to a
    wall-clock calibration. ``evaluate(clips, results_per_clip) -> mAP``
    defaults to :func:`impression.experiments.clip_map`.
    """
    if not params.trained:
        raise UntrainedParamsError("sweep needs trained parameters; this checkpoint has trained_iters == 0")
    if evaluate is None:
        from .experiments import clip_map as evaluate
    cost = calibrate_cost_model(params) if cost is None else cost
    stride = params.spec.feature_stride
    points = []
    for l in l_values:
        kk = optimal_keyframe(l) if k is None else min(k, l - 1)
        for g in g_values:
            cfg = SegmentConfig(segment_length=l, keyframe_offset=kk, memory_gate=g, flow_source=flow_source)
            per_clip, elapsed, frames = [], 0.0, 0
            for clip in clips:
                t0 = time.perf_counter()
                per_clip.append(run_impression(clip.frames, cfg, params, clip.flow_source(stride)))
                elapsed += time.perf_counter() - t0
                frames += len(clip)
            points.append(SweepPoint(l, float(g), kk, evaluate(clips, per_clip), 1e3 * elapsed / frames,
                                     float(runtime_ratio_exact(cost, l)), avg_propagation_distance(l, kk)))
    return points


SWEEP_COLUMNS = ("l", "g", "k", "mAP", "ms_per_frame", "predicted_ratio", "dbar")


def write_sweep_csv(path, points: list[SweepPoint], wallclock: bool = True) -> None:
    """Sweep table; ``ms_per_frame`` is left blank unless ``wallclock``."""
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(SWEEP_COLUMNS)
        for p in points:
            ms = f"{p.measured_ms_per_frame:.4f}" if wallclock else ""
            out.writerow([p.l, repr(p.g), p.k, repr(p.mAP), ms, repr(p.predicted_ratio), repr(p.dbar)])


def write_schedule_csv(path, l_values, k_values=None) -> None:
    """Average propagation distance table with one row per valid (l, k)."""
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["l", "k", "dbar", "optimal"])
        for l in l_values:
            best = optimal_keyframe(l)
            for k in (range(l) if k_values is None else [k for k in k_values if k < l]):
                out.writerow([l, k, repr(avg_propagation_distance(l, k)), int(k == best)])
