"""Sparse-keyframe video inference with an iteratively updated impression feature.

One code path serves every method of the ablation: ``weighting`` selects
quality-aware fusion, a fixed fusion weight, or no fusion at all (plain
keyframe propagation).
"""
from __future__ import annotations

import csv
import math
import time
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .nets import DetectionGrid, Params, feature_forward, flow_forward, task_forward
from .tensor import ShapeError
from .warp import bilinear_warp

COMPONENTS = ("feat", "flow", "warp", "agg", "task")
WEIGHTINGS = ("quality", "fixed", "none")
MODES = ("perframe", "dff", "fixed", "impression")


class MissingFlowError(LookupError):
    pass


@dataclass
class SegmentConfig:
    segment_length: int = 10
    keyframe_offset: int | None = None  # None -> central frame, floor((l - 1) / 2)
    memory_gate: float = 1.0
    flow_source: str = "learned"
    weighting: str = "quality"
    fixed_weight: float = 0.5

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        if self.keyframe_offset is None:
            self.keyframe_offset = (self.segment_length - 1) // 2
        if not 0 <= self.keyframe_offset < self.segment_length:
            raise ValueError("keyframe_offset must lie in [0, segment_length)")
        if not 0.0 <= self.memory_gate <= 1.0:
            raise ValueError("memory_gate must lie in [0, 1]")
        if self.flow_source not in ("learned", "oracle"):
            raise ValueError(f"unknown flow source {self.flow_source!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")

    @property
    def latency_frames(self) -> int:
        """Frames a causal deployment must wait before the first keyframe arrives."""
        return self.keyframe_offset


@dataclass
class ImpressionState:
    f_imp: np.ndarray
    prev_key_image: np.ndarray
    prev_key_index: int
    segment_index: int


@dataclass
class FrameResult:
    frame_index: int
    segment: int
    is_key: bool
    task_feature: np.ndarray
    detections: DetectionGrid
    mean_w: float = math.nan
    calls: Counter = field(default_factory=Counter)
    seconds: Counter = field(default_factory=Counter)


class _Meter:
    """Counts and times component invocations for one frame."""

    def __init__(self):
        self.calls = Counter()
        self.seconds = Counter()

    def __call__(self, component, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        self.seconds[component] += time.perf_counter() - t0
        self.calls[component] += 1
        return out


def _validate_frames(frames) -> list[np.ndarray]:
    frames = list(frames)
    if not frames:
        raise ValueError("video has no frames")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ShapeError(f"frame {i} has shape {f.shape}, expected {shape}")
    return frames


def _flow_getter(frames, cfg: SegmentConfig, params: Params, oracle_flows):
    if cfg.flow_source == "learned":
        return lambda target, ref: flow_forward(frames[target], frames[ref], params)
    if oracle_flows is None:
        raise MissingFlowError("oracle flow source selected but no oracle flows supplied")
    s = params.spec.feature_stride
    shape = (2, frames[0].shape[1] // s, frames[0].shape[2] // s)
    ones = np.ones((1,) + shape[1:])

    def get(target, ref):
        try:
            flow = oracle_flows[target, ref] if isinstance(oracle_flows, Mapping) else oracle_flows(target, ref)
        except KeyError:
            flow = None
        if flow is None:
            raise MissingFlowError(f"no oracle flow for target {target}, reference {ref}")
        if flow.shape != shape:
            raise ShapeError(f"oracle flow {flow.shape} does not match feature grid {shape}")
        return flow, ones

    return get


def run_impression(frames, cfg: SegmentConfig, params: Params, oracle_flows=None) -> list[FrameResult]:
    """Detect every frame, extracting deep features only on one keyframe per segment.

    ``oracle_flows`` is either a mapping or a callable ``(target, reference) ->
    flow`` at feature resolution, used when ``cfg.flow_source == "oracle"``.
    """
    frames = _validate_frames(frames)
    get_flow = _flow_getter(frames, cfg, params, oracle_flows)
    n, l = len(frames), cfg.segment_length
    results: list[FrameResult] = []
    state: ImpressionState | None = None
    for seg, start in enumerate(range(0, n, l)):
        stop = min(start + l, n)
        key = start + min(cfg.keyframe_offset, stop - start - 1)
        meter = _Meter()
        f_key = meter("feat", feature_forward, frames[key], params)
        mean_w = math.nan
        if state is None or cfg.weighting == "none":
            f_task = f_imp = f_key
        else:
            flow, scale = meter("flow", get_flow, key, state.prev_key_index)
            imp_aligned = meter("warp", bilinear_warp, state.f_imp, flow, scale)
            t0 = time.perf_counter()
            if cfg.weighting == "quality":
                w = agg.adaptive_weights(imp_aligned, f_key, params)
            else:
                w = np.full((1,) + f_key.shape[1:], cfg.fixed_weight)
            f_task = agg.fuse(imp_aligned, f_key, w)
            f_imp = agg.impression_update(f_key, f_task, cfg.memory_gate)
            meter.seconds["agg"] += time.perf_counter() - t0
            meter.calls["agg"] += 1
            mean_w = float(w.mean())
        state = ImpressionState(f_imp, frames[key], key, seg)

        for j in range(start, stop):
            m = meter if j == key else _Meter()
            if j == key:
                feat = f_task
            else:
                flow, scale = m("flow", get_flow, j, key)
                feat = m("warp", bilinear_warp, f_task, flow, scale)
            grid = m("task", task_forward, feat, params)
            results.append(FrameResult(j, seg, j == key, feat, grid, mean_w if j == key else math.nan,
                                       m.calls, m.seconds))
    return results


def per_frame_baseline(frames, params: Params) -> list[FrameResult]:
    """Feature and task networks on every frame independently."""
    frames = _validate_frames(frames)
    results = []
    for i, frame in enumerate(frames):
        m = _Meter()
        feat = m("feat", feature_forward, frame, params)
        grid = m("task", task_forward, feat, params)
        results.append(FrameResult(i, i, True, feat, grid, math.nan, m.calls, m.seconds))
    return results


def _with(cfg: SegmentConfig, **changes) -> SegmentConfig:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d.update(changes)
    return SegmentConfig(**d)


def dff_baseline(frames, cfg: SegmentConfig, params: Params, oracle_flows=None) -> list[FrameResult]:
    """Keyframe propagation without the impression: every task feature is its own keyframe feature."""
    return run_impression(frames, _with(cfg, weighting="none"), params, oracle_flows)


def fixed_weight_variant(frames, cfg: SegmentConfig, params: Params, oracle_flows=None) -> list[FrameResult]:
    """Impression fusion with the weight pinned to 0.5 everywhere."""
    return run_impression(frames, _with(cfg, weighting="fixed", fixed_weight=0.5), params, oracle_flows)


def run_mode(mode: str, frames, cfg: SegmentConfig, params: Params, oracle_flows=None) -> list[FrameResult]:
    """Dispatch one of ``perframe``, ``dff``, ``fixed`` or ``impression``."""
    if mode == "perframe":
        return per_frame_baseline(frames, params)
    if mode == "dff":
        return dff_baseline(frames, cfg, params, oracle_flows)
    if mode == "fixed":
        return fixed_weight_variant(frames, cfg, params, oracle_flows)
    if mode == "impression":
        return run_impression(frames, _with(cfg, weighting="quality"), params, oracle_flows)
    raise ValueError(f"unknown mode {mode!r}")


def total_calls(results: list[FrameResult]) -> Counter:
    out = Counter()
    for r in results:
        out.update(r.calls)
    return out


def total_seconds(results: list[FrameResult]) -> Counter:
    out = Counter()
    for r in results:
        out.update(r.seconds)
    return out


# -- CSV output --------------------------------------------------------------

def write_frames_csv(path, rows: list[tuple[int, FrameResult]], wallclock: bool = False) -> None:
    """One row per frame: clip, frame_index, segment, is_key, mean_w, component call counts.

    Wall-clock milliseconds per component are appended only when requested,
    since they differ between otherwise identical runs.
    """
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        header = ["clip", "frame_index", "segment", "is_key", "mean_w"] + [f"n_{c}" for c in COMPONENTS]
        if wallclock:
            header += [f"ms_{c}" for c in COMPONENTS]
        out.writerow(header)
        for clip, r in rows:
            row = [clip, r.frame_index, r.segment, int(r.is_key), "" if math.isnan(r.mean_w) else repr(r.mean_w)]
            row += [r.calls[c] for c in COMPONENTS]
            if wallclock:
                row += [f"{1e3 * r.seconds[c]:.4f}" for c in COMPONENTS]
            out.writerow(row)


def write_detections_csv(path, rows) -> None:
    """Rows of ``(clip, Detection)``: clip, frame_index, class, score, x1, y1, x2, y2."""
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["clip", "frame_index", "class", "score", "x1", "y1", "x2", "y2"])
        for clip, d in rows:
            out.writerow([clip, d.frame_index, d.cls, repr(d.confidence)] + [repr(v) for v in d.box])
