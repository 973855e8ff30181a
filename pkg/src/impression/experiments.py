"""Benchmark evaluation and the method-comparison experiment.

Every method is trained in its own regime and scored with the matching
inference mode on held-out blur-heavy clips, using ground-truth flow.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import GroundTruth, compute_map, decode_detections
from .nets import Params
from .pipeline import FrameResult, SegmentConfig, run_mode
from .synth import VideoClip, blur_heavy_suite, training_suite
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# name -> (training weighting, frozen owners, inference mode)
VARIANTS = {
    "dff": ("none", (), "dff"),
    "fixed": ("fixed", (), "fixed"),
    "quality": ("quality", (), "impression"),
    "frozen": ("quality", ("feat", "flow"), "impression"),
}


def _frame_offsets(clips) -> list[int]:
    return np.concatenate(([0], np.cumsum([len(c) for c in clips])[:-1])).astype(int).tolist()


def ground_truth(clips: list[VideoClip]) -> list[GroundTruth]:
    """Ground truth for all clips, frames numbered consecutively across clips."""
    gts = []
    for off, clip in zip(_frame_offsets(clips), clips):
        for t, boxes in enumerate(clip.boxes):
            gts.extend(GroundTruth(off + t, b[0], tuple(b[1:])) for b in boxes)
    return gts


def detections(clips, per_clip: list[list[FrameResult]], confidence_floor: float = 0.05):
    dets = []
    for off, results in zip(_frame_offsets(clips), per_clip):
        for r in results:
            dets.extend(decode_detections(r.detections, confidence_floor, frame_index=off + r.frame_index))
    return dets


def clip_map(clips, per_clip: list[list[FrameResult]], iou_threshold: float = 0.5) -> float:
    """mAP over every frame of every clip."""
    return compute_map(detections(clips, per_clip), ground_truth(clips), iou_threshold)[1]


def blur_sigma(clip: VideoClip, t: int) -> float:
    """Largest Gaussian blur sigma scheduled on frame ``t`` (0 when sharp)."""
    return max((d.severity for d in clip.spec.degradations
                if d.kind == "gaussian_blur" and d.start <= t < d.stop), default=0.0)


def keyframe_weights(clips, per_clip, sigma_threshold: float = 2.0) -> tuple[list[float], list[float]]:
    """Mean fusion weights of keyframes split into (degraded, clean) by blur sigma."""
    degraded, clean = [], []
    for clip, results in zip(clips, per_clip):
        for r in results:
            if r.is_key and not math.isnan(r.mean_w):
                (degraded if blur_sigma(clip, r.frame_index) >= sigma_threshold else clean).append(r.mean_w)
    return degraded, clean


def run_clips(mode: str, clips, params: Params, cfg: SegmentConfig) -> list[list[FrameResult]]:
    stride = params.spec.feature_stride
    return [run_mode(mode, c.frames, cfg, params, c.flow_source(stride)) for c in clips]


@dataclass
class VariantScore:
    variant: str
    seed: int
    mAP: float
    w_degraded: float = math.nan
    w_clean: float = math.nan


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = ("dff", "fixed", "quality", "frozen")
    train_clips: int = 24
    bench_clips: int = 10
    frame_count: int = 40
    train: TrainConfig = field(default_factory=TrainConfig)


def train_variant(variant: str, seed: int, cfg: AblationConfig, out_dir=None) -> Params:
    weighting, frozen, _ = VARIANTS[variant]
    tc = TrainConfig(**{**cfg.train.__dict__, "seed": seed, "weighting": weighting, "frozen": frozen,
                        "flow_source": "oracle"})
    clips = training_suite(cfg.train_clips, seed=seed, frame_count=cfg.frame_count)
    return train(clips, tc, out_dir=out_dir)


def benchmark(seed: int, cfg: AblationConfig) -> list[VideoClip]:
    return blur_heavy_suite(cfg.bench_clips, seed=seed, frame_count=cfg.frame_count,
                            segment_length=cfg.train.segment_length)


def score_variant(variant: str, seed: int, params: Params, clips, segment: SegmentConfig) -> VariantScore:
    mode = VARIANTS[variant][2]
    per_clip = run_clips(mode, clips, params, segment)
    degraded, clean = keyframe_weights(clips, per_clip)
    return VariantScore(variant, seed, clip_map(clips, per_clip),
                        float(np.mean(degraded)) if degraded else math.nan,
                        float(np.mean(clean)) if clean else math.nan)


def run_ablation(cfg: AblationConfig, out_dir=None, models: dict | None = None) -> list[VariantScore]:
    """Train and score every (variant, seed) pair.

    ``models``, if given, is filled with the trained parameters keyed by
    ``(variant, seed)`` so callers can reuse them.
    """
    segment = SegmentConfig(segment_length=cfg.train.segment_length, flow_source="oracle")
    scores = []
    for seed in cfg.seeds:
        clips = benchmark(seed, cfg)
        for v in cfg.variants:
            sub = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            params = train_variant(v, seed, cfg, sub)
            if models is not None:
                models[v, seed] = params
            s = score_variant(v, seed, params, clips, segment)
            log.info("%s seed %d: mAP %.4f", v, seed, s.mAP)
            scores.append(s)
    return scores


def summarize(scores: list[VariantScore]) -> dict[str, dict[str, float]]:
    """Seed-averaged mAP and keyframe weights per variant."""
    out = {}
    for v in dict.fromkeys(s.variant for s in scores):
        rows = [s for s in scores if s.variant == v]
        out[v] = {
            "mAP": float(np.mean([s.mAP for s in rows])),
            "w_degraded": float(np.nanmean([s.w_degraded for s in rows])) if any(
                not math.isnan(s.w_degraded) for s in rows) else math.nan,
            "w_clean": float(np.nanmean([s.w_clean for s in rows])) if any(
                not math.isnan(s.w_clean) for s in rows) else math.nan,
        }
    return out


def write_scores_csv(path, scores: list[VariantScore]) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variant", "seed", "mAP", "w_degraded", "w_clean"])
        for s in scores:
            out.writerow([s.variant, s.seed, repr(s.mAP), repr(s.w_degraded), repr(s.w_clean)])
