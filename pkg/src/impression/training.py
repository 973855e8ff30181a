"""End-to-end training on frame triplets.

Each step draws an old keyframe, a current frame and a new keyframe from one
clip, fuses the aligned old keyframe feature into the new one, propagates the
fused feature to the current frame and scores it with the detection loss.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .nets import (ModelSpec, Params, bind, desk_spec, feature_var, flow_var, init_params, make_targets,
                   quality_var, task_var, tiny_spec)
from .synth import VideoClip

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Triplet:
    key_old: np.ndarray
    cur: np.ndarray
    key_new: np.ndarray
    boxes: list  # (cls, x1, y1, x2, y2) for ``cur``
    flow_old_to_new: np.ndarray | None = None  # warps key_old onto key_new
    flow_new_to_cur: np.ndarray | None = None  # warps key_new onto cur
    indices: tuple[int, int, int] = (0, 0, 0)

    @classmethod
    def still(cls, image: np.ndarray, boxes, stride: int) -> "Triplet":
        """Three copies of one image, as for single-image training data."""
        _, h, w = image.shape
        zero = np.zeros((2, h // stride, w // stride))
        return cls(image, image, image, list(boxes), zero, zero.copy())


def offset_ranges(l: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Inclusive integer ranges for the old-keyframe and new-keyframe offsets."""
    return (-l, -math.ceil(l / 2)), (-(l // 2), l // 2)


def draw_offsets(l: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform integer offsets (old keyframe, new keyframe) relative to the current frame."""
    (a0, b0), (a1, b1) = offset_ranges(l)
    return int(rng.integers(a0, b0 + 1)), int(rng.integers(a1, b1 + 1))


def sample_triplet(clip: VideoClip, l: int, rng: np.random.Generator, stride: int = 4) -> Triplet:
    """Draw a current frame and both keyframes from one clip; indices are clamped to the clip."""
    n = len(clip)
    if n < l + 1:
        raise ValueError(f"clip of {n} frames is too short for segment length {l}")
    i = int(rng.integers(n))
    d0, d1 = draw_offsets(l, rng)
    old = min(max(i + d0, 0), n - 1)
    new = min(max(i + d1, 0), n - 1)
    return Triplet(
        clip.frames[old], clip.frames[i], clip.frames[new], clip.boxes[i],
        clip.flow(new, old, stride), clip.flow(i, new, stride), (old, i, new),
    )


@dataclass
class TrainConfig:
    total_iters: int = 3000
    lr_schedule: tuple = ((0, 5e-2), (2000, 5e-3))
    seed: int = 0
    segment_length: int = 10
    loss_weights: tuple = (10.0, 1.0, 1.0)
    weighting: str = "quality"  # quality | fixed | none
    flow_source: str = "oracle"
    frozen: tuple = ()  # owners kept at their initial values
    clip_norm: float = 5.0
    model: str = "desk"
    channels: int = 16
    num_classes: int = 4

    def __post_init__(self):
        its = [it for it, _ in self.lr_schedule]
        if its != sorted(set(its)) or its[0] != 0:
            raise ValueError("lr_schedule thresholds must start at 0 and strictly increase")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")

    def lr_at(self, iteration: int) -> float:
        lr = self.lr_schedule[0][1]
        for threshold, rate in self.lr_schedule:
            if iteration >= threshold:
                lr = rate
        return lr

    def model_spec(self) -> ModelSpec:
        if self.model == "desk":
            return desk_spec(self.num_classes, self.channels)
        if self.model == "tiny":
            return tiny_spec(self.num_classes)
        raise ValueError(f"unknown model {self.model!r}")

    # -- flat key=value file -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lr_schedule":
                v = ",".join(f"{it}:{lr!r}" for it, lr in v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            if key == "lr_schedule":
                kw[key] = tuple((int(a), float(b)) for a, b in (p.split(":") for p in value.split(",")))
            elif key == "loss_weights":
                kw[key] = tuple(float(x) for x in value.split(","))
            elif key == "frozen":
                kw[key] = tuple(x for x in value.split(",") if x)
            elif key in ("total_iters", "seed", "segment_length", "channels", "num_classes"):
                kw[key] = int(value)
            elif key == "clip_norm":
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class TrainGraph:
    """A recorded forward pass awaiting its single backward."""

    tape: Tape
    loss: Var
    trainable: tuple[str, ...]
    param_names: tuple[str, ...]
    weight: np.ndarray | None = None  # keyframe fusion weight map, if any
    stages: dict = field(default_factory=dict)


def forward_train(t: Triplet, params: Params, weighting: str = "quality", flow_source: str = "learned",
                  loss_weights=(1.0, 1.0, 1.0), trainable=None) -> tuple[float, TrainGraph]:
    """Loss of one triplet plus the tape needed for :func:`backward`."""
    spec = params.spec
    tape = Tape()
    names = tuple(params) if trainable is None else tuple(n for n in params if n in set(trainable))
    P = bind(params, tape, names)
    stages = {}

    def check(stage, var):
        stages[stage] = var.value
        if not np.all(np.isfinite(var.value)):
            raise TrainingDiverged(f"non-finite values at stage {stage!r}")
        return var

    cur, new = Var(t.cur), Var(t.key_new)
    f_new = check("feat_new", feature_var(new, P, spec))
    if flow_source == "learned":
        flow_nc, scale_nc = flow_var(cur, new, P, spec)
    else:
        if t.flow_new_to_cur is None:
            raise ValueError("oracle training needs ground-truth flows in the triplet")
        flow_nc, scale_nc = Var(t.flow_new_to_cur), Var(np.ones((1,) + t.flow_new_to_cur.shape[1:]))

    w = None
    if weighting == "none":
        fused = f_new
    else:
        old = Var(t.key_old)
        f_old = check("feat_old", feature_var(old, P, spec))
        if flow_source == "learned":
            flow_on, scale_on = flow_var(new, old, P, spec)
        else:
            flow_on, scale_on = Var(t.flow_old_to_new), Var(np.ones((1,) + t.flow_old_to_new.shape[1:]))
        f_old_w = check("warp_old", ad.warp(f_old, flow_on, scale_on))
        if weighting == "quality":
            wv = ad.pair_softmax(quality_var(f_old_w, P, spec), quality_var(f_new, P, spec))
        elif weighting == "fixed":
            wv = Var(np.full((1,) + f_new.shape[1:], 0.5))
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        w = wv.value
        fused = check("fuse", ad.fuse(f_old_w, f_new, wv))
    f_cur = check("warp_cur", ad.warp(fused, flow_nc, scale_nc))
    head = check("task", task_var(f_cur, P, spec))
    targets = make_targets([b[1:] for b in t.boxes], [b[0] for b in t.boxes], head.shape[1:], spec.feature_stride)
    loss = check("loss", ad.detection_loss(head, targets, spec.num_classes, loss_weights))
    return float(loss.value), TrainGraph(tape, loss, names, tuple(params), w, stages)


def backward(graph: TrainGraph) -> dict[str, np.ndarray]:
    """Gradients for every parameter (zero for frozen ones); the graph is spent afterwards."""
    grads = graph.tape.backward(graph.loss)
    return {n: grads[n] for n in graph.trainable}


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def train(clips: list[VideoClip], cfg: TrainConfig, params: Params | None = None, out_dir=None,
          history: list | None = None) -> Params:
    """Plain SGD over randomly sampled triplets; deterministic for a given seed.

    With ``out_dir`` the loss curve (``loss.csv``) and a checkpoint at every
    learning-rate boundary and at the end are written there. ``history``, if
    given, receives one ``(iteration, loss, lr)`` tuple per step.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    rng = np.random.default_rng(cfg.seed)
    params = (init_params(cfg.model_spec(), seed=cfg.seed) if params is None else params).copy()
    trainable = tuple(n for n in params if Params.owner(n) not in set(cfg.frozen))
    stride = params.spec.feature_stride
    boundaries = {it for it, _ in cfg.lr_schedule[1:]}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve = []
    last_good = params.copy()
    done = params.meta.get("trained_iters", 0)
    for it in range(cfg.total_iters):
        if out is not None and it in boundaries:
            params.replace(trained_iters=done + it).save(out / f"checkpoint_{it:06d}.bin")
        lr = cfg.lr_at(it)
        clip = clips[int(rng.integers(len(clips)))]
        t = sample_triplet(clip, cfg.segment_length, rng, stride)
        try:
            loss, graph = forward_train(t, params, cfg.weighting, cfg.flow_source, cfg.loss_weights, trainable)
        except TrainingDiverged:
            if out is not None:
                last_good.save(out / "checkpoint_last_finite.bin")
            raise
        grads = backward(graph)
        _clip(grads, cfg.clip_norm)
        for name, g in grads.items():
            arr = params[name]
            arr -= lr * g
        curve.append((it, loss, lr))
        if it % 50 == 0:
            last_good = params.copy()
            log.debug("iter %d loss %.5f lr %g", it, loss, lr)
    params = params.replace(trained_iters=done + cfg.total_iters, weighting=cfg.weighting,
                            flow_source=cfg.flow_source, frozen=list(cfg.frozen))
    if out is not None:
        write_loss_csv(out / "loss.csv", curve)
        params.save(out / "checkpoint_final.bin")
    if history is not None:
        history.extend(curve)
    return params


def write_loss_csv(path, curve) -> None:
    with open(Path(path), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in curve:
            out.writerow([it, repr(loss), repr(lr)])
