"""Synthetic moving-shape videos with exact boxes, flows and scheduled degradation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEGRADATIONS = ("gaussian_blur", "motion_blur", "noise")

# class id -> (shape, rgb); classes differ by shape and by color
CLASS_STYLES = (
    ("rect", (0.90, 0.30, 0.20)),
    ("disc", (0.25, 0.80, 0.35)),
    ("rect", (0.30, 0.40, 0.95)),
    ("disc", (0.90, 0.85, 0.25)),
)


@dataclass
class ObjectSpec:
    cls: int
    shape: str
    color: tuple[float, float, float]
    size: tuple[int, int]
    position: tuple[float, float]  # top-left at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels per frame

    def box_at(self, t: int) -> tuple[float, float, float, float]:
        x = self.position[0] + self.velocity[0] * t
        y = self.position[1] + self.velocity[1] * t
        return (x, y, x + self.size[0], y + self.size[1])


@dataclass
class Degradation:
    start: int
    stop: int  # exclusive
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ValueError(f"unknown degradation {self.kind!r}")
        if self.severity < 0:
            raise ValueError("severity must be >= 0")
        if not 0 <= self.start < self.stop:
            raise ValueError(f"degradation frame range [{self.start}, {self.stop}) is empty or negative")


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    objects: list[ObjectSpec] = field(default_factory=list)
    frame_count: int = 40
    degradations: list[Degradation] = field(default_factory=list)
    seed: int = 0
    background: tuple[float, float, float] = (0.15, 0.15, 0.15)

    def validate(self) -> None:
        for obj in self.objects:
            for t in (0, self.frame_count - 1):
                x1, y1, x2, y2 = obj.box_at(t)
                if x2 <= 0 or y2 <= 0 or x1 >= self.width or y1 >= self.height:
                    raise ValueError(f"object of class {obj.cls} leaves the canvas by frame {t}")
            if obj.shape not in ("rect", "disc"):
                raise ValueError(f"unknown shape {obj.shape!r}")

    # -- flat text format -----------------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"canvas {self.width} {self.height}",
            f"frames {self.frame_count}",
            f"seed {self.seed}",
            "background " + " ".join(repr(c) for c in self.background),
        ]
        for o in self.objects:
            lines.append(
                f"object cls={o.cls} shape={o.shape} color={_join(o.color)} size={_join(o.size)} "
                f"pos={_join(o.position)} vel={_join(o.velocity)}"
            )
        for d in self.degradations:
            lines.append(f"degrade start={d.start} stop={d.stop} kind={d.kind} severity={d.severity!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        spec = cls(objects=[], degradations=[])
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "canvas":
                spec.width, spec.height = int(rest[0]), int(rest[1])
            elif tag == "frames":
                spec.frame_count = int(rest[0])
            elif tag == "seed":
                spec.seed = int(rest[0])
            elif tag == "background":
                spec.background = tuple(float(v) for v in rest)
            elif tag == "object":
                kv = dict(item.split("=", 1) for item in rest)
                spec.objects.append(ObjectSpec(
                    cls=int(kv["cls"]), shape=kv["shape"], color=_floats(kv["color"]),
                    size=tuple(int(float(v)) for v in kv["size"].split(",")),
                    position=_floats(kv["pos"]), velocity=_floats(kv.get("vel", "0,0")),
                ))
            elif tag == "degrade":
                kv = dict(item.split("=", 1) for item in rest)
                spec.degradations.append(Degradation(int(kv["start"]), int(kv["stop"]), kv["kind"], float(kv["severity"])))
            else:
                raise ValueError(f"unknown scene line {line!r}")
        return spec

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_text(Path(path).read_text())


def _join(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    boxes: list[list[tuple[int, float, float, float, float]]]  # per frame: (cls, x1, y1, x2, y2)
    spec: SceneSpec
    severity: np.ndarray  # per-frame maximum degradation severity

    def __len__(self):
        return len(self.frames)

    def flow(self, target: int, reference: int, stride: int = 1) -> np.ndarray:
        """Ground-truth backward flow for warping frame ``reference`` onto ``target``.

        When every object shares one velocity the field is constant over the
        canvas; otherwise each object's support carries its own displacement
        and the static background carries zero.
        """
        h, w = self.spec.height // stride, self.spec.width // stride
        dt = reference - target
        flow = np.zeros((2, h, w))
        vels = {tuple(o.velocity) for o in self.spec.objects}
        if len(vels) == 1:
            vx, vy = vels.pop()
            flow[0] = vx * dt / stride
            flow[1] = vy * dt / stride
            return flow
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        for o in self.spec.objects:
            x1, y1, x2, y2 = o.box_at(target)
            inside = ((cy[:, None] >= y1) & (cy[:, None] < y2)) & ((cx[None, :] >= x1) & (cx[None, :] < x2))
            flow[0][inside] = o.velocity[0] * dt / stride
            flow[1][inside] = o.velocity[1] * dt / stride
        return flow

    def flow_source(self, stride: int):
        return lambda target, reference: self.flow(target, reference, stride)


# -- degradation -------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def motion_kernel(length: int, direction=(1.0, 0.0)) -> np.ndarray:
    """Normalized line kernel of ``length`` taps along ``direction``."""
    dx, dy = direction
    norm = math.hypot(dx, dy)
    dx, dy = (1.0, 0.0) if norm == 0 else (dx / norm, dy / norm)
    r = int(math.ceil((length - 1) / 2)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, length):
        x, y = r + t * dx, r + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        ax, ay = x - x0, y - y0
        k[y0, x0] += (1 - ax) * (1 - ay)
        k[y0, x0 + 1] += ax * (1 - ay)
        k[y0 + 1, x0] += (1 - ax) * ay
        k[y0 + 1, x0 + 1] += ax * ay
    return k / k.sum()


def degrade(frame: np.ndarray, kind: str, severity: float, rng=None, direction=(1.0, 0.0)) -> np.ndarray:
    """Apply one degradation; severity 0 leaves the frame unchanged.

    ``gaussian_blur``: sigma = severity, kernel truncated at 3 sigma.
    ``motion_blur``: box kernel of ``round(severity)`` taps along ``direction``.
    ``noise``: additive uniform noise in [-severity, severity], clipped to [0, 1].
    Blurs use reflective borders.
    """
    if kind not in DEGRADATIONS:
        raise ValueError(f"unknown degradation {kind!r}")
    if severity < 0:
        raise ValueError("severity must be >= 0")
    if severity == 0:
        return frame.copy()
    if kind == "gaussian_blur":
        k = gaussian_kernel(severity)
        out = ndimage.correlate1d(frame, k, axis=1, mode="reflect")
        return ndimage.correlate1d(out, k, axis=2, mode="reflect")
    if kind == "motion_blur":
        n = int(round(severity))
        if n <= 1:
            return frame.copy()
        k = motion_kernel(n, direction)
        return np.stack([ndimage.correlate(ch, k, mode="reflect") for ch in frame])
    rng = np.random.default_rng() if rng is None else rng
    return np.clip(frame + rng.uniform(-severity, severity, size=frame.shape), 0.0, 1.0)


# -- rendering ---------------------------------------------------------------

def _rasterize(canvas: np.ndarray, obj: ObjectSpec, t: int) -> None:
    _, h, w = canvas.shape
    x1, y1, x2, y2 = obj.box_at(t)
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    if obj.shape == "rect":
        mask = ((ys[:, None] >= y1) & (ys[:, None] < y2)) & ((xs[None, :] >= x1) & (xs[None, :] < x2))
    else:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        r = min(x2 - x1, y2 - y1) / 2
        mask = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 < r * r
    canvas[:, mask] = np.asarray(obj.color, dtype=float)[:, None]


def render(spec: SceneSpec, degrade_frames: bool = True) -> VideoClip:
    """Rasterize every frame with hard edges, then apply scheduled degradations."""
    spec.validate()
    frames, boxes = [], []
    severity = np.zeros(spec.frame_count)
    for t in range(spec.frame_count):
        img = np.empty((3, spec.height, spec.width))
        img[:] = np.asarray(spec.background, dtype=float)[:, None, None]
        frame_boxes = []
        for obj in spec.objects:
            _rasterize(img, obj, t)
            x1, y1, x2, y2 = obj.box_at(t)
            frame_boxes.append((obj.cls, max(x1, 0.0), max(y1, 0.0), min(x2, spec.width), min(y2, spec.height)))
        if degrade_frames:
            for j, d in enumerate(spec.degradations):
                if d.start <= t < d.stop:
                    direction = spec.objects[0].velocity if spec.objects else (1.0, 0.0)
                    rng = np.random.default_rng([spec.seed, t, j])
                    img = degrade(img, d.kind, d.severity, rng=rng, direction=direction)
                    severity[t] = max(severity[t], d.severity)
        frames.append(img)
        boxes.append(frame_boxes)
    return VideoClip(frames, boxes, spec, severity)


# -- scene generators --------------------------------------------------------

def random_scene(rng: np.random.Generator, *, frame_count: int = 40, size: int = 64,
                 max_objects: int = 2, num_classes: int = 4, degradations=()) -> SceneSpec:
    """Non-overlapping shapes sharing one integer velocity, fully on canvas throughout."""
    vel = (float(rng.integers(-1, 2)), float(rng.integers(-1, 2)))
    travel = [abs(v) * (frame_count - 1) for v in vel]
    objects: list[ObjectSpec] = []
    n = int(rng.integers(1, max_objects + 1))
    for _ in range(50 * n):
        if len(objects) == n:
            break
        s = int(rng.integers(10, 19))
        lo = [max(0.0, -v * (frame_count - 1)) for v in vel]
        hi = [size - s - tr + lo_i for tr, lo_i in zip(travel, lo)]
        if hi[0] < lo[0] or hi[1] < lo[1]:
            continue
        pos = (float(rng.integers(int(lo[0]), int(hi[0]) + 1)), float(rng.integers(int(lo[1]), int(hi[1]) + 1)))
        box = (pos[0], pos[1], pos[0] + s, pos[1] + s)
        if any(_overlap(box, o.box_at(0), margin=2) for o in objects):
            continue
        cls = int(rng.integers(num_classes))
        shape, color = CLASS_STYLES[cls % len(CLASS_STYLES)]
        objects.append(ObjectSpec(cls, shape, color, (s, s), pos, vel))
    return SceneSpec(width=size, height=size, objects=objects, frame_count=frame_count,
                     degradations=list(degradations), seed=int(rng.integers(2**31)))


def _overlap(a, b, margin=0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


HEAVY_SIGMA = (7.0, 10.0)
HEAVY_NOISE = (0.5, 0.8)


def _heavy_degradations(rng, start: int, stop: int) -> list[Degradation]:
    sigma = float(rng.uniform(*HEAVY_SIGMA))
    return [Degradation(start, stop, "gaussian_blur", sigma),
            Degradation(start, stop, "noise", float(rng.uniform(*HEAVY_NOISE)))]


def blur_heavy_suite(n_clips: int = 10, seed: int = 0, frame_count: int = 40, segment_length: int = 10,
                     size: int = 64) -> list[VideoClip]:
    """Clips whose middle run of two consecutive segments is heavily degraded.

    The first segment always stays clean so the impression has something to
    carry. About half of all frames carry blur of sigma >= 7 plus strong noise.
    Clips shorter than two segments stay clean.
    """
    rng = np.random.default_rng([seed, 1])
    n_seg = max(1, frame_count // segment_length)
    clips = []
    for _ in range(n_clips):
        s = int(rng.integers(1, max(2, n_seg - 1)))
        start, stop = s * segment_length, min(frame_count, (s + 2) * segment_length)
        degs = _heavy_degradations(rng, start, stop) if start < frame_count else []
        spec = random_scene(rng, frame_count=frame_count, size=size, degradations=degs)
        clips.append(render(spec))
    return clips


def training_suite(n_clips: int = 24, seed: int = 0, frame_count: int = 40, size: int = 64) -> list[VideoClip]:
    """Clips with randomly placed degraded windows of varying kind and length."""
    rng = np.random.default_rng([seed, 2])
    clips = []
    for _ in range(n_clips):
        degs = []
        for _ in range(int(rng.integers(0, 3))):
            length = int(rng.integers(4, 16))
            start = int(rng.integers(0, frame_count - length + 1))
            degs.extend(_heavy_degradations(rng, start, start + length))
        clips.append(render(random_scene(rng, frame_count=frame_count, size=size, degradations=degs)))
    return clips
