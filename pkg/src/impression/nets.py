"""Tiny stand-ins for the feature, flow, quality and task networks.

Every network is a plain stack of convolutions. Parameters of all four live in
one :class:`Params` mapping with names ``<owner>.<layer>.<w|b>``; the scale-map
head of the flow network is ``flow.scale.w``.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import ShapeError, read_tensor, write_tensor

OWNERS = ("feat", "flow", "qual", "task")
CHECKPOINT_MAGIC = "IMPCKPT 1"


@dataclass(frozen=True)
class LayerSpec:
    in_ch: int
    out_ch: int
    k: int = 3
    stride: int = 1
    dilation: int = 1
    act: str = "relu"

    @property
    def padding(self) -> int:
        return self.dilation * (self.k // 2)


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_ch != b.in_ch:
                raise ValueError(f"layer channel mismatch {a.out_ch} -> {b.in_ch}")
        for layer in self.layers:
            if layer.act not in ("relu", "none"):
                raise ValueError(f"unknown nonlinearity {layer.act!r}")

    @property
    def feature_stride(self) -> int:
        return int(np.prod([layer.stride for layer in self.layers]))

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_ch


@dataclass(frozen=True)
class ModelSpec:
    feature: NetSpec
    flow: NetSpec
    quality: NetSpec
    task: NetSpec
    num_classes: int = 4
    image_channels: int = 3

    def __post_init__(self):
        cf = self.feature.output_channels
        if self.feature.in_channels != self.image_channels:
            raise ValueError("feature network must consume the image channels")
        if self.flow.in_channels != 2 * self.image_channels or self.flow.output_channels != 2:
            raise ValueError("flow network maps an image pair to a 2-channel flow")
        if self.flow.feature_stride != self.feature.feature_stride:
            raise ValueError("flow must be predicted at feature resolution")
        if self.quality.in_channels != cf or self.quality.output_channels != 1:
            raise ValueError("quality network maps features to a single score map")
        if self.task.in_channels != cf or self.task.output_channels != 5 + self.num_classes:
            raise ValueError("task head emits objectness, K class logits and 4 box terms")
        for net in (self.quality, self.task):
            if net.feature_stride != 1:
                raise ValueError("quality and task networks must preserve resolution")

    @property
    def feature_stride(self) -> int:
        return self.feature.feature_stride

    @property
    def feature_channels(self) -> int:
        return self.feature.output_channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        nets = {k: NetSpec(tuple(LayerSpec(**layer) for layer in d[k]["layers"]))
                for k in ("feature", "flow", "quality", "task")}
        return cls(**nets, num_classes=d["num_classes"], image_channels=d["image_channels"])


def _net(*layers) -> NetSpec:
    return NetSpec(tuple(LayerSpec(*layer) if isinstance(layer, tuple) else layer for layer in layers))


def desk_spec(num_classes: int = 4, channels: int = 16) -> ModelSpec:
    """Default desk-scale model: stride-4 features with ``channels`` channels."""
    c = channels
    return ModelSpec(
        feature=_net((3, c, 3, 1), (c, 2 * c, 3, 2), (2 * c, 2 * c, 3, 2),
                     (2 * c, 2 * c, 3, 1, 2), (2 * c, c, 3, 1)),
        flow=_net((6, 32, 3, 2), (32, 32, 3, 2), (32, 32, 3, 1), LayerSpec(32, 2, 3, act="none")),
        quality=_net((c, c, 3), (c, 8, 1), LayerSpec(8, 1, 1, act="none")),
        task=_net((c, c, 1), LayerSpec(c, 5 + num_classes, 1, act="none")),
        num_classes=num_classes,
    )


def tiny_spec(num_classes: int = 2) -> ModelSpec:
    """A few-hundred-parameter model for exhaustive gradient checks."""
    return ModelSpec(
        feature=_net((3, 2, 3, 2), (2, 2, 3, 1, 2)),
        flow=_net((6, 2, 3, 2), (2, 2, 3, 1), LayerSpec(2, 2, 3, act="none")),
        quality=_net((2, 2, 3), (2, 2, 1), LayerSpec(2, 1, 1, act="none")),
        task=_net((2, 2, 1), LayerSpec(2, 5 + num_classes, 1, act="none")),
        num_classes=num_classes,
    )


def _nets(spec: ModelSpec):
    return (("feat", spec.feature), ("flow", spec.flow), ("qual", spec.quality), ("task", spec.task))


class Params(Mapping[str, np.ndarray]):
    """Ordered parameter arrays for all four networks."""

    def __init__(self, spec: ModelSpec, arrays: dict[str, np.ndarray], meta: dict | None = None):
        self.spec = spec
        expected = param_shapes(spec)
        if list(arrays) != list(expected):
            raise ValueError("parameter names do not match the model spec")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arrays[name].shape}")
        self._arrays = dict(arrays)
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    @staticmethod
    def owner(name: str) -> str:
        return name.split(".", 1)[0]

    @staticmethod
    def layer(name: str) -> str:
        return name.split(".")[1]

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    @property
    def trained(self) -> bool:
        return self.meta.get("trained_iters", 0) > 0

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def unflatten(self, vec: np.ndarray) -> "Params":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {vec.size}")
        out, i = {}, 0
        for name, a in self._arrays.items():
            out[name] = vec[i : i + a.size].reshape(a.shape).copy()
            i += a.size
        return Params(self.spec, out, self.meta)

    def replace(self, arrays: dict[str, np.ndarray] | None = None, **meta) -> "Params":
        merged = dict(self._arrays)
        merged.update(arrays or {})
        return Params(self.spec, merged, {**self.meta, **meta})

    def copy(self) -> "Params":
        return Params(self.spec, {k: v.copy() for k, v in self._arrays.items()}, self.meta)

    # -- checkpoint file -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = [CHECKPOINT_MAGIC, "spec " + self.spec.to_json(), "meta " + json.dumps(self.meta, sort_keys=True)]
        for name, a in self._arrays.items():
            header.append(f"tensor {name} {self.owner(name)} {self.layer(name)} {','.join(map(str, a.shape))}")
        header.append("end")
        buf = io.BytesIO()
        buf.write(("\n".join(header) + "\n").encode())
        for a in self._arrays.values():
            write_tensor(buf, _as3d(a))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Params":
        buf = io.BytesIO(data)
        if buf.readline().decode().strip() != CHECKPOINT_MAGIC:
            raise ValueError("not an impression checkpoint")
        spec = meta = None
        entries = []
        for raw in iter(buf.readline, b""):
            line = raw.decode().rstrip("\n")
            if line == "end":
                break
            tag, rest = line.split(" ", 1)
            if tag == "spec":
                spec = ModelSpec.from_json(rest)
            elif tag == "meta":
                meta = json.loads(rest)
            elif tag == "tensor":
                name, _, _, shape = rest.split(" ")
                entries.append((name, tuple(int(s) for s in shape.split(","))))
        arrays = {name: read_tensor(buf).reshape(shape) for name, shape in entries}
        return cls(spec, arrays, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Params":
        return cls.from_bytes(Path(path).read_bytes())


def _as3d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 4:
        return a.reshape(a.shape[0], a.shape[1], -1)
    if a.ndim == 1:
        return a.reshape(-1, 1, 1)
    return a


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    shapes = {}
    for owner, net in _nets(spec):
        for i, layer in enumerate(net.layers):
            shapes[f"{owner}.{i}.w"] = (layer.out_ch, layer.in_ch, layer.k, layer.k)
            shapes[f"{owner}.{i}.b"] = (layer.out_ch,)
        if owner == "flow":
            shapes["flow.scale.w"] = (1, net.layers[-1].in_ch, 1, 1)
    return shapes


def init_params(spec: ModelSpec, seed: int = 0, zero_heads: bool = True) -> Params:
    """He-normal weights, zero biases.

    With ``zero_heads`` the flow, quality and task output layers start at zero
    and the scale head at zero weights, so the scale map is one everywhere.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if zero_heads:
        for owner, net in _nets(spec):
            if owner != "feat":
                arrays[f"{owner}.{len(net.layers) - 1}.w"][:] = 0.0
        arrays["flow.scale.w"][:] = 0.0
    return Params(spec, arrays, {"seed": seed})


# -- forward passes on Vars --------------------------------------------------

def _stack(x: Var, P: Mapping[str, Var], owner: str, net: NetSpec, upto: int | None = None) -> Var:
    for i, layer in enumerate(net.layers[:upto]):
        x = ad.conv2d(x, P[f"{owner}.{i}.w"], P[f"{owner}.{i}.b"],
                      stride=layer.stride, padding=layer.padding, dilation=layer.dilation)
        if layer.act == "relu":
            x = ad.relu(x)
    return x


def feature_var(image: Var, P, spec: ModelSpec) -> Var:
    return _stack(image, P, "feat", spec.feature)


def flow_var(target: Var, reference: Var, P, spec: ModelSpec) -> tuple[Var, Var]:
    net = spec.flow
    trunk = _stack(ad.concat(target, reference), P, "flow", net, upto=len(net.layers) - 1)
    last = net.layers[-1]
    i = len(net.layers) - 1
    flow = ad.conv2d(trunk, P[f"flow.{i}.w"], P[f"flow.{i}.b"], padding=last.padding, dilation=last.dilation)
    scale = ad.add_scalar(ad.conv2d(trunk, P["flow.scale.w"]), 1.0)
    return flow, scale


def quality_var(feature: Var, P, spec: ModelSpec) -> Var:
    return _stack(feature, P, "qual", spec.quality)


def task_var(feature: Var, P, spec: ModelSpec) -> Var:
    return _stack(feature, P, "task", spec.task)


def bind(params: Params, tape: "ad.Tape | None" = None, trainable=None) -> dict[str, Var]:
    """Wrap params as Vars; names in ``trainable`` (default all) are watched."""
    if tape is None:
        return {k: Var(v) for k, v in params.items()}
    keep = set(params) if trainable is None else set(trainable)
    return {k: tape.watch(v, k) if k in keep else Var(v) for k, v in params.items()}


# -- array-level API ---------------------------------------------------------

def _bind_owner(params: Params, owner: str) -> dict[str, Var]:
    prefix = owner + "."
    return {k: Var(v) for k, v in params.items() if k.startswith(prefix)}


def _check_image(image: np.ndarray, spec: ModelSpec):
    if image.ndim != 3 or image.shape[0] != spec.image_channels:
        raise ShapeError(f"expected a ({spec.image_channels}, H, W) image, got {image.shape}")
    s = spec.feature_stride
    if image.shape[1] % s or image.shape[2] % s:
        raise ShapeError(f"image size {image.shape[1:]} is not divisible by feature stride {s}")


def _check_feature(feature: np.ndarray, spec: ModelSpec):
    if feature.ndim != 3 or feature.shape[0] != spec.feature_channels:
        raise ShapeError(f"expected ({spec.feature_channels}, h, w) feature, got {feature.shape}")


def feature_forward(image: np.ndarray, params: Params) -> np.ndarray:
    _check_image(image, params.spec)
    return feature_var(Var(image), _bind_owner(params, "feat"), params.spec).value


def flow_forward(target_image: np.ndarray, reference_image: np.ndarray, params: Params):
    """Return ``(flow, scale)`` at feature resolution for warping reference onto target."""
    if target_image.shape != reference_image.shape:
        raise ShapeError(f"image pair shapes differ: {target_image.shape} vs {reference_image.shape}")
    _check_image(target_image, params.spec)
    flow, scale = flow_var(Var(target_image), Var(reference_image), _bind_owner(params, "flow"), params.spec)
    return flow.value, scale.value


def quality_forward(feature: np.ndarray, params: Params) -> np.ndarray:
    _check_feature(feature, params.spec)
    return quality_var(Var(feature), _bind_owner(params, "qual"), params.spec).value


@dataclass
class DetectionGrid:
    """Per-cell head outputs at feature resolution.

    ``boxes`` holds (dx, dy, log w, log h) in cell units: the box center is the
    cell center plus (dx, dy) cells.
    """

    objectness: np.ndarray  # (h, w) logits
    class_logits: np.ndarray  # (K, h, w)
    boxes: np.ndarray  # (4, h, w)
    stride: int = 1

    @classmethod
    def from_head(cls, head: np.ndarray, num_classes: int, stride: int) -> "DetectionGrid":
        return cls(head[0], head[1 : 1 + num_classes], head[1 + num_classes :], stride)

    def __eq__(self, other):
        return (isinstance(other, DetectionGrid) and self.stride == other.stride
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("objectness", "class_logits", "boxes")))


def task_forward(feature: np.ndarray, params: Params) -> DetectionGrid:
    _check_feature(feature, params.spec)
    head = task_var(Var(feature), _bind_owner(params, "task"), params.spec).value
    return DetectionGrid.from_head(head, params.spec.num_classes, params.spec.feature_stride)


@dataclass
class GridTargets:
    positive: np.ndarray  # (h, w) bool
    classes: np.ndarray  # (h, w) int
    boxes: np.ndarray = field(repr=False)  # (4, h, w)


def make_targets(boxes, classes, grid_shape, stride: int) -> GridTargets:
    """Assign each cell whose center lies inside a box to that box.

    Where boxes overlap the smallest one wins.
    """
    h, w = grid_shape
    positive = np.zeros((h, w), dtype=bool)
    cls_map = np.zeros((h, w), dtype=np.intp)
    tgt = np.zeros((4, h, w))
    area = np.full((h, w), np.inf)
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    for (x1, y1, x2, y2), c in zip(boxes, classes):
        inside = ((cy[:, None] >= y1) & (cy[:, None] < y2)) & ((cx[None, :] >= x1) & (cx[None, :] < x2))
        a = (x2 - x1) * (y2 - y1)
        take = inside & (a < area)
        if not take.any():
            continue
        area[take] = a
        positive |= take
        cls_map[take] = c
        bx, by = (x1 + x2) / 2, (y1 + y2) / 2
        tgt[0][take] = ((bx - cx[None, :]) / stride * np.ones((h, 1)))[take]
        tgt[1][take] = ((by - cy[:, None]) / stride * np.ones((1, w)))[take]
        tgt[2][take] = np.log((x2 - x1) / stride)
        tgt[3][take] = np.log((y2 - y1) / stride)
    return GridTargets(positive, cls_map, tgt)


def linear_stand_in(channels: int, num_classes: int = 1) -> Params:
    """Identity feature network (1x1, no nonlinearity) with zero-init heads.

    Images with ``channels`` channels map to themselves as features; used to
    trace how keyframe features combine through the pipeline.
    """
    c = channels
    spec = ModelSpec(
        feature=_net(LayerSpec(c, c, 1, act="none")),
        flow=_net((2 * c, 2, 1), LayerSpec(2, 2, 1, act="none")),
        quality=_net((c, 2, 1), LayerSpec(2, 1, 1, act="none")),
        task=_net(LayerSpec(c, 5 + num_classes, 1, act="none")),
        num_classes=num_classes,
        image_channels=c,
    )
    p = init_params(spec, seed=0)
    return p.replace({"feat.0.w": np.eye(c).reshape(c, c, 1, 1)})
