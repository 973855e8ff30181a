"""Reference oracles and self-checks behind ``impression verify``.

The oracles here are deliberately naive: central finite differences, an
index-shift warp for integer translations, and exhaustive enumeration of
detection-to-ground-truth assignments.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import aggregation as agg
from . import autodiff as ad
from .autodiff import Tape
from .metrics import Detection, GroundTruth, compute_map, iou
from .nets import Params, init_params, linear_stand_in, tiny_spec
from .pipeline import SegmentConfig, run_impression
from .schedule import CostModel, avg_propagation_distance, optimal_keyframe, runtime_ratio_exact
from .training import Triplet, backward, forward_train
from .warp import bilinear_warp, translation_flow

FD_STEP = 1e-5
REL_TOL = 1e-5
# Relative errors are taken against max(|analytic|, |numeric|, GRAD_FLOOR);
# below the floor central differences at FD_STEP are dominated by rounding.
GRAD_FLOOR = 1e-4
# Central differences are meaningless for coordinates whose stencil crosses a
# ReLU switch, a warp cell boundary or an L1 sign change. Those coordinates are
# excluded, but only up to this fraction per instance.
MAX_KINK_FRACTION = 0.05


# -- finite differences ------------------------------------------------------

@dataclass
class GradCheck:
    n_coords: int
    max_rel_err: float
    worst_index: int
    kinks: int = 0  # coordinates whose stencil crosses a non-differentiable point

    def ok(self, rel_tol: float = REL_TOL, max_kink_fraction: float = MAX_KINK_FRACTION) -> bool:
        return self.max_rel_err <= rel_tol and self.kinks <= max_kink_fraction * self.n_coords


def _branch_key(f, x):
    with ad.branch_log() as log:
        value = f(x)
    return value, b"".join(np.ravel(b).astype(np.int64).tobytes() for b in log)


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Also returns a boolean mask of coordinates whose stencil ``x +- h`` crosses
    a non-differentiable point, detected exactly by comparing the branch logs
    of the piecewise ops (see :func:`impression.autodiff.branch_log`).
    """
    x = np.array(x, dtype=float)
    flat = x.ravel()
    _, k0 = _branch_key(f, x)
    grad = np.empty(flat.size)
    crossed = np.zeros(flat.size, dtype=bool)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp, kp = _branch_key(f, x)
        flat[i] = old - h
        fm, km = _branch_key(f, x)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
        crossed[i] = kp != k0 or km != k0
    return grad.reshape(x.shape), crossed.reshape(x.shape)


def compare_gradients(analytic, numeric, crossed=None) -> GradCheck:
    """Worst per-coordinate relative error over coordinates whose stencil stays on one smooth piece."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)
    kinks = 0
    if crossed is not None:
        bad = np.ravel(crossed)
        kinks = int(bad.sum())
        rel = np.where(bad, 0.0, rel)
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheck(a.size, float(rel.max()) if rel.size else 0.0, worst, kinks)


def _scalar_probe(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def gradcheck_warp(seed: int) -> GradCheck:
    """Warp gradients w.r.t. feature, flow and scale against finite differences."""
    rng = np.random.default_rng([seed, 11])
    c, h, w = 2, 5, 6
    feature = rng.normal(size=(c, h, w))
    # keep sample positions well away from integers so the stencil stays smooth
    flow = rng.integers(-2, 3, size=(2, h, w)) + rng.uniform(0.1, 0.9, size=(2, h, w))
    scale = rng.uniform(0.5, 1.5, size=(1, h, w))
    probe = _scalar_probe(rng, (c, h, w))
    tape = Tape()
    vf, vfl, vs = tape.watch(feature, "feature"), tape.watch(flow, "flow"), tape.watch(scale, "scale")
    out = ad.warp(vf, vfl, vs)
    grads = tape.backward(out, seed=probe)

    analytic = np.concatenate([grads["feature"].ravel(), grads["flow"].ravel(), grads["scale"].ravel()])
    sizes = [feature.size, flow.size, scale.size]

    def loss(vec):
        f, fl, s = np.split(vec, np.cumsum(sizes)[:-1])
        return float((bilinear_warp(f.reshape(feature.shape), fl.reshape(flow.shape), s.reshape(scale.shape))
                      * probe).sum())

    numeric, crossed = central_difference(loss, np.concatenate([feature.ravel(), flow.ravel(), scale.ravel()]))
    return compare_gradients(analytic, numeric, crossed)


def gradcheck_fusion(seed: int) -> GradCheck:
    """Softmax fusion ``fuse(a, b, pair_softmax(sa, sb))`` w.r.t. all four inputs."""
    rng = np.random.default_rng([seed, 12])
    shape = (3, 4, 4)
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    sa, sb = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    probe = _scalar_probe(rng, shape)
    tape = Tape()
    va, vb, vsa, vsb = (tape.watch(x, n) for x, n in ((a, "a"), (b, "b"), (sa, "sa"), (sb, "sb")))
    out = ad.fuse(va, vb, ad.pair_softmax(vsa, vsb))
    grads = tape.backward(out, seed=probe)
    analytic = np.concatenate([grads[n].ravel() for n in ("a", "b", "sa", "sb")])
    sizes = [a.size, b.size, sa.size, sb.size]

    def loss(vec):
        xa, xb, xsa, xsb = np.split(vec, np.cumsum(sizes)[:-1])
        ea, eb = np.exp(xsa), np.exp(xsb)
        w = (eb / (ea + eb)).reshape(1, 4, 4)
        return float((((1 - w) * xa.reshape(shape) + w * xb.reshape(shape)) * probe).sum())

    numeric, _ = central_difference(loss, np.concatenate([a.ravel(), b.ravel(), sa.ravel(), sb.ravel()]))
    return compare_gradients(analytic, numeric)


def tiny_triplet(seed: int, size: int = 16, num_classes: int = 2) -> Triplet:
    """Random images and one or two boxes, sized for exhaustive gradient checks."""
    rng = np.random.default_rng([seed, 13])
    imgs = [rng.uniform(0, 1, size=(3, size, size)) for _ in range(3)]
    boxes = []
    for _ in range(int(rng.integers(1, 3))):
        x1, y1 = rng.uniform(0, size / 2, size=2)
        bw, bh = rng.uniform(3, size / 2, size=2)
        boxes.append((int(rng.integers(num_classes)), x1, y1, x1 + bw, y1 + bh))
    return Triplet(imgs[0], imgs[1], imgs[2], boxes)


def tiny_params(seed: int) -> Params:
    """Tiny model with every head and bias randomized and flows biased off the integer grid."""
    rng = np.random.default_rng([seed, 14])
    p = init_params(tiny_spec(), seed=seed, zero_heads=False)
    # nonzero biases keep pre-activations off the ReLU kink when an upstream unit is dead
    arrays = {n: rng.uniform(-0.2, 0.2, size=a.shape) if n.endswith(".b") else a * 0.5 for n, a in p.items()}
    last = f"flow.{len(p.spec.flow.layers) - 1}"
    arrays[f"{last}.b"] = rng.uniform(0.3, 0.7, size=2)
    arrays["flow.scale.w"] = rng.normal(0, 0.1, size=arrays["flow.scale.w"].shape)
    return p.replace(arrays)


def gradcheck_training(seed: int, weighting: str = "quality") -> GradCheck:
    """Full training graph (learned flow, both warps, fusion, detection loss) w.r.t. every parameter."""
    t = tiny_triplet(seed)
    params = tiny_params(seed)
    _, graph = forward_train(t, params, weighting, "learned")
    grads = backward(graph)
    analytic = np.concatenate([grads[n].ravel() for n in params])

    def loss(vec):
        return forward_train(t, params.unflatten(vec), weighting, "learned")[0]

    numeric, crossed = central_difference(loss, params.flatten())
    return compare_gradients(analytic, numeric, crossed)


# -- warp oracle -------------------------------------------------------------

def shift_oracle(feature: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation by index arithmetic: ``out[y, x] = feature[y + dy, x + dx]`` or 0 off-grid."""
    c, h, w = feature.shape
    out = np.zeros_like(feature)
    for y in range(h):
        for x in range(w):
            sy, sx = y + dy, x + dx
            if 0 <= sy < h and 0 <= sx < w:
                out[:, y, x] = feature[:, sy, sx]
    return out


# -- mAP oracle --------------------------------------------------------------

def _pr_area(tp_flags, n_gt) -> Fraction | float:
    """Area under the monotone precision envelope, written out as a plain loop."""
    if n_gt == 0:
        return 0.0
    points = []
    hits = 0
    for rank, hit in enumerate(tp_flags, start=1):
        hits += hit
        points.append((hits / n_gt, hits / rank))
    area, prev_recall = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        if r > prev_recall:
            area += (r - prev_recall) * max(p for rr, p in points[i:])
            prev_recall = r
    return area


def brute_force_ap(dets: list[Detection], gts: list[GroundTruth], thr: float) -> float:
    """AP of one class by enumerating every valid one-to-one assignment.

    The chosen assignment maximizes the IoU sequence lexicographically in
    descending-confidence order, which is what confidence-ordered greedy
    matching is meant to produce.
    """
    order = sorted(dets, key=lambda d: -d.confidence)
    options = []
    for d in order:
        opts = [None] + [j for j, g in enumerate(gts)
                         if g.frame_index == d.frame_index and iou(d.box, g.box) >= thr]
        options.append(opts)
    best_key, best_assign = None, None
    for assign in itertools.product(*options):
        used = [j for j in assign if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(0.0 if j is None else iou(d.box, gts[j].box) for d, j in zip(order, assign))
        if best_key is None or key > best_key:
            best_key, best_assign = key, assign
    flags = [0 if j is None else 1 for j in best_assign] if best_assign is not None else []
    return _pr_area(flags, len(gts))


def brute_force_map(dets, gts, thr: float = 0.5) -> float:
    classes = sorted({g.cls for g in gts})
    if not classes:
        return 0.0
    return float(np.mean([brute_force_ap([d for d in dets if d.cls == c], [g for g in gts if g.cls == c], thr)
                          for c in classes]))


def random_map_instance(seed: int, max_per_class: int = 5, n_classes: int = 2, n_frames: int = 2):
    """Random detections and ground truth with at most ``max_per_class`` boxes of each kind per class."""
    rng = np.random.default_rng([seed, 15])
    dets, gts = [], []

    def box(cx, cy, s):
        return (cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2)

    for c in range(n_classes):
        n_gt = int(rng.integers(0, max_per_class + 1))
        n_det = int(rng.integers(0, max_per_class + 1))
        centers = []
        for _ in range(n_gt):
            f = int(rng.integers(n_frames))
            cx, cy, s = rng.uniform(10, 30), rng.uniform(10, 30), rng.uniform(4, 10)
            centers.append((f, cx, cy, s))
            gts.append(GroundTruth(f, c, box(cx, cy, s)))
        for _ in range(n_det):
            if centers and rng.random() < 0.7:
                f, cx, cy, s = centers[int(rng.integers(len(centers)))]
                cx, cy, s = cx + rng.normal(0, 1.5), cy + rng.normal(0, 1.5), s * rng.uniform(0.8, 1.25)
            else:
                f, cx, cy, s = int(rng.integers(n_frames)), rng.uniform(10, 30), rng.uniform(10, 30), rng.uniform(4, 10)
            dets.append(Detection(f, c, float(rng.uniform()), box(cx, cy, s)))
    return dets, gts


# -- pipeline structure ------------------------------------------------------

def pipeline_coefficients(g: float, n_segments: int = 3, segment_length: int = 2) -> np.ndarray:
    """Coefficients of each keyframe's one-hot feature in the last segment's task feature.

    Runs the real pipeline with identity stand-ins, zero flows and a zero
    quality network (so every fusion weight is exactly 0.5).
    """
    c = n_segments
    params = linear_stand_in(c)
    n = n_segments * segment_length
    cfg = SegmentConfig(segment_length=segment_length, keyframe_offset=0, memory_gate=g, flow_source="oracle")
    frames = [np.zeros((c, 2, 2)) for _ in range(n)]
    for s in range(n_segments):
        frames[s * segment_length][s] = 1.0
    zero = np.zeros((2, 2, 2))
    results = run_impression(frames, cfg, params, oracle_flows=lambda target, ref: zero)
    last = [r for r in results if r.is_key][-1].task_feature
    # coefficient of keyframe of segment k - m, m = 0..n-1
    return np.array([last[n_segments - 1 - m, 0, 0] for m in range(n_segments)])


# -- verify ------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def verify(instances: int = 10) -> list[CheckResult]:
    """Run the property suites; ``instances`` bounds the randomized cases per check."""
    out = []

    def add(name, ok, detail=""):
        out.append(CheckResult(name, bool(ok), detail))

    table = [avg_propagation_distance(10, k) for k in range(6)]
    add("propagation-distance table", table == [5.5, 4.7, 4.1, 3.7, 3.5, 3.5], str(table))
    enum_ok = all(optimal_keyframe(l) == min(range(l), key=lambda k: (avg_propagation_distance(l, k), k))
                  == (l - 1) // 2 for l in range(1, 51))
    add("optimal keyframe", enum_ok)

    rng = np.random.default_rng(0)
    ratio_ok = True
    for _ in range(100 * instances):
        vals = [Fraction(int(v), int(rng.integers(1, 50))) for v in rng.integers(0, 1000, size=5)]
        vals[0] += 1
        cm = CostModel(*vals)
        l = int(rng.integers(1, 40))
        direct = (cm.c_agg + l * (cm.c_warp + cm.c_flow + cm.c_task) + cm.c_feat) / (l * (cm.c_feat + cm.c_task))
        ratio_ok &= runtime_ratio_exact(cm, l) == direct
    add("runtime ratio", ratio_ok)

    feat = rng.normal(size=(3, 7, 9))
    ident = np.array_equal(bilinear_warp(feat, np.zeros((2, 7, 9)), np.ones((1, 7, 9))), feat)
    shift_ok = all(np.array_equal(bilinear_warp(feat, translation_flow(dx, dy, 7, 9)), shift_oracle(feat, dx, dy))
                   for dx in range(-2, 3) for dy in range(-2, 3))
    add("warp identity", ident)
    add("warp integer shift", shift_ok)

    prof = pipeline_coefficients(1.0)
    add("impression coefficients", np.allclose(prof, agg.contribution_profile(1.0, 0.5, 3), atol=1e-10, rtol=0),
        str(prof.tolist()))

    worst = 0.0
    ok = True
    for s in range(instances):
        for chk in (gradcheck_warp(s), gradcheck_fusion(s)):
            ok &= chk.ok()
            worst = max(worst, chk.max_rel_err)
    add("op gradients", ok, f"max rel err {worst:.2e}")

    worst, ok = 0.0, True
    for s in range(max(1, instances // 5)):
        chk = gradcheck_training(s)
        ok &= chk.ok()
        worst = max(worst, chk.max_rel_err)
    add("training graph gradients", ok, f"max rel err {worst:.2e}")

    ok = True
    for s in range(20 * instances):
        dets, gts = random_map_instance(s)
        ok &= math.isclose(compute_map(dets, gts)[1], brute_force_map(dets, gts), rel_tol=0, abs_tol=1e-12)
    add("mAP against brute force", ok)
    return out
