"""Command-line entry point: ``impression {run,train,sweep,schedule,verify}``.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import checks, experiments, schedule
from .metrics import compute_map
from .nets import Params
from .pipeline import (COMPONENTS, MODES, MissingFlowError, SegmentConfig, total_calls, write_detections_csv,
                       write_frames_csv)
from .synth import SceneSpec, blur_heavy_suite, render, training_suite
from .tensor import ShapeError
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("impression")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    """``"10"``, ``"1,2,5"`` or an inclusive range ``"1-20"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


# -- run manifest ------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything ``run`` needs; loadable from a flat key=value file."""

    checkpoint: str = ""
    mode: str = "impression"
    seed: int = 0
    l: int = 10
    k: int = -1  # -1 -> optimal offset for l
    g: float = 1.0
    flow: str = "oracle"
    clips: int = 10
    frames: int = 40
    scenes: tuple = ()
    out: str = "run_out"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"manifest line without '=': {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValidationError(f"unknown manifest key {key!r}")
            if key in ("seed", "l", "k", "clips", "frames"):
                kw[key] = int(value)
            elif key == "g":
                kw[key] = float(value)
            elif key == "scenes":
                kw[key] = tuple(s.strip() for s in value.split(",") if s.strip())
            else:
                kw[key] = value
        return cls(**kw)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {', '.join(MODES)}")
        if self.flow not in ("learned", "oracle"):
            raise ValidationError("flow must be 'learned' or 'oracle'")
        if self.l < 1 or self.clips < 1 or self.frames < 1:
            raise ValidationError("l, clips and frames must be >= 1")
        if not 0.0 <= self.g <= 1.0:
            raise ValidationError("g must lie in [0, 1]")
        if self.k >= self.l:
            raise ValidationError(f"k must be < l ({self.l})")
        if not self.checkpoint:
            raise ValidationError("a checkpoint is required (train one with 'impression train')")

    def segment(self) -> SegmentConfig:
        k = schedule.optimal_keyframe(self.l) if self.k < 0 else self.k
        return SegmentConfig(segment_length=self.l, keyframe_offset=k, memory_gate=self.g, flow_source=self.flow)


def _load_params(path: str) -> Params:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"checkpoint {path!r} not found")
    try:
        return Params.load(p)
    except (ValueError, KeyError, ShapeError) as err:
        raise ValidationError(f"cannot read checkpoint {path!r}: {err}") from None


def _clips_for(m: RunManifest, segment_length: int):
    if m.scenes:
        clips = []
        for path in m.scenes:
            if not Path(path).is_file():
                raise ValidationError(f"scene file {path!r} not found")
            clips.append(render(SceneSpec.load(path)))
        return clips
    return blur_heavy_suite(m.clips, seed=m.seed, frame_count=m.frames, segment_length=segment_length)


def cmd_run(args) -> int:
    m = RunManifest.from_text(Path(args.config).read_text()) if args.config else RunManifest()
    for name in ("checkpoint", "mode", "seed", "l", "k", "g", "flow", "clips", "frames", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(m, name, value)
    if args.scene:
        m.scenes = tuple(args.scene)
    m.validate()
    params = _load_params(m.checkpoint)
    seg = m.segment()
    clips = _clips_for(m, seg.segment_length)
    per_clip = experiments.run_clips(m.mode, clips, params, seg)
    local = [experiments.detections([c], [rs]) for c, rs in zip(clips, per_clip)]
    offsets = experiments._frame_offsets(clips)
    dets = [replace(d, frame_index=off + d.frame_index) for off, ds in zip(offsets, local) for d in ds]
    _, mean_ap = compute_map(dets, experiments.ground_truth(clips))

    out = Path(m.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections_csv(out / "detections.csv", [(i, d) for i, ds in enumerate(local) for d in ds])
    write_frames_csv(out / "frames.csv", [(i, r) for i, rs in enumerate(per_clip) for r in rs], wallclock=args.wallclock)
    calls = total_calls([r for rs in per_clip for r in rs])
    n_frames = sum(len(c) for c in clips)
    if not math.isfinite(mean_ap):
        raise FloatingPointError("mAP is not finite")
    summary = f"frames={n_frames} mAP={mean_ap:.6f} " + " ".join(f"{c}={calls[c]}" for c in COMPONENTS)
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    if args.l is not None:
        overrides["segment_length"] = args.l
    if args.flow is not None:
        overrides["flow_source"] = args.flow
    if args.weighting is not None:
        overrides["weighting"] = args.weighting
    if args.frozen is not None:
        overrides["frozen"] = tuple(x for x in args.frozen.split(",") if x)
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    if cfg.weighting not in ("quality", "fixed", "none"):
        raise ValidationError(f"unknown weighting {cfg.weighting!r}")
    if cfg.flow_source not in ("learned", "oracle"):
        raise ValidationError(f"unknown flow source {cfg.flow_source!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.cfg").write_text(cfg.to_text())
    clips = training_suite(args.clips, seed=cfg.seed, frame_count=args.frames)
    history = []
    train(clips, cfg, out_dir=out, history=history)
    first, last = history[0][1], history[-1][1]
    summary = f"iters={cfg.total_iters} first_loss={first:.6f} final_loss={last:.6f}"
    (out / "summary.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_sweep(args) -> int:
    params = _load_params(args.checkpoint)
    clips = blur_heavy_suite(args.clips, seed=args.seed, frame_count=args.frames)
    cost = schedule.calibrate_cost_model(params) if args.wallclock else schedule.mac_cost_model(params.spec)
    if args.k is not None and any(args.k >= l for l in args.l):
        log.warning("k=%d is clamped to l-1 for shorter segments", args.k)
    try:
        points = schedule.sweep(args.l, clips, params, g_values=args.g, k=args.k, flow_source=args.flow, cost=cost)
    except schedule.UntrainedParamsError as err:
        raise ValidationError(str(err)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedule.write_sweep_csv(out / "sweep.csv", points, wallclock=args.wallclock)
    for p in points:
        ms = f" ms_per_frame={p.measured_ms_per_frame:.3f}" if args.wallclock else ""
        print(f"l={p.l} g={p.g} k={p.k} mAP={p.mAP:.6f} predicted_ratio={p.predicted_ratio:.4f} dbar={p.dbar}{ms}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    ls = args.l
    if any(l < 1 for l in ls):
        raise ValidationError("segment lengths must be >= 1")
    print("l,k,dbar,optimal")
    for l in ls:
        best = schedule.optimal_keyframe(l)
        for k in (range(l) if args.k is None else [k for k in args.k if 0 <= k < l]):
            print(f"{l},{k},{schedule.avg_propagation_distance(l, k)!r},{int(k == best)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        schedule.write_schedule_csv(out / "schedule.csv", ls, args.k)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = checks.verify(instances=args.instances)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}" + (f" ({r.detail})" if r.detail else ""))
    return EXIT_OK if all(r.ok for r in results) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="impression", description="Sparse-keyframe video detection with impression fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="detect on a benchmark or scene files and score mAP")
    run.add_argument("--config", help="run manifest (key=value lines); flags override it")
    run.add_argument("--checkpoint")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=int)
    run.add_argument("--l", type=int)
    run.add_argument("--k", type=int)
    run.add_argument("--g", type=float)
    run.add_argument("--flow", choices=("learned", "oracle"))
    run.add_argument("--clips", type=int)
    run.add_argument("--frames", type=int)
    run.add_argument("--scene", action="append", help="scene file; repeat for several clips")
    run.add_argument("--out")
    run.add_argument("--wallclock", action="store_true", help="add per-component milliseconds to frames.csv")
    run.set_defaults(func=cmd_run)

    tr = sub.add_parser("train", help="train on the synthetic training suite")
    tr.add_argument("--config", help="training config (key=value lines); flags override it")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iters", type=int)
    tr.add_argument("--l", type=int)
    tr.add_argument("--flow", choices=("learned", "oracle"))
    tr.add_argument("--weighting", choices=("quality", "fixed", "none"))
    tr.add_argument("--frozen", help="comma-separated networks to keep at init, e.g. feat,flow")
    tr.add_argument("--clips", type=int, default=24)
    tr.add_argument("--frames", type=int, default=40)
    tr.add_argument("--out", default="train_out")
    tr.set_defaults(func=cmd_train)

    sw = sub.add_parser("sweep", help="speed/accuracy sweep over segment length and memory gate")
    sw.add_argument("--checkpoint", required=True)
    sw.add_argument("--l", type=_int_list, default=[1, 2, 5, 10, 15, 20])
    sw.add_argument("--g", type=_float_list, default=[1.0])
    sw.add_argument("--k", type=int)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--flow", choices=("learned", "oracle"), default="oracle")
    sw.add_argument("--clips", type=int, default=10)
    sw.add_argument("--frames", type=int, default=40)
    sw.add_argument("--out", default="sweep_out")
    sw.add_argument("--wallclock", action="store_true",
                    help="measure ms/frame and calibrate the cost model by timing (not reproducible)")
    sw.set_defaults(func=cmd_sweep)

    sc = sub.add_parser("schedule", help="average propagation distance table and optimal keyframe")
    sc.add_argument("--l", type=_int_list, default=[10])
    sc.add_argument("--k", type=_int_list)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_schedule)

    ve = sub.add_parser("verify", help="run the built-in property and gradient checks")
    ve.add_argument("--instances", type=int, default=10)
    ve.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, FloatingPointError) as err:
        print(f"impression: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError, ShapeError, MissingFlowError, OSError) as err:
        print(f"impression: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
