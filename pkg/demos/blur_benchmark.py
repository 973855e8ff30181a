"""Train a small model briefly and compare the four inference modes on blurred clips.

A short run (a few hundred steps) is enough to see the pattern; the acceptance
suite trains longer on five seeds.

Run: python3 demos/blur_benchmark.py [iterations]
"""
import sys

import numpy as np

from impression.experiments import clip_map, keyframe_weights, run_clips
from impression.pipeline import SegmentConfig, total_calls
from impression.synth import blur_heavy_suite, training_suite
from impression.training import TrainConfig, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600

train_clips = training_suite(12, seed=0)
bench = blur_heavy_suite(6, seed=0)
print(f"benchmark: {len(bench)} clips, {np.mean([c.severity > 0 for c in bench]):.0%} of frames degraded")

history = []
params = train(train_clips, TrainConfig(total_iters=iters, lr_schedule=((0, 5e-2), (iters * 2 // 3, 5e-3))),
               history=history)
losses = [h[1] for h in history]
print(f"loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f} over {iters} steps")

seg = SegmentConfig(segment_length=10, flow_source="oracle")
for mode in ("perframe", "dff", "fixed", "impression"):
    per_clip = run_clips(mode, bench, params, seg)
    calls = total_calls([r for rs in per_clip for r in rs])
    print(f"{mode:>10}: mAP {clip_map(bench, per_clip):.3f}  feature passes {calls['feat']}")

# Blurred keyframes should earn a lower weight than sharp ones
degraded, clean = keyframe_weights(bench, run_clips("impression", bench, params, seg))
print(f"mean keyframe weight: degraded {np.mean(degraded):.3f}, clean {np.mean(clean):.3f}")
