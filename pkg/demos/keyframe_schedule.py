"""Where to put the keyframe, and what sparse keyframes buy in compute.

Run: python3 demos/keyframe_schedule.py
"""
from fractions import Fraction

from impression.nets import desk_spec
from impression.schedule import (CostModel, avg_propagation_distance, mac_cost_model, optimal_keyframe,
                                 runtime_ratio_approx, runtime_ratio_exact)

# Average warp distance per frame for a 10-frame segment. The +l term is the
# hop that carries the impression from the previous keyframe.
l = 10
for k in range(l):
    marker = "  <- optimal" if k == optimal_keyframe(l) else ""
    print(f"l={l} k={k}: dbar={avg_propagation_distance(l, k):.2f}{marker}")

# The central frame wins for every segment length (ties go to the earlier frame)
print("optimal k for l=1..12:", [optimal_keyframe(n) for n in range(1, 13)])

# Cost model in multiply-accumulates for the desk network at 64x64
cost = mac_cost_model(desk_spec())
print("\nMACs per call:", {k: int(v) for k, v in cost.__dict__.items()})
for n in (1, 2, 5, 10, 20):
    exact, approx = runtime_ratio_exact(cost, n), float(runtime_ratio_approx(cost, n))
    print(f"l={n:2d}: sparse/per-frame cost {exact:.3f} (two-term estimate {approx:.3f})")

# exact arithmetic works too
toy = CostModel(Fraction(100), Fraction(20), Fraction(0), Fraction(0), Fraction(0))
print("\nflow at 1/5 of the feature cost, l=10:", runtime_ratio_exact(toy, 10))
