"""How far back the impression reaches as the memory gate g varies.

With identity warps and a constant fusion weight w the task feature of the
newest segment is a fixed mix of all keyframes so far. g=0 forgets everything
but the previous keyframe; g=1 keeps a geometric tail.

Run: python3 demos/memory_gate.py
"""
import numpy as np

from impression.aggregation import contribution_profile
from impression.checks import pipeline_coefficients

w, n = 0.5, 6
print("offset:      " + " ".join(f"{m:>6d}" for m in range(n)))
for g in (0.0, 0.25, 0.5, 0.75, 1.0):
    prof = contribution_profile(g, w, n)
    print(f"g={g:<4}:      " + " ".join(f"{c:6.3f}" for c in prof) + f"   older mass {sum(prof[2:]):.3f}")

# The nearest previous keyframe loses weight as g grows; the tail beyond it gains.
# The same numbers come out of the real pipeline run on one-hot keyframes:
print("\npipeline trace at g=1:", np.round(pipeline_coefficients(1.0, n_segments=4), 6).tolist())
print("closed form at g=1:   ", contribution_profile(1.0, 0.5, 4))
