"""Sparse-keyframe video object detection with a quality-weighted impression feature.

The package is organized bottom-up: ``tensor`` and ``warp`` hold the numeric
primitives, ``autodiff`` a small reverse-mode tape, ``nets`` the four
networks, ``aggregation`` and ``pipeline`` the inference algorithm,
``training`` the end-to-end optimizer, ``synth`` and ``metrics`` the
synthetic benchmark, and ``schedule`` the cost model and sweeps.
"""
from .aggregation import adaptive_weights, contribution_profile, fuse, impression_update
from .metrics import Detection, GroundTruth, compute_map, decode_detections, iou
from .nets import ModelSpec, Params, desk_spec, init_params, tiny_spec
from .pipeline import SegmentConfig, dff_baseline, fixed_weight_variant, per_frame_baseline, run_impression, run_mode
from .schedule import (CostModel, avg_propagation_distance, calibrate_cost_model, optimal_keyframe,
                       runtime_ratio_approx, runtime_ratio_exact, sweep)
from .synth import SceneSpec, VideoClip, blur_heavy_suite, degrade, render, training_suite
from .training import TrainConfig, Triplet, backward, forward_train, sample_triplet, train
from .warp import bilinear_warp, bilinear_warp_backward

__version__ = "0.1.0"
