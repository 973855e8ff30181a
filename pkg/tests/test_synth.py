import numpy as np
import pytest
from hypothesis import given, strategies as st

from impression.synth import (CLASS_STYLES, Degradation, ObjectSpec, SceneSpec, blur_heavy_suite, degrade,
                              gaussian_kernel, motion_kernel, random_scene, render, training_suite)
from impression.warp import bilinear_warp


def rect(velocity=(0.0, 0.0), pos=(10.0, 12.0), size=(14, 10), cls=0):
    shape, color = CLASS_STYLES[cls]
    return ObjectSpec(cls, shape, color, size, pos, velocity)


def textured(rng, size=16):
    return rng.uniform(0, 1, (3, size, size))


def direct_gaussian(frame, sigma):
    """Full 2-D kernel applied by explicit loops over a symmetrically padded image."""
    k1 = gaussian_kernel(sigma)
    k2 = np.outer(k1, k1)
    r = len(k1) // 2
    out = np.zeros_like(frame)
    for c in range(frame.shape[0]):
        padded = np.pad(frame[c], r, mode="symmetric")
        for y in range(frame.shape[1]):
            for x in range(frame.shape[2]):
                out[c, y, x] = np.sum(k2 * padded[y : y + 2 * r + 1, x : x + 2 * r + 1])
    return out


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_gaussian_blur_matches_direct_convolution(sigma, rng):
    frame = textured(rng)
    np.testing.assert_allclose(degrade(frame, "gaussian_blur", sigma), direct_gaussian(frame, sigma),
                               rtol=0, atol=1e-10)


@given(st.floats(0.3, 2.5), st.integers(0, 2**16))
def test_gaussian_blur_preserves_mean(sigma, seed):
    frame = textured(np.random.default_rng(seed))
    assert abs(degrade(frame, "gaussian_blur", sigma).mean() - frame.mean()) < 1e-10


def test_gaussian_kernel_radius_and_normalization():
    k = gaussian_kernel(2.0)
    assert len(k) == 13 and abs(k.sum() - 1) < 1e-15
    assert np.array_equal(k, k[::-1])


def test_severity_zero_is_identity(rng):
    frame = textured(rng)
    for kind in ("gaussian_blur", "motion_blur", "noise"):
        out = degrade(frame, kind, 0.0)
        assert np.array_equal(out, frame) and out is not frame


def test_blur_reduces_gradient_energy(rng):
    frame = textured(rng, 32)

    def energy(img):
        return float((np.diff(img, axis=1) ** 2).sum() + (np.diff(img, axis=2) ** 2).sum())

    energies = [energy(degrade(frame, "gaussian_blur", s)) for s in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)]
    assert all(b < a for a, b in zip(energies, energies[1:])), energies


def test_motion_blur_kernel():
    k = motion_kernel(5)
    assert abs(k.sum() - 1) < 1e-15
    row = k[k.shape[0] // 2]
    assert np.count_nonzero(row) == 5 and np.allclose(row[row > 0], 0.2)
    assert np.array_equal(motion_kernel(3, (0.0, 1.0)), motion_kernel(3).T)
    assert np.array_equal(motion_kernel(3, (0.0, 0.0)), motion_kernel(3))


def test_noise_is_seeded_and_clipped(rng):
    frame = textured(rng)
    a = degrade(frame, "noise", 0.5, rng=np.random.default_rng(3))
    b = degrade(frame, "noise", 0.5, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and not np.array_equal(a, frame)


def test_degrade_validation(rng):
    with pytest.raises(ValueError):
        degrade(textured(rng), "fog", 1.0)
    with pytest.raises(ValueError):
        degrade(textured(rng), "noise", -1.0)
    with pytest.raises(ValueError):
        Degradation(0, 5, "fog", 1.0)
    with pytest.raises(ValueError):
        Degradation(5, 5, "noise", 1.0)
    with pytest.raises(ValueError):
        Degradation(0, 5, "noise", -0.1)


def test_static_scene_is_constant():
    clip = render(SceneSpec(objects=[rect()], frame_count=6))
    assert all(np.array_equal(f, clip.frames[0]) for f in clip.frames)
    assert not any(clip.flow(t, t + 1, 4).any() for t in range(5))


def test_hard_edges_without_degradation():
    spec = SceneSpec(objects=[rect()], frame_count=2)
    frame = render(spec).frames[0]
    colors = {tuple(frame[:, y, x]) for y in range(64) for x in range(64)}
    assert colors == {spec.background, CLASS_STYLES[0][1]}
    assert render(spec).boxes[0] == [(0, 10.0, 12.0, 24.0, 22.0)]


def test_translation_flow_is_constant():
    clip = render(SceneSpec(objects=[rect((2.0, 0.0))], frame_count=5))
    for t in range(4):
        flow = clip.flow(t, t + 1, 4)
        assert np.all(flow[0] == 0.5) and np.all(flow[1] == 0)


@pytest.mark.parametrize("velocity", [(1.0, 0.0), (-1.0, 1.0), (2.0, -1.0)])
def test_ground_truth_flow_reproduces_target_on_object_interiors(velocity):
    obj = rect(velocity, pos=(20.0, 20.0))
    clip = render(SceneSpec(objects=[obj], frame_count=6))
    t, t2 = 1, 4
    warped = bilinear_warp(clip.frames[t], clip.flow(t2, t, 1))
    x1, y1, x2, y2 = (int(v) for v in obj.box_at(t2))
    np.testing.assert_array_equal(warped[:, y1:y2, x1:x2], clip.frames[t2][:, y1:y2, x1:x2])


def test_per_object_flow_when_velocities_differ():
    a, b = rect((1.0, 0.0), pos=(4.0, 4.0)), rect((0.0, -1.0), pos=(40.0, 40.0), cls=1)
    clip = render(SceneSpec(objects=[a, b], frame_count=4))
    flow = clip.flow(0, 1, 1)
    assert flow[0, 8, 8] == 1.0 and flow[1, 45, 45] == -1.0 and not flow[:, 30, 30].any()


def test_scene_text_round_trip(tmp_path):
    spec = SceneSpec(objects=[rect((1.0, -1.0)), rect(cls=3, pos=(30.0, 30.0))], frame_count=7, seed=9,
                     degradations=[Degradation(2, 5, "gaussian_blur", 3.5), Degradation(0, 1, "noise", 0.25)])
    spec.save(tmp_path / "s.scene")
    back = SceneSpec.load(tmp_path / "s.scene")
    assert back == spec
    assert back.to_text() == spec.to_text()
    with pytest.raises(ValueError):
        SceneSpec.from_text("sky blue")


def test_scene_validation():
    with pytest.raises(ValueError):
        render(SceneSpec(objects=[rect(pos=(70.0, 0.0))]))
    with pytest.raises(ValueError):
        render(SceneSpec(objects=[rect((5.0, 0.0))], frame_count=40))
    with pytest.raises(ValueError):
        render(SceneSpec(objects=[ObjectSpec(0, "star", (1, 1, 1), (4, 4), (1.0, 1.0))]))


def test_render_is_deterministic():
    spec = random_scene(np.random.default_rng(5), degradations=[Degradation(3, 9, "noise", 0.4)])
    a, b = render(spec), render(spec)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert a.severity[3] == 0.4 and a.severity[2] == 0.0


def test_random_scenes_stay_on_canvas():
    rng = np.random.default_rng(0)
    for _ in range(30):
        spec = random_scene(rng)
        assert spec.objects
        for o in spec.objects:
            for t in (0, spec.frame_count - 1):
                x1, y1, x2, y2 = o.box_at(t)
                assert 0 <= x1 and 0 <= y1 and x2 <= 64 and y2 <= 64


def test_blur_heavy_suite_degrades_keyframes():
    clips = blur_heavy_suite(10, seed=0, frame_count=40, segment_length=10)
    key_severity = [c.severity[k] for c in clips for k in range(4, 40, 10)]
    assert np.mean(np.array(key_severity) >= 2) >= 0.3
    assert all(c.severity[:10].max() == 0 for c in clips)
    short = blur_heavy_suite(2, seed=0, frame_count=8, segment_length=10)
    assert all(c.severity.max() == 0 for c in short)


def test_training_suite_is_seeded():
    a, b = training_suite(3, seed=4, frame_count=12), training_suite(3, seed=4, frame_count=12)
    assert all(x.spec == y.spec for x, y in zip(a, b))
