import math

import numpy as np
import pytest

from impression.checks import tiny_params, tiny_triplet
from impression.nets import (LayerSpec, ModelSpec, NetSpec, Params, desk_spec, feature_forward, flow_forward,
                             init_params, linear_stand_in, make_targets, param_shapes, quality_forward,
                             task_forward, tiny_spec)
from impression.tensor import ShapeError
from impression.training import forward_train
from reference import training_loss

# computed by reference.training_loss and cross-checked against forward_train when frozen
GOLDEN_TINY_LOSS = 3.442949481137914


def test_desk_shapes(rng):
    p = init_params(desk_spec())
    img = rng.uniform(0, 1, (3, 64, 64))
    f = feature_forward(img, p)
    assert f.shape == (16, 16, 16)
    flow, scale = flow_forward(img, img, p)
    assert flow.shape == (2, 16, 16) and scale.shape == (1, 16, 16)
    assert quality_forward(f, p).shape == (1, 16, 16)
    grid = task_forward(f, p)
    assert grid.objectness.shape == (16, 16)
    assert grid.class_logits.shape == (4, 16, 16)
    assert grid.boxes.shape == (4, 16, 16)
    assert grid.stride == 4


def test_zero_heads_start_neutral(rng):
    p = init_params(desk_spec(), seed=3)
    img = rng.uniform(0, 1, (3, 64, 64))
    flow, scale = flow_forward(img, img[:, ::-1], p)
    assert not flow.any()
    assert np.array_equal(scale, np.ones_like(scale))
    f = feature_forward(img, p)
    assert not quality_forward(f, p).any()
    assert not task_forward(f, p).objectness.any()
    assert all(not p[n].any() for n in p if n.endswith(".b"))


def test_input_validation(rng):
    p = init_params(desk_spec())
    with pytest.raises(ShapeError):
        feature_forward(np.zeros((1, 64, 64)), p)
    with pytest.raises(ShapeError):
        feature_forward(np.zeros((3, 62, 64)), p)
    with pytest.raises(ShapeError):
        flow_forward(np.zeros((3, 64, 64)), np.zeros((3, 32, 32)), p)
    with pytest.raises(ShapeError):
        quality_forward(np.zeros((3, 16, 16)), p)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetSpec((LayerSpec(3, 4), LayerSpec(5, 2)))
    with pytest.raises(ValueError):
        NetSpec((LayerSpec(3, 4, act="tanh"),))
    d = desk_spec()
    with pytest.raises(ValueError):
        ModelSpec(d.feature, d.flow, d.quality, d.task, num_classes=3)
    assert ModelSpec.from_json(d.to_json()) == d
    assert ModelSpec.from_json(tiny_spec().to_json()) == tiny_spec()


def test_checkpoint_round_trip(tmp_path):
    p = tiny_params(2).replace(trained_iters=7)
    p.save(tmp_path / "c.bin")
    q = Params.load(tmp_path / "c.bin")
    assert q.spec == p.spec and q.meta == p.meta
    assert list(q) == list(p)
    for n in p:
        assert np.array_equal(p[n], q[n])
    assert q.to_bytes() == p.to_bytes()
    with pytest.raises(ValueError):
        Params.from_bytes(b"garbage\n")


def test_checkpoint_header_lists_owner_and_layer():
    head = tiny_params(0).to_bytes().split(b"\nend\n")[0].decode().splitlines()
    assert head[0] == "IMPCKPT 1"
    tensors = [line.split() for line in head if line.startswith("tensor ")]
    assert [t[1] for t in tensors] == list(param_shapes(tiny_spec()))
    assert ("flow.scale.w", "flow", "scale") == tuple(tensors[[t[1] for t in tensors].index("flow.scale.w")][1:4])


def test_flatten_unflatten_and_validation():
    p = tiny_params(1)
    vec = p.flatten()
    assert vec.size == p.size
    q = p.unflatten(vec * 2)
    assert np.array_equal(q.flatten(), vec * 2)
    with pytest.raises(ShapeError):
        p.unflatten(vec[:-1])
    bad = dict(p.items())
    bad["feat.0.w"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ShapeError):
        Params(p.spec, bad)
    with pytest.raises(ValueError):
        Params(p.spec, {k: v for k, v in p.items() if k != "task.0.b"})
    assert not p.trained and p.replace(trained_iters=1).trained


def test_tiny_model_size():
    assert tiny_params(0).size <= 500


def test_linear_stand_in_is_identity(rng):
    p = linear_stand_in(3)
    img = rng.normal(size=(3, 4, 4))
    assert np.array_equal(feature_forward(img, p), img)


def test_targets_cell_centers_and_smallest_box():
    t = make_targets([(0, 0, 16, 16), (4, 4, 12, 12)], [0, 1], (4, 4), 4)
    # centers at 2, 6, 10, 14; the inner box covers centers 6 and 10
    assert t.positive.all()
    assert t.classes[1:3, 1:3].tolist() == [[1, 1], [1, 1]]
    assert t.classes[0, 0] == 0
    np.testing.assert_allclose(t.boxes[:, 1, 1], [0.5, 0.5, math.log(2), math.log(2)])
    np.testing.assert_allclose(t.boxes[:, 0, 0], [1.5, 1.5, math.log(4), math.log(4)])
    empty = make_targets([(0.5, 0.5, 1.5, 1.5)], [0], (4, 4), 4)
    assert not empty.positive.any()


def test_golden_training_loss_matches_independent_reference():
    t, p = tiny_triplet(3), tiny_params(3)
    loss = forward_train(t, p, "quality", "learned", (2.0, 1.0, 0.5))[0]
    assert math.isclose(loss, GOLDEN_TINY_LOSS, rel_tol=1e-12)
    assert math.isclose(loss, training_loss(t, p, "quality", (2.0, 1.0, 0.5)), rel_tol=1e-12)


@pytest.mark.parametrize("weighting", ["fixed", "none"])
def test_other_weightings_match_reference(weighting):
    t, p = tiny_triplet(5), tiny_params(5)
    assert math.isclose(forward_train(t, p, weighting, "learned")[0], training_loss(t, p, weighting), rel_tol=1e-12)
