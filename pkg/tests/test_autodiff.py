import math

import numpy as np
import pytest

from impression import autodiff as ad
from impression.autodiff import Tape, TapeError, Var
from impression.checks import central_difference, compare_gradients, gradcheck_fusion
from impression.nets import make_targets


def check_op(build, inputs, rng, tol=1e-6):
    """Compare tape gradients of ``sum(build(*vars) * probe)`` with central differences."""
    tape = Tape()
    vs = [tape.watch(x, f"x{i}") for i, x in enumerate(inputs)]
    out = build(*vs)
    probe = rng.normal(size=np.shape(out.value))
    grads = tape.backward(out, seed=probe)
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [Var(v if j == i else inputs[j]) for j in range(len(inputs))]
            return float((build(*args).value * probe).sum())
        num, crossed = central_difference(f, x)
        chk = compare_gradients(grads[f"x{i}"], num, crossed)
        assert chk.max_rel_err < tol and chk.kinks == 0, (i, chk)


def test_elementary_op_gradients(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    check_op(ad.add, [a, b], rng)
    check_op(lambda x: ad.add_scalar(x, 2.5), [a], rng)
    check_op(ad.concat, [a, rng.normal(size=(1, 3, 4))], rng)
    check_op(lambda x, y: ad.blend(x, y, 0.3), [a, b], rng)
    check_op(ad.relu, [a + np.sign(a) * 0.1], rng)
    check_op(ad.fuse, [a, b, rng.uniform(0, 1, size=(1, 3, 4))], rng)
    check_op(ad.pair_softmax, [rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))], rng)


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2)])
def test_conv_op_gradient(stride, dilation, rng):
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    check_op(lambda xv, wv, bv: ad.conv2d(xv, wv, bv, stride=stride, padding=dilation, dilation=dilation),
             [x, w, b], rng)


def test_fusion_gradcheck_instances():
    for seed in range(5):
        assert gradcheck_fusion(seed).ok()


def test_tape_runs_backward_once(rng):
    tape = Tape()
    x = tape.watch(rng.normal(size=(1, 2, 2)), "x")
    y = ad.relu(x)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    with pytest.raises(TapeError):
        ad.relu(x)


def test_tape_errors_and_untouched_leaves(rng):
    tape = Tape()
    x = tape.watch(rng.normal(size=(1, 2, 2)), "x")
    unused = tape.watch(rng.normal(size=(1, 2, 2)), "unused")
    with pytest.raises(TapeError):
        tape.watch(np.zeros(1), "x")
    other = Tape()
    z = ad.add_scalar(other.watch(np.zeros((1, 1, 1)), "z"), 1.0)
    with pytest.raises(TapeError):
        tape.backward(z)
    grads = tape.backward(ad.add_scalar(x, 1.0))
    assert not grads["unused"].any()
    assert grads["unused"].shape == unused.value.shape


def test_ops_without_tape_do_not_record(rng):
    out = ad.relu(Var(rng.normal(size=(1, 2, 2))))
    assert out.tape is None


def test_op_counts(rng):
    tape = Tape()
    x = tape.watch(rng.normal(size=(1, 3, 3)), "x")
    flow = Var(np.zeros((2, 3, 3)))
    y = ad.warp(ad.warp(x, flow), flow)
    ad.fuse(x, y, Var(np.full((1, 3, 3), 0.5)))
    assert tape.op_counts == {"warp": 2, "fuse": 1}
    assert len(tape) == 3


def test_pair_softmax_symmetry_and_stability(rng):
    a, b = rng.normal(size=(1, 4, 4)) * 50, rng.normal(size=(1, 4, 4)) * 50
    w_ab = ad.pair_softmax(Var(a), Var(b)).value
    w_ba = ad.pair_softmax(Var(b), Var(a)).value
    np.testing.assert_allclose(w_ab + w_ba, 1.0, rtol=0, atol=1e-15)
    extreme = ad.pair_softmax(Var(np.array([[[1000.0, -1000.0]]])), Var(np.array([[[-1000.0, 1000.0]]]))).value
    assert np.all(np.isfinite(extreme))
    np.testing.assert_array_equal(extreme, [[[0.0, 1.0]]])
    assert ad.pair_softmax(Var(np.zeros((1, 1, 1))), Var(np.zeros((1, 1, 1)))).value[0, 0, 0] == 0.5


def test_swapping_fusion_inputs_complements_the_weight(rng):
    a, b = rng.normal(size=(2, 2, 3, 3))
    sa, sb = rng.normal(size=(2, 1, 3, 3))
    probe = rng.normal(size=(2, 3, 3))
    runs = []
    for first, second in (((a, sa, "a", "sa"), (b, sb, "b", "sb")), ((b, sb, "b", "sb"), (a, sa, "a", "sa"))):
        tape = Tape()
        x0, s0 = tape.watch(first[0], first[2]), tape.watch(first[1], first[3])
        x1, s1 = tape.watch(second[0], second[2]), tape.watch(second[1], second[3])
        out = ad.fuse(x0, x1, ad.pair_softmax(s0, s1))
        runs.append((out.value, tape.backward(out, seed=probe)))
    np.testing.assert_allclose(runs[0][0], runs[1][0], rtol=0, atol=1e-14)
    for name in ("a", "b", "sa", "sb"):
        np.testing.assert_allclose(runs[0][1][name], runs[1][1][name], rtol=0, atol=1e-14)


def test_objectness_loss_is_ln2_for_zero_head():
    k, h, w = 3, 4, 5
    targets = make_targets([(0, 0, 8, 8)], [1], (h, w), 4)
    loss = ad.detection_loss(Var(np.zeros((5 + k, h, w))), targets, k, weights=(1.0, 0.0, 0.0))
    assert math.isclose(float(loss.value), math.log(2), rel_tol=0, abs_tol=1e-15)
    full = ad.detection_loss(Var(np.zeros((5 + k, h, w))), targets, k)
    npos = int(targets.positive.sum())
    expected = math.log(2) + math.log(k) + np.abs(targets.boxes * targets.positive).sum() / npos
    assert math.isclose(float(full.value), expected, rel_tol=1e-14)


def test_detection_loss_gradient(rng):
    k, h, w = 2, 4, 4
    targets = make_targets([(1, 1, 9, 7), (6, 6, 15, 15)], [0, 1], (h, w), 4)
    head = rng.normal(size=(5 + k, h, w))
    check_op(lambda z: ad.detection_loss(z, targets, k, (2.0, 1.0, 0.5)), [head], rng)


def test_branch_log_nesting(rng):
    x = Var(rng.normal(size=(1, 2, 2)))
    assert ad._branches is None
    with ad.branch_log() as outer:
        ad.relu(x)
        with ad.branch_log() as inner:
            ad.relu(x)
            ad.relu(x)
        ad.relu(x)
    assert len(outer) == 2 and len(inner) == 2
    assert ad._branches is None
