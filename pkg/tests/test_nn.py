import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import conv3d_loops, dense_loops, maxpool3d_loops, random_roi, roi_maxpool3d_loops, softmax_ce_reference

from deepcontext import nn
from deepcontext.nn import Tensor, parameter


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- forward examples ---------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 4, 4, 4))
    y = nn.conv3d(t64(x), t64(np.ones((1, 1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(y.data, x)


def test_conv_all_ones():
    y = nn.conv3d(t64(np.ones((1, 3, 3, 3))), t64(np.ones((1, 1, 2, 2, 2))), t64([0.0]))
    assert y.shape == (1, 2, 2, 2) and np.all(y.data == 8)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        nn.conv3d(t64(np.ones((1, 4, 4, 4))), t64(np.ones((1, 1, 3, 3, 3))), t64([0.0]), stride=2)
    with pytest.raises(ValueError):
        nn.conv3d(t64(np.ones((2, 4, 4, 4))), t64(np.ones((1, 1, 3, 3, 3))), t64([0.0]))


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(1, 0), (1, 1), (2, 1)]))
def test_conv_matches_loops(seed, sp):
    rng = np.random.default_rng(seed)
    s, p = sp
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = nn.conv3d(t64(x), t64(w), t64(b), s, p).data
    assert np.max(np.abs(got - conv3d_loops(x, w, b, s, p))) < 1e-10


def test_conv_batch_equals_single(rng):
    x = rng.normal(size=(3, 2, 4, 4, 4))
    w, b = rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)
    batch = nn.conv3d(t64(x), t64(w), t64(b), 1, 1).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], nn.conv3d(t64(x[i]), t64(w), t64(b), 1, 1).data, atol=1e-12)


def test_maxpool_constant_and_routing():
    y = nn.maxpool3d(t64(np.full((1, 4, 4, 4), 3.0)), 2)
    assert np.all(y.data == 3.0)
    x = np.zeros((1, 2, 2, 2))
    x[0, 1, 0, 1] = 9
    xt = t64(x, grad=True)
    out = nn.maxpool3d(xt, 2)
    assert out.data.item() == 9
    out.backward()
    expected = np.zeros_like(x)
    expected[0, 1, 0, 1] = 1
    np.testing.assert_array_equal(xt.grad, expected)


def test_maxpool_tie_goes_to_first():
    xt = t64(np.ones((1, 2, 2, 2)), grad=True)
    nn.maxpool3d(xt, 2).backward()
    assert xt.grad.sum() == 1 and xt.grad[0, 0, 0, 0] == 1


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(2, 2), (3, 1), (2, 1)]))
def test_maxpool_matches_loops(seed, ws):
    x = np.random.default_rng(seed).normal(size=(2, 6, 5, 7))
    w, s = ws
    if (6 - w) % s or (5 - w) % s or (7 - w) % s:
        return
    assert np.array_equal(nn.maxpool3d(t64(x), w, s).data, maxpool3d_loops(x, w, s))


def test_roi_whole_grid_constant():
    y = nn.roi_maxpool3d(t64(np.full((2, 8, 8, 4), 0.7)), ((0, 0, 0), (8, 8, 4)))
    assert y.shape == (2, 6, 6, 6) and np.all(y.data == 0.7)


def test_roi_single_voxel(rng):
    x = rng.normal(size=(1, 5, 5, 5))
    y = nn.roi_maxpool3d(t64(x), ((2, 3, 1), (3, 4, 2)))
    assert np.all(y.data == x[0, 2, 3, 1])


def test_roi_outside_flagged():
    y, flag = nn.roi_maxpool3d(t64(np.ones((1, 4, 4, 4))), ((10, 10, 10), (12, 12, 12)), return_flag=True)
    assert flag and np.all(y.data == 0)


@given(st.integers(0, 2 ** 31 - 1))
def test_roi_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 7, 6, 5))
    roi = random_roi(rng, x.shape[1:])
    assert np.array_equal(nn.roi_maxpool3d(t64(x), roi).data, roi_maxpool3d_loops(x, roi))


def test_dense_examples(rng):
    x = rng.normal(size=5)
    np.testing.assert_array_equal(nn.dense(t64(x), t64(np.eye(5)), t64(np.zeros(5))).data, x)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(nn.dense(t64(x), t64(np.zeros((3, 5))), t64(b)).data, b)


@given(st.integers(0, 2 ** 31 - 1))
def test_dense_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=9), rng.normal(size=(4, 9)), rng.normal(size=4)
    assert np.max(np.abs(nn.dense(t64(x), t64(w), t64(b)).data - dense_loops(x, w, b))) < 1e-12


# -- losses -------------------------------------------------------------------


def test_softmax_ce_examples():
    assert abs(nn.softmax_cross_entropy(t64(np.zeros(4)), 2).item() - math.log(4)) < 1e-12
    big = np.zeros(4)
    big[1] = 100
    assert nn.softmax_cross_entropy(t64(big), 1).item() < 1e-6
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(t64(np.zeros(4)), 4)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.data())
def test_softmax_ce_reference(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    got = nn.softmax_cross_entropy(t64(logits), label).item()
    assert abs(got - softmax_ce_reference(logits, label)) < 1e-10
    assert abs(nn.softmax(np.array(logits)).sum() - 1) < 1e-12


def test_softmax_ce_gradient_formula(rng):
    z = rng.normal(size=6)
    zt = t64(z, grad=True)
    nn.softmax_cross_entropy(zt, 3).backward()
    p = nn.softmax(z)
    p[3] -= 1
    np.testing.assert_allclose(zt.grad, p, atol=1e-14)


def test_smooth_l1_examples():
    assert nn.smooth_l1(t64([1.0, 2.0]), [1.0, 2.0]).item() == 0
    assert nn.smooth_l1(t64([0.5]), [0.0]).item() == 0.125
    assert nn.smooth_l1(t64([2.0]), [0.0]).item() == 1.5
    with pytest.raises(ValueError):
        nn.smooth_l1(t64([1.0]), [1.0, 2.0])


# -- gradients ----------------------------------------------------------------


def away_from_kinks(rng, shape, gap=0.05):
    """Values with |v| >= gap and pairwise spacing large enough that eps=1e-3 never flips a max."""
    n = int(np.prod(shape))
    v = (np.arange(n) + 1.0) * gap * rng.choice([-1, 1], size=n)
    return rng.permutation(v).reshape(shape)


def wsum(y, probe):
    """Random linear functional sum(y * probe), so every output element gets a distinct weight."""
    probe = probe.data if isinstance(probe, Tensor) else np.asarray(probe)
    flat = nn.reshape(y, (-1,))
    return nn.reshape(nn.dense(flat, t64(probe.reshape(1, -1)), t64([0.0])), ())


def test_grad_dense(rng):
    x, w, b = t64(rng.normal(size=(3, 5)), True), t64(rng.normal(size=(4, 5)), True), t64(rng.normal(size=4), True)
    probe = rng.normal(size=(3, 4))
    assert nn.grad_check(lambda: wsum(nn.dense(x, w, b), probe), [x, w, b]) < 1e-4


def test_grad_conv_relu_stack(rng):
    # resample until no pre-activation sits within eps of the relu kink
    while True:
        x = t64(rng.normal(size=(1, 4, 4, 4)), True)
        w = t64(rng.normal(size=(2, 1, 3, 3, 3)) * 0.3, True)
        b = t64(rng.normal(size=2) * 0.1, True)
        if np.min(np.abs(nn.conv3d(x, w, b, 1, 1).data)) > 2e-2:
            break
    w2 = t64(rng.normal(size=(2, 2, 3, 3, 3)) * 0.3, True)
    b2 = t64(rng.normal(size=2) * 0.1, True)
    probe = t64(rng.normal(size=(2, 4, 4, 4)))

    def f():
        h = nn.relu(nn.conv3d(x, w, b, 1, 1))
        return wsum(nn.conv3d(h, w2, b2, 1, 1), probe)

    assert nn.grad_check(f, [x, w, b, w2, b2]) < 1e-4


def test_grad_maxpool(rng):
    x = t64(away_from_kinks(rng, (2, 4, 4, 4)), True)
    probe = rng.normal(size=(2, 2, 2, 2))
    assert nn.grad_check(lambda: wsum(nn.maxpool3d(x, 2), probe), [x]) < 1e-4


def test_grad_roi(rng):
    x = t64(away_from_kinks(rng, (2, 5, 5, 4)), True)
    probe = t64(rng.normal(size=(2, 6, 6, 6)))

    def f():
        y = nn.roi_maxpool3d(x, ((0.4, 1.2, -0.5), (4.6, 5.0, 3.2)))
        return wsum(y, probe)

    assert nn.grad_check(f, [x]) < 1e-4


def test_grad_losses(rng):
    z = t64(rng.normal(size=(3, 5)), True)
    assert nn.grad_check(lambda: nn.softmax_cross_entropy(z, [0, 4, 2], weight=[1.0, 0.5, 0.0]), [z]) < 1e-4
    p = t64(rng.uniform(-3, 3, size=7), True)
    tgt = p.data + np.where(rng.random(7) < 0.5, 0.4, 1.7) * rng.choice([-1, 1], 7)
    assert nn.grad_check(lambda: nn.smooth_l1(p, tgt), [p]) < 1e-4


def test_grad_grouped_dense_and_structure(rng):
    x = t64(rng.normal(size=(2, 3, 4)), True)
    w = t64(rng.normal(size=(3, 5, 4)), True)
    b = t64(rng.normal(size=(3, 5)), True)
    probe = rng.normal(size=(2, 3, 10))

    def f():
        y = nn.grouped_dense(x, w, b)
        z = nn.concat([y, nn.getitem(nn.stack([y, y], axis=0), 1)], axis=-1)
        return wsum(z, probe)

    assert nn.grad_check(f, [x, w, b]) < 1e-4


# -- optimisation -------------------------------------------------------------


def test_sgd_zero_grad_unchanged():
    p = parameter(np.array([1.0, 2.0]))
    p.grad = np.zeros(2)
    nn.sgd_step([p], [np.zeros(2)], 0.1, 0.9)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_accumulation_averages():
    g = 0.3
    p = parameter(np.array([1.0]))
    for _ in range(4):
        loss = nn.total(nn.scale(p, g))
        loss.backward()
    nn.sgd_step([p], [np.zeros(1)], 0.5, 0.0, accum_count=4)
    assert p.data[0] == pytest.approx(1.0 - 0.5 * g, abs=1e-15)
    assert p.grad is None


def test_accumulation_equals_union(rng):
    X = rng.normal(size=(8, 5))
    y = rng.integers(0, 3, size=8)
    w0 = rng.normal(size=(3, 5))

    def grad(chunks):
        w = parameter(w0.copy())
        b = parameter(np.zeros(3))
        for c in chunks:
            nn.softmax_cross_entropy(nn.dense(t64(X[c]), w, b), y[c]).backward()
        return w.grad / len(chunks)

    whole = grad([np.arange(8)])
    split = grad([np.arange(0, 4), np.arange(4, 8)])
    assert np.max(np.abs(whole - split)) < 1e-10


def test_quadratic_bowl_decreases():
    p = parameter(np.array([3.0, -2.0]))
    opt = nn.SGD([p], lr=0.05, momentum=0.3)
    losses = []
    for _ in range(100):
        loss = nn.total(nn.Tensor(p.data ** 2, parents=(p,), backward=lambda g: (2 * p.data * g,)))
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_reduces_loss(rng):
    p = parameter(rng.normal(size=4))
    opt = nn.Adam([p], lr=0.1)
    first = None
    for _ in range(50):
        loss = nn.smooth_l1(p, np.zeros(4))
        first = first if first is not None else loss.item()
        loss.backward()
        opt.step()
    assert nn.smooth_l1(p, np.zeros(4)).item() < first


# -- modules and files -----------------------------------------------------------


class Tiny(nn.Module):
    def __init__(self, rng):
        super().__init__()
        self.add_conv("c", rng, 1, 2)
        self.add_dense("d", rng, 4, 3)


def test_weights_round_trip(tmp_path, rng):
    m = Tiny(rng)
    m.save(tmp_path / "w")
    manifest = (tmp_path / "w" / "manifest.json").read_text()
    assert '"conv3d"' in manifest and '"dense"' in manifest
    m2 = Tiny(np.random.default_rng(999))
    assert m2.digest() != m.digest()
    m2.load(tmp_path / "w")
    assert m2.digest() == m.digest()
    raw = (tmp_path / "w" / "d.bin").read_bytes()
    assert len(raw) == 4 * (3 * 4 + 3)


def test_init_bound():
    m = Tiny(np.random.default_rng(0))
    assert np.abs(m.params["d"]["weight"].data).max() <= math.sqrt(1 / 4)
    assert m.params["d"]["weight"].dtype == np.float32


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.LayerSpec("batchnorm")


def test_forward_deterministic(rng):
    x = t64(rng.normal(size=(2, 1, 4, 4, 4)))
    w, b = t64(rng.normal(size=(3, 1, 3, 3, 3))), t64(rng.normal(size=3))
    a = nn.maxpool3d(nn.relu(nn.conv3d(x, w, b, 1, 1)), 2).data
    c = nn.maxpool3d(nn.relu(nn.conv3d(x, w, b, 1, 1)), 2).data
    assert a.tobytes() == c.tobytes()
