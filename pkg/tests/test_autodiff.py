import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainstrip import autodiff as ad
from brainstrip.autodiff import AutodiffError, Tensor

from gradcheck import max_relative_error


def _conv_oracle(x, w, b, stride, pad):
    """Direct 7-deep loop cross-correlation."""
    B, C, X, Y, Z = x.shape
    O, _, kx, ky, kz = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    ox, oy, oz = ((n + 2 * pad - k) // stride + 1 for n, k in zip((X, Y, Z), (kx, ky, kz)))
    out = np.zeros((B, O, ox, oy, oz))
    for n in range(B):
        for o in range(O):
            for i in range(ox):
                for j in range(oy):
                    for k in range(oz):
                        patch = xp[n, :, i * stride : i * stride + kx, j * stride : j * stride + ky, k * stride : k * stride + kz]
                        out[n, o, i, j, k] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (3, 1, 3)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6, 5))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    got = ad.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).values
    np.testing.assert_allclose(got, _conv_oracle(x, w, b, stride, pad), atol=1e-10)


def test_conv_without_bias_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 5, 4, 6))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    head = rng.normal(size=(1, 3, 3, 2, 4))
    err = max_relative_error(lambda xs: ad.weighted_sum(ad.conv3d(xs[0], xs[1]), head), [x, w], rng)
    assert err < 1e-6


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(AutodiffError):
        ad.conv3d(x, Tensor(np.zeros((3, 5, 3, 3, 3))))
    with pytest.raises(AutodiffError):
        ad.conv3d(x, Tensor(np.zeros((3, 2, 5, 5, 5))))
    with pytest.raises(AutodiffError):
        ad.conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), Tensor(np.zeros(2)))


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add", lambda xs, h: ad.weighted_sum(ad.add(xs[0], xs[1]), h), [(2, 3, 2, 2, 2)] * 2),
        ("leaky_relu", lambda xs, h: ad.weighted_sum(ad.leaky_relu(xs[0], 0.01), h), [(2, 3, 2, 2, 2)]),
        ("concat", lambda xs, h: ad.weighted_sum(ad.concat([xs[0], xs[1]]), h), [(2, 1, 2, 2, 2), (2, 2, 2, 2, 2)]),
        ("softmax", lambda xs, h: ad.weighted_sum(ad.softmax(xs[0]), h), [(2, 3, 2, 2, 2)]),
        ("select", lambda xs, h: ad.weighted_sum(ad.select_channel(xs[0], 1), h), [(2, 3, 2, 2, 2)]),
        ("resize", lambda xs, h: ad.weighted_sum(ad.trilinear_resize(xs[0], (5, 2, 7)), h), [(2, 3, 3, 4, 4)]),
        ("upsample", lambda xs, h: ad.weighted_sum(ad.trilinear_upsample(xs[0], 3), h), [(1, 2, 2, 3, 2)]),
    ],
)
def test_operator_gradients(name, build, shapes):
    rng = np.random.default_rng(len(name))
    arrays = [rng.normal(size=s) for s in shapes]
    probe = build([Tensor(a, True) for a in arrays], None)  # output shape for the head weights
    out_shape = probe.parents[0].shape
    head = rng.normal(size=out_shape)
    err = max_relative_error(lambda xs: build(xs, head), arrays, rng)
    assert err < 1e-6, name


def test_dice_loss_value_and_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 2, 3, 3, 3))
    target = (rng.uniform(size=(2, 3, 3, 3)) > 0.5).astype(float)
    p = np.exp(logits[:, 1]) / np.exp(logits).sum(1)
    want = 1 - (2 * (p * target).sum() + 1e-5) / (p.sum() + target.sum() + 1e-5)
    assert abs(float(ad.dice_loss(Tensor(logits), target).values) - want) < 1e-12
    assert max_relative_error(lambda xs: ad.dice_loss(xs[0], target), [logits], rng) < 1e-6


def test_dice_loss_extremes():
    target = np.zeros((1, 2, 2, 2))
    target[0, 0] = 1
    perfect = np.stack([np.where(target == 1, -30.0, 30.0), np.where(target == 1, 30.0, -30.0)], axis=1)
    assert float(ad.dice_loss(Tensor(perfect), target).values) < 1e-6
    # both empty: smoothing makes the loss exactly zero-ish rather than NaN
    empty = float(ad.dice_loss(Tensor(np.stack([np.full((1, 2, 2, 2), 30.0), np.full((1, 2, 2, 2), -30.0)], 1)), np.zeros((1, 2, 2, 2))).values)
    assert math.isfinite(empty) and empty < 1e-3
    with pytest.raises(AutodiffError):
        ad.dice_loss(Tensor(perfect), np.zeros((1, 3, 2, 2)))


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    for _ in range(2):
        ad.backward(ad.weighted_sum(x))
    assert np.all(x.grad == 2.0)
    x.zero_grad()
    ad.backward(ad.weighted_sum(ad.add(x, x)))
    assert np.all(x.grad == 2.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    with pytest.raises(AutodiffError):
        ad.backward(ad.leaky_relu(x))


def test_no_graph_without_requires_grad():
    y = ad.leaky_relu(Tensor(np.ones((1, 1, 2, 2, 2))))
    assert y.backward_fn is None and not y.requires_grad


def test_diamond_graph():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(1, 2, 2, 2, 2))
    h = rng.normal(size=(1, 4, 2, 2, 2))

    def f(xs):
        s = ad.softmax(xs[0])
        return ad.weighted_sum(ad.concat([s, ad.leaky_relu(s, 0.2)]), h)

    assert max_relative_error(f, [a], rng) < 1e-6


def _adam_scalar(p, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_adam_matches_scalar_oracle(p0, grads):
    state = ad.AdamState.zeros_like(np.zeros(1))
    p = np.array([p0])
    for g in grads:
        p, state = ad.adam_step(p, np.array([g]), state)
    assert state.step == len(grads)
    assert abs(p[0] - _adam_scalar(p0, grads)) < 1e-12


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = np.zeros(3)
    state = ad.AdamState.zeros_like(p, lr=0.05)
    for _ in range(2000):
        p, state = ad.adam_step(p, 2 * (p - target), state)
    np.testing.assert_allclose(p, target, atol=1e-3)


def test_adam_shape_check():
    with pytest.raises(AutodiffError):
        ad.adam_step(np.zeros(2), np.zeros(3), ad.AdamState.zeros_like(np.zeros(2)))


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    arrays = {"w": rng.normal(size=(2, 3, 1)), "scalar": np.array(1.5), "b": np.zeros(4)}
    ad.save_arrays(tmp_path / "c.ckpt", arrays, {"kind": "test", "note": "a=b"})
    back, meta = ad.load_arrays(tmp_path / "c.ckpt")
    assert meta == {"kind": "test", "note": "a=b"}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])


def test_container_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(AutodiffError):
        ad.load_arrays(tmp_path / "bad")
    ad.save_arrays(tmp_path / "ok", {"w": np.ones(100)})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-16])
    with pytest.raises(AutodiffError):
        ad.load_arrays(tmp_path / "cut")


# -- worked examples ----------------------------------------------------------------


def test_conv_identity_and_counting_kernels():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 1, 4, 5, 6))
    ident = ad.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(ident.values, x)
    c = 2.5
    out = ad.conv3d(Tensor(np.full((1, 1, 5, 5, 5), c)), Tensor(np.ones((1, 1, 3, 3, 3))), pad=1).values[0, 0]
    assert out[2, 2, 2] == 27 * c and out[0, 0, 0] == 8 * c and out.shape == (5, 5, 5)


def test_conv_gradient_with_bias():
    rng = np.random.default_rng(8)
    x, w, b = rng.normal(size=(1, 2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    head = rng.normal(size=(1, 3, 5, 5, 5))
    f = lambda xs: ad.weighted_sum(ad.conv3d(xs[0], xs[1], xs[2], pad=1), head)  # noqa: E731
    assert max_relative_error(f, [x, w, b], rng, n_coords=150) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([1, 2]))
def test_conv_is_linear(seed, a, b, stride):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 1, 2, 6, 5, 4))
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    lhs = ad.conv3d(Tensor(a * x1 + b * x2), w, stride=stride, pad=1).values
    rhs = a * ad.conv3d(Tensor(x1), w, stride=stride, pad=1).values + b * ad.conv3d(Tensor(x2), w, stride=stride, pad=1).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_upsample_examples():
    line = np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1) * np.ones((1, 1, 2, 2, 2))
    up = ad.trilinear_upsample(Tensor(line), 2).values
    np.testing.assert_allclose(up[0, 0, :, 0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)
    flat = ad.trilinear_upsample(Tensor(np.full((1, 2, 2, 3, 2), 4.0)), 3).values
    assert flat.shape == (1, 2, 6, 9, 6)
    np.testing.assert_allclose(flat, 4.0, atol=1e-14)


def test_dice_loss_half_probability_example():
    target = np.zeros((1, 4, 4, 4))
    target[0, :2] = 1
    loss = float(ad.dice_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), target).values)
    assert abs(loss - 0.5) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 30))
def test_dice_loss_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 2, 3, 3, 3)) * scale
    target = (rng.uniform(size=(2, 3, 3, 3)) < rng.uniform()).astype(float)
    loss = float(ad.dice_loss(Tensor(logits), target).values)
    assert 0.0 <= loss <= 1.0 + 1e-5


def test_softmax_sums_to_one():
    x = np.random.default_rng(9).normal(size=(2, 3, 4, 4, 4)) * 50
    np.testing.assert_allclose(ad.softmax(Tensor(x)).values.sum(axis=1), 1.0, atol=1e-9)


def test_adam_examples():
    p, st0 = np.array([1.5, -2.0]), ad.AdamState.zeros_like(np.zeros(2))
    same, _ = ad.adam_step(p, np.zeros(2), st0)
    assert np.array_equal(same, p)
    moved, _ = ad.adam_step(p, np.array([3.0, -0.2]), st0)
    np.testing.assert_allclose(moved - p, [-0.001, 0.001], rtol=1e-6)
    # five steps on x^2 from 1
    x, st, grads = np.array([1.0]), ad.AdamState.zeros_like(np.zeros(1)), []
    for _ in range(5):
        grads.append(2 * x[0])
        x, st = ad.adam_step(x, 2 * x, st)
    m = v = 0.0
    y = 1.0
    for t in range(1, 6):
        g = 2 * y
        m, v = 0.9 * m + 0.1 * g, 0.999 * v + 0.001 * g * g
        y -= 0.001 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(x[0] - y) < 1e-12


def test_backward_trivial_gradients():
    p = Tensor(np.array(3.0), requires_grad=True)
    grads = ad.backward(ad.weighted_sum(p))
    assert grads[p] == 1.0
    q = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    ad.backward(ad.weighted_sum(q, np.zeros((1, 1, 2, 2, 2))))
    assert np.all(q.grad == 0)


def test_conv_into_dice_chain():
    rng = np.random.default_rng(10)
    x, w, b = rng.normal(size=(2, 2, 4, 4, 4)), rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)
    target = (rng.uniform(size=(2, 4, 4, 4)) > 0.5).astype(float)
    f = lambda xs: ad.dice_loss(ad.conv3d(xs[0], xs[1], xs[2], pad=1), target)  # noqa: E731
    assert max_relative_error(f, [x, w, b], rng, n_coords=120) < 1e-4


def test_forward_and_backward_are_deterministic():
    rng = np.random.default_rng(11)
    x, w = rng.normal(size=(1, 2, 6, 6, 6)), rng.normal(size=(3, 2, 3, 3, 3))

    def run():
        wt = Tensor(w, True)
        out = ad.conv3d(Tensor(x), wt, stride=2, pad=1)
        ad.backward(ad.weighted_sum(ad.leaky_relu(out)))
        return out.values, wt.grad

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
