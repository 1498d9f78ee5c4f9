import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collider_rei import autodiff as ad
from collider_rei.autodiff import Tensor
from collider_rei.errors import NonScalarLoss, ShapeMismatch


def leaf(x):
    return Tensor(x, requires_grad=True)


# ---------------------------------------------------------------------------
# forward examples


def test_relu_values():
    assert ad.relu(Tensor(-1.0)).item() == 0.0
    assert ad.relu(Tensor(2.0)).item() == 2.0


def test_matmul_identity():
    a = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum_(ad.square(x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_product_rule():
    x, y = leaf(3.0), leaf(-2.0)
    ad.backward(x * y)
    assert x.grad == -2.0 and y.grad == 3.0


def test_constant_loss_gives_zero_grads():
    w = leaf(np.ones((2, 2)))
    grads = ad.grad(Tensor(5.0), [w])
    assert np.array_equal(grads[0], np.zeros((2, 2)))


def test_nonscalar_loss_rejected():
    with pytest.raises(NonScalarLoss):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_relu_subgradient_zero_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    ad.backward(ad.sum_(ad.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reused_node_visited_once_accumulates():
    x = leaf(2.0)
    y = x * x
    ad.backward(y + y)  # 2x^2 -> 4x
    assert x.grad == 8.0


@pytest.mark.parametrize("a,b", [((3,), (2, 3)), ((2, 3), (4, 2, 3)), ((), (5, 2)), ((2, 3), (2, 3))])
def test_leading_broadcast_allowed(a, b):
    out = ad.add(Tensor(np.ones(a)), Tensor(np.ones(b)))
    assert out.shape == (b if len(b) >= len(a) else a)


@pytest.mark.parametrize("a,b", [((2, 1), (2, 3)), ((2,), (2, 3)), ((3, 2), (2, 3))])
def test_other_broadcast_rejected(a, b):
    with pytest.raises(ShapeMismatch):
        ad.mul(Tensor(np.ones(a)), Tensor(np.ones(b)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_concat_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_logsumexp_stable_for_large_inputs():
    out = ad.logsumexp(Tensor([1000.0, 1000.0]), axis=0)
    assert out.item() == pytest.approx(1000.0 + np.log(2.0))


def test_no_record_without_requires_grad():
    out = ad.exp(Tensor([1.0])) * Tensor([2.0])
    assert not out.requires_grad and out._parents == ()


# ---------------------------------------------------------------------------
# finite-difference checks, 100 randomized trials per primitive


def _away_from(x, points, gap=1e-2):
    """Push entries out of a gap around kinks so finite differences stay on one side."""
    for p in points:
        x = np.where(np.abs(x - p) < gap, p + 2 * gap, x)
    return x


def _cases(rng):
    """(name, fn, inputs) triples; fns map a list of Tensors to a scalar."""
    w = rng.normal(size=(3, 4))
    u = rng.normal(size=(2, 4))
    pos = rng.uniform(0.5, 2.0, size=(2, 4))
    return [
        ("add", lambda t: ad.sum_(ad.add(t[0], t[1]) * w[:2]), [rng.normal(size=(2, 4)), rng.normal(size=(4,))]),
        ("sub", lambda t: ad.sum_(ad.sub(t[0], t[1]) * u), [rng.normal(size=(2, 4)), rng.normal(size=(2, 4))]),
        ("mul", lambda t: ad.sum_(ad.mul(t[0], t[1]) * u), [rng.normal(size=(2, 4)), rng.normal(size=(4,))]),
        ("div", lambda t: ad.sum_(ad.div(t[0], t[1]) * u), [rng.normal(size=(2, 4)), pos]),
        ("matmul", lambda t: ad.sum_(ad.matmul(t[0], t[1]) * u[:, :3]), [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))]),
        ("relu", lambda t: ad.sum_(ad.relu(t[0]) * u), [_away_from(rng.normal(size=(2, 4)), [0.0])]),
        ("exp", lambda t: ad.sum_(ad.exp(t[0]) * u), [rng.normal(size=(2, 4))]),
        ("log", lambda t: ad.sum_(ad.log(t[0]) * u), [pos]),
        ("square", lambda t: ad.sum_(ad.square(t[0]) * u), [rng.normal(size=(2, 4))]),
        ("tanh", lambda t: ad.sum_(ad.tanh(t[0]) * u), [rng.normal(size=(2, 4))]),
        ("softplus", lambda t: ad.sum_(ad.softplus(t[0]) * u), [rng.normal(size=(2, 4)) * 3]),
        ("clip", lambda t: ad.sum_(ad.clip(t[0], -1.0, 1.0) * u), [_away_from(rng.normal(size=(2, 4)) * 2, [-1.0, 1.0])]),
        ("sum_axis", lambda t: ad.sum_(ad.square(ad.sum_(t[0], axis=0))), [rng.normal(size=(3, 4))]),
        ("mean", lambda t: ad.sum_(ad.square(ad.mean(t[0], axis=-1))), [rng.normal(size=(3, 4))]),
        ("broadcast", lambda t: ad.sum_(ad.broadcast(t[0], (2, 4)) * u), [rng.normal(size=(4,))]),
        ("reshape", lambda t: ad.sum_(ad.reshape(t[0], (4, 2)) * u.reshape(4, 2)), [rng.normal(size=(2, 4))]),
        ("slice", lambda t: ad.sum_(ad.square(t[0][:, 1:3])), [rng.normal(size=(2, 4))]),
        ("concat", lambda t: ad.sum_(ad.concat([t[0], t[1]], axis=1) * w[:2, :]), [rng.normal(size=(2, 1)), rng.normal(size=(2, 3))]),
        ("logsumexp", lambda t: ad.sum_(ad.logsumexp(t[0], axis=0) * u[0]), [rng.normal(size=(5, 4)) * 3]),
    ]


PRIMITIVES = [c[0] for c in _cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradcheck(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        _, fn, inputs = next(c for c in _cases(rng) if c[0] == name)
        worst = max(worst, ad.gradcheck(fn, inputs, h=1e-4))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.2e}"


def _mlp_loss(params, x):
    w1, b1, w2, b2 = params
    h = ad.relu(ad.matmul(x, w1) + b1)
    out = ad.matmul(h, w2) + b2
    return ad.mean(ad.square(out))


def test_two_layer_mlp_gradcheck():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.normal(size=(5, 3)))
        params = [rng.normal(size=(3, 6)), rng.normal(size=6) * 0.1, rng.normal(size=(6, 2)), rng.normal(size=2)]
        worst = max(worst, ad.gradcheck(lambda t: _mlp_loss(t, x), params))
    assert worst < 1e-5


def test_gradients_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    params = [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=(6, 2)), rng.normal(size=2)]

    def run():
        leaves = [leaf(p) for p in params]
        loss = _mlp_loss(leaves, Tensor(x))
        return loss.item(), ad.grad(loss, leaves)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_backward_linear_in_loss_scale(values):
    x = leaf(values)
    g1 = ad.grad(ad.sum_(ad.tanh(x)), [x])[0]
    g3 = ad.grad(ad.sum_(ad.tanh(x)) * 3.0, [x])[0]
    assert np.allclose(g3, 3.0 * g1, rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    new, state = ad.adam_step(p, [np.zeros(2)], ad.AdamState.zeros_like(p), lr=0.1)
    assert np.array_equal(new[0], p[0]) and state.t == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = [np.zeros(3)]
    lr, eps = 0.01, 1e-8
    new, _ = ad.adam_step(p, [g], ad.AdamState.zeros_like(p), lr=lr, eps=eps)
    assert np.allclose(new[0], -lr * g / (np.abs(g) + eps), rtol=1e-12, atol=0)


def test_adam_constant_gradient_step_is_lr_sign():
    g = np.array([0.5, -4.0])
    p = [np.zeros(2)]
    state = ad.AdamState.zeros_like(p)
    lr = 1e-3
    for _ in range(500):
        prev = p[0]
        p, state = ad.adam_step(p, [g], state, lr=lr)
    assert np.allclose(p[0] - prev, -lr * np.sign(g), rtol=1e-6)


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeMismatch):
        ad.adam_step(p, [np.zeros(2)], ad.AdamState.zeros_like(p))


def test_adam_class_minimizes_quadratic():
    x = leaf([3.0, -1.0])
    opt = ad.Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ad.backward(ad.sum_(ad.square(x - 1.0)))
        opt.step()
    assert np.allclose(x.data, 1.0, atol=1e-2)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    named = {"enc.w0": np.arange(6.0).reshape(2, 3), "enc.b0": np.array([0.5, -1.5]), "s": np.array(2.0)}
    path = tmp_path / "p.bin"
    ad.save_checkpoint(path, named, seed=7)
    loaded, header = ad.load_checkpoint(path)
    assert header["seed"] == 7 and header["names"] == list(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k]) and loaded[k].shape == named[k].shape


def test_checkpoint_body_is_little_endian_float64(tmp_path):
    path = tmp_path / "p.bin"
    ad.save_checkpoint(path, {"a": np.array([1.0, 2.0])}, seed=0)
    raw = path.read_bytes()
    body = raw[raw.index(b"\n") + 1:]
    assert body == np.array([1.0, 2.0], dtype="<f8").tobytes()
