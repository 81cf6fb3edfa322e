import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcql_lab import autodiff as ad
from cfcql_lab.neural import (
    Adam,
    GroupedMlp,
    Mlp,
    grad,
    load_params,
    logsumexp,
    save_params,
    softmax,
    train_bc,
)


def finite_difference(loss_of_params, params, h=1e-5):
    """Central finite differences of a scalar function of parameter tensors."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_of_params()
            flat[k] = orig - h
            down = loss_of_params()
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rel=1e-4):
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), 1e-6)
        assert np.max(np.abs(a - n) / denom) < rel


# -- forward -----------------------------------------------------------------


def test_forward_zero_net_is_zero():
    net = Mlp((4, 8, 2))
    out = net.forward_np(np.ones((3, 4)))
    np.testing.assert_array_equal(out, 0.0)


def test_forward_identity_linear_layer():
    net = Mlp((3, 3))
    net.weights[0].data = np.eye(3)
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(net.forward_np(x), x)


def test_forward_matches_independent_reimplementation():
    rng = np.random.default_rng(42)
    net = Mlp((5, 7, 6, 2), rng)
    x = rng.normal(size=(4, 5))
    # straightforward loop-based forward pass
    h = x.copy()
    for k in range(3):
        h = h @ net.weights[k].data + net.biases[k].data
        if k < 2:
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(net.forward_np(x), h, atol=1e-12)
    np.testing.assert_allclose(net.forward(x).data, h, atol=1e-12)


def test_grouped_mlp_matches_per_group_mlps():
    rng = np.random.default_rng(7)
    gnet = GroupedMlp(3, (4, 6, 2), rng)
    x = rng.normal(size=(5, 3, 4))
    out = gnet.forward_np(x)
    for g in range(3):
        solo = Mlp((4, 6, 2))
        for k in range(2):
            solo.weights[k].data = gnet.weights[k].data[g]
            solo.biases[k].data = gnet.biases[k].data[g, 0]
        np.testing.assert_allclose(out[:, g, :], solo.forward_np(x[:, g, :]), atol=1e-12)
    np.testing.assert_allclose(gnet.forward(x).data, out, atol=1e-13)


# -- gradients ---------------------------------------------------------------


def test_grad_linear_quadratic_analytic():
    rng = np.random.default_rng(1)
    net = Mlp((3, 1))
    net.weights[0].data = rng.normal(size=(3, 1))
    x = rng.normal(size=(8, 3))
    target = rng.normal(size=(8, 1))

    def loss_fn(out):
        return ad.tmean(ad.square(out - target))

    grads = grad(net, x, loss_fn)
    pred = net.forward_np(x)
    expect_w = 2 * x.T @ (pred - target) / 8
    expect_b = 2 * (pred - target).mean(axis=0)
    np.testing.assert_allclose(grads[0], expect_w, atol=1e-10)
    np.testing.assert_allclose(grads[1], expect_b, atol=1e-10)


def test_grad_constant_loss_is_zero():
    net = Mlp((3, 2), np.random.default_rng(0))
    grads = grad(net, np.ones((2, 3)), lambda out: ad.tsum(out * 0.0))
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


def test_grad_non_finite_loss_raises():
    net = Mlp((2, 1), np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        grad(net, np.ones((1, 2)), lambda out: out * np.inf)


def _preactivation_margin(net, x):
    """Distance of every hidden pre-activation from the rectifier kink."""
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for k in range(len(net.weights) - 1):
        h = h @ net.weights[k].data + net.biases[k].data
        margin = min(margin, np.abs(h).min())
        h = np.maximum(h, 0.0)
    return margin


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_grad_matches_finite_differences_random_nets(seed):
    rng = np.random.default_rng(seed)
    sizes = (3, rng.integers(2, 6), rng.integers(2, 6), 2)
    net = Mlp(tuple(int(s) for s in sizes), rng)
    x = rng.normal(size=(4, 3))
    while _preactivation_margin(net, x) < 1e-3:  # finite differences break at kinks
        x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))

    def loss_fn(out):
        return ad.tmean(ad.square(out - w)) + ad.tmean(ad.logsumexp_t(out, axis=-1))

    analytic = grad(net, x, loss_fn)

    def loss_value():
        pred = net.forward_np(x)
        lse = pred.max(axis=-1)
        lse = lse + np.log(np.exp(pred - lse[:, None]).sum(axis=-1))
        return ((pred - w) ** 2).mean() + lse.mean()

    numeric = finite_difference(loss_value, net.parameters())
    assert_grads_close(analytic, numeric)


def test_gather_stack_broadcast_gradients():
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.normal(size=(4, 5)))
    idx = rng.integers(0, 5, size=(4, 3))

    def build():
        g = ad.gather_last(x, idx)
        st_ = ad.stack([g, g * 2.0], axis=0)
        b = ad.broadcast_to(ad.tsum(st_, axis=0), (4, 3))
        return ad.tsum(ad.square(b))

    loss = build()
    x.zero_grad()
    ad.backward(loss)
    analytic = [x.grad.copy()]

    def loss_value():
        g = np.take_along_axis(x.data, idx, axis=-1)
        s = g + g * 2.0
        return (s**2).sum()

    numeric = finite_difference(loss_value, [x])
    assert_grads_close(analytic, numeric)


def test_elu_abs_gradients():
    rng = np.random.default_rng(4)
    x = ad.parameter(rng.normal(size=(6,)))
    loss = ad.tsum(ad.elu(x) + ad.absolute(x) * 0.5)
    ad.backward(loss)
    analytic = [x.grad.copy()]

    def loss_value():
        v = x.data
        e = np.where(v > 0, v, np.exp(v) - 1)
        return (e + 0.5 * np.abs(v)).sum()

    numeric = finite_difference(loss_value, [x])
    assert_grads_close(analytic, numeric)


# -- logsumexp ---------------------------------------------------------------


def test_logsumexp_pairs():
    assert logsumexp([0.0, 0.0]) == pytest.approx(np.log(2.0))
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + np.log(2.0))


def test_logsumexp_empty_errors():
    with pytest.raises(ValueError):
        logsumexp([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_logsumexp_matches_bruteforce(values):
    direct = np.log(np.sum(np.exp(values)))
    assert logsumexp(values) == pytest.approx(direct, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
def test_logsumexp_softmax_entropy_identity(values):
    """lse(f) = E_mu[f] + H(mu) with mu = softmax(f)."""
    f = np.array(values)
    mu = softmax(f)
    support = mu > 0
    entropy = -(mu[support] * np.log(mu[support])).sum()
    assert logsumexp(f) == pytest.approx(float((mu * f).sum() + entropy), abs=1e-9)


# -- optimizer ---------------------------------------------------------------


def test_adam_decreases_convex_quadratic_monotonically():
    rng = np.random.default_rng(5)
    p = ad.parameter(rng.normal(size=(6,)) * 5)
    target = rng.normal(size=(6,))
    opt = Adam([p], lr=0.05)
    losses = []
    for _ in range(1500):
        p.zero_grad()
        loss = ad.tsum(ad.square(p - target))
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    warm = losses[10:]
    assert all(b <= a + 1e-12 for a, b in zip(warm, warm[1:]))
    assert losses[-1] < 1e-3


# -- behavior cloning ----------------------------------------------------------


def test_train_bc_recovers_action_frequencies():
    rng = np.random.default_rng(0)
    n = 600
    feats = np.ones((n, 1, 2))
    actions = (rng.random((n, 1)) < 0.25).astype(np.int64)  # P(a=1) = 0.25
    model = train_bc(feats, actions, n_actions=2, rng=rng, steps=1500)
    probs = model.probs(feats[:1])[0, 0]
    empirical = actions.mean()
    assert abs(probs[1] - empirical) < 0.03


def test_train_bc_deterministic_behavior_and_seeding():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(300, 2, 3))
    actions = np.stack(
        [(feats[:, i, 0] > 0).astype(np.int64) for i in range(2)], axis=1
    )
    m1 = train_bc(feats, actions, 2, np.random.default_rng(1), steps=1200)
    m2 = train_bc(feats, actions, 2, np.random.default_rng(1), steps=1200)
    probs = m1.probs(feats)
    chosen = np.take_along_axis(probs, actions[:, :, None], axis=2)
    assert chosen.mean() > 0.95
    for a, b in zip(m1.net.parameters(), m2.net.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(2)
    for model in (Mlp((3, 5, 2), rng), GroupedMlp(4, (3, 8, 2), rng)):
        path = tmp_path / "m.ckpt"
        save_params(path, model)
        loaded = load_params(path)
        for a, b in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
