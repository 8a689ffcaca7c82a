import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from divforge import autodiff as ad
from divforge.autodiff import Tensor
from divforge.nn import (
    AdamState,
    DegenerateWeightError,
    LinearLayer,
    MLPConfig,
    NonFiniteGradientError,
    SpectralNormState,
    adam_step,
    init_mlp,
    mlp_forward,
    spectral_normalize,
)


def top_singular_value(w):
    # oracle independent of power iteration: eigenvalues of W^T W
    return math.sqrt(max(np.linalg.eigvalsh(w.T @ w).max(), 0.0))


def sn_layer(w, k, seed=0):
    rng = np.random.default_rng(seed)
    out_f, in_f = w.shape
    u = rng.standard_normal(out_f)
    v = rng.standard_normal(in_f)
    state = SpectralNormState(k, u / np.linalg.norm(u), v / np.linalg.norm(v))
    return LinearLayer(Tensor(w, requires_grad=True), Tensor(np.zeros((1, out_f)), requires_grad=True), state)


@pytest.mark.parametrize("scale", [1.0, 2.0])
@pytest.mark.parametrize("iters", [1, 5])
def test_spectral_normalize_scaled_identity(scale, iters):
    layer = sn_layer(scale * np.eye(3), 1.0)
    eff = spectral_normalize(layer, iters).data
    np.testing.assert_allclose(eff, np.eye(3), atol=1e-12)


def test_spectral_normalize_random_matches_svd_oracle():
    w = np.random.default_rng(1).standard_normal((4, 6))
    eff = spectral_normalize(sn_layer(w, 5.0), 50).data
    assert 5 * (1 - 1e-3) <= top_singular_value(eff) <= 5 * (1 + 1e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_spectral_normalize_within_half_percent(rows, cols, seed, k):
    w = np.random.default_rng(seed).standard_normal((rows, cols))
    _, sv, vt = np.linalg.svd(w)
    layer = sn_layer(w, k, seed + 1)
    # power iteration contracts at rate s2/s1 from its start's overlap with the top
    # right singular vector; without a gap or with a near-orthogonal start 30 steps is not enough
    assume(len(sv) == 1 or sv[1] / sv[0] <= 0.9)
    assume(abs(vt[0] @ layer.spectral.v) >= 0.1)
    eff = spectral_normalize(layer, 30).data
    assert abs(top_singular_value(eff) - k) <= 0.005 * k
    assert np.linalg.norm(layer.spectral.u) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(layer.spectral.v) == pytest.approx(1.0, abs=1e-12)


def test_spectral_normalize_small_gap_needs_more_iterations():
    w = np.random.default_rng(32).standard_normal((44, 11))  # s2/s1 ~ 0.977
    err = lambda iters: abs(top_singular_value(spectral_normalize(sn_layer(w, 1.0, 33), iters).data) - 1.0)
    assert err(30) > 0.005
    assert err(100) < 1e-4


def test_spectral_normalize_zero_weight_rejected():
    with pytest.raises(DegenerateWeightError):
        spectral_normalize(sn_layer(np.zeros((3, 3)), 1.0), 3)


def test_spectral_normalize_without_update_keeps_state():
    layer = sn_layer(np.random.default_rng(4).standard_normal((5, 3)), 2.0)
    u0 = layer.spectral.u.copy()
    spectral_normalize(layer, 10, update=False)
    np.testing.assert_array_equal(layer.spectral.u, u0)


def test_spectral_normalize_gradient_holds_power_vectors_constant():
    rng = np.random.default_rng(6)
    layer = sn_layer(rng.standard_normal((4, 3)), 3.0)
    x, proj = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    w0 = layer.weight.data.copy()
    eff = spectral_normalize(layer, 2, update=True)
    ad.backward(ad.sum(ad.matmul(Tensor(x), ad.transpose(eff)) * Tensor(proj)))
    u, v = layer.spectral.u, layer.spectral.v

    def frozen(w):
        return float(np.sum((x @ (3.0 * w / (u @ w @ v)).T) * proj))

    h, numeric = 1e-6, np.zeros_like(w0)
    for idx in np.ndindex(w0.shape):
        e = np.zeros_like(w0)
        e[idx] = h
        numeric[idx] = (frozen(w0 + e) - frozen(w0 - e)) / (2 * h)
    rel = np.abs(layer.weight.grad - numeric) / (np.abs(layer.weight.grad) + 1e-12)
    assert rel.max() < 1e-5


def test_spectral_normalize_gradient_exact_once_converged():
    # at a converged power iteration the frozen-vector gradient is the true gradient
    rng = np.random.default_rng(7)
    layer = sn_layer(rng.standard_normal((4, 3)), 3.0)
    x = Tensor(rng.standard_normal((5, 3)))
    proj = Tensor(rng.standard_normal((5, 4)))

    def loss():
        eff = spectral_normalize(layer, 200, update=False)
        return ad.sum(ad.matmul(x, ad.transpose(eff)) * proj)

    assert ad.parameters_grad_check(loss, [layer.weight]) < 1e-5


def test_single_identity_layer_is_identity():
    net = init_mlp(MLPConfig([3, 3]))
    net.layers[0].weight.data[:] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(mlp_forward(net, x).data, x)


def test_zero_weights_give_bias_rows():
    net = init_mlp(MLPConfig([3, 5, 2]))
    for layer in net.layers:
        layer.weight.data[:] = 0.0
    net.layers[-1].bias.data[:] = [[1.5, -2.0]]
    out = mlp_forward(net, np.ones((4, 3))).data
    np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (4, 1)))


def test_two_layer_net_matches_per_neuron_loop():
    net = init_mlp(MLPConfig([3, 4, 2], activation="leaky-relu", init_seed=8))
    rng = np.random.default_rng(8)
    for layer in net.layers:
        layer.bias.data[:] = rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((5, 3))

    def neuron(w_row, b, inp):
        s = b
        for wi, xi in zip(w_row, inp):
            s += wi * xi
        return s

    expected = np.zeros((5, 2))
    (l1, l2) = net.layers
    for r in range(5):
        h = [neuron(l1.weight.data[j], l1.bias.data[0, j], x[r]) for j in range(4)]
        h = [v if v > 0 else 0.01 * v for v in h]
        for j in range(2):
            expected[r, j] = neuron(l2.weight.data[j], l2.bias.data[0, j], h)
    np.testing.assert_allclose(mlp_forward(net, x).data, expected, atol=1e-12, rtol=0)


def test_width_mismatch_rejected():
    net = init_mlp(MLPConfig([3, 2]))
    with pytest.raises(ad.ShapeError):
        mlp_forward(net, np.ones((4, 5)))


def test_empirical_lipschitz_ratio_bounded_by_product_of_targets():
    targets = [2.0, 1.5, 3.0]
    net = init_mlp(MLPConfig([4, 16, 16, 3], lipschitz=targets, init_seed=2))
    rng = np.random.default_rng(12)
    x1 = rng.standard_normal((10_000, 4))
    x2 = x1 + rng.standard_normal((10_000, 4)) * rng.uniform(1e-3, 3.0, (10_000, 1))
    with ad.no_grad():
        y1 = net(x1, train=False).data
        y2 = net(x2, train=False).data
    ratio = np.linalg.norm(y1 - y2, axis=1) / np.linalg.norm(x1 - x2, axis=1)
    assert ratio.max() <= np.prod(targets)
    assert net.lipschitz_bound() == np.prod(targets)


def test_train_mode_updates_power_iteration_vectors():
    net = init_mlp(MLPConfig([4, 6, 1], lipschitz=1.0, init_seed=3))
    u0 = net.layers[0].spectral.u.copy()
    net(np.ones((2, 4)), train=True)
    assert not np.array_equal(u0, net.layers[0].spectral.u)
    for layer in net.layers:
        assert np.linalg.norm(layer.spectral.u) == pytest.approx(1.0, abs=1e-12)


def test_init_deterministic_per_seed():
    a = init_mlp(MLPConfig([5, 7, 1], init_seed=42))
    b = init_mlp(MLPConfig([5, 7, 1], init_seed=42))
    c = init_mlp(MLPConfig([5, 7, 1], init_seed=43))
    for la, lb in zip(a.layers, b.layers):
        assert la.weight.data.tobytes() == lb.weight.data.tobytes()
    assert not np.array_equal(a.layers[0].weight.data, c.layers[0].weight.data)
    assert not np.any(a.layers[0].bias.data)


def test_init_variance_he_scaling():
    net = init_mlp(MLPConfig([20, 5000], init_seed=1))
    w = net.layers[0].weight.data
    assert w.size == 100_000
    assert abs(w.var() - 0.1) <= 0.05 * 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        MLPConfig([3])
    with pytest.raises(ValueError):
        MLPConfig([3, 0, 1])
    with pytest.raises(ValueError):
        MLPConfig([3, 1], lipschitz=[1.0, 2.0]).targets()
    with pytest.raises(ValueError):
        SpectralNormState(0.0, np.ones(1), np.ones(1))


def test_adam_zero_gradient_is_noop():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    before = p.data.copy()
    state = AdamState(0.01)
    adam_step(state, [p], [np.zeros(3)])
    np.testing.assert_array_equal(p.data, before)
    assert state.step_count == 1


@pytest.mark.parametrize("g", [3.7, -0.002, 1e4])
def test_adam_first_step_is_signed_learning_rate(g):
    p = Tensor([0.5], requires_grad=True)
    adam_step(AdamState(0.01), [p], [np.array([g])])
    assert p.data[0] - 0.5 == pytest.approx(-0.01 * math.copysign(1, g), abs=1e-6)


def test_adam_matches_scalar_recurrence_on_quadratic():
    # minimise 0.5 * a * (x - c)^2 for five steps
    a, c, lr = 3.0, 1.25, 0.05
    x = Tensor([-0.4], requires_grad=True)
    state = AdamState(lr)
    traj = []
    for _ in range(5):
        grad = a * (x.data - c)
        adam_step(state, [x], [grad])
        traj.append(float(x.data[0]))

    xs, m, v, oracle = -0.4, 0.0, 0.0, []
    for t in range(1, 6):
        g = a * (xs - c)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs = xs - lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        oracle.append(xs)
    np.testing.assert_allclose(traj, oracle, atol=1e-12, rtol=0)


def test_adam_rejects_non_finite_gradient():
    p = Tensor([1.0], requires_grad=True, name="phi.0.weight")
    state = AdamState(0.01)
    with pytest.raises(NonFiniteGradientError, match="phi.0.weight") as info:
        adam_step(state, [p], [np.array([np.nan])])
    assert info.value.iteration == 1
    assert p.data[0] == 1.0
