import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dppg_lab.errors import ConfigError, DivergenceError
from dppg_lab.nn import AdamState, Mlp, adam_step, init_mlp, mlp_backward, mlp_forward, n_params, polyak

from conftest import fd_grad, rel_err


def straight_line_forward(net, x):
    # independent re-derivation: explicit loops, no shared helpers
    h = list(map(float, x))
    sizes = net.layer_sizes
    pos = 0
    for k in range(len(sizes) - 1):
        n_in, n_out = sizes[k], sizes[k + 1]
        w = net.params[pos:pos + n_in * n_out]
        b = net.params[pos + n_in * n_out:pos + n_in * n_out + n_out]
        pos += n_in * n_out + n_out
        z = [sum(h[i] * w[i * n_out + j] for i in range(n_in)) + b[j] for j in range(n_out)]
        h = [max(v, 0.0) for v in z] if k < len(sizes) - 2 else z
    return np.array(h)


def test_zero_net_gives_zero_output():
    net = Mlp((3, 4, 2), np.zeros(n_params((3, 4, 2))))
    assert np.all(net(np.array([0.3, -2.0, 5.0])) == 0.0)


def test_identity_net():
    net = Mlp((1, 1), np.array([1.0, 0.0]))
    assert net(np.array([0.5]))[0] == 0.5


def test_forward_matches_straight_line_oracle():
    net = init_mlp((2, 16, 16, 1), np.random.default_rng(7))
    for x in np.random.default_rng(8).normal(size=(10, 2)):
        np.testing.assert_allclose(net(x), straight_line_forward(net, x), atol=1e-12, rtol=0)


def test_batched_forward_equals_rowwise():
    net = init_mlp((3, 8, 8, 2), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3))
    out = net(x)
    for i in range(5):
        np.testing.assert_allclose(out[i], net(x[i]), atol=1e-14)


def test_dimension_mismatch_is_config_error():
    net = init_mlp((2, 4, 1), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mlp_forward(net, np.zeros(3))
    with pytest.raises(ConfigError):
        Mlp((2, 4, 1), np.zeros(5))


def test_stale_tape_rejected():
    a = init_mlp((2, 4, 1), np.random.default_rng(0))
    b = init_mlp((2, 5, 1), np.random.default_rng(0))
    _, tape = mlp_forward(a, np.zeros(2))
    with pytest.raises(RuntimeError):
        mlp_backward(b, tape, np.ones(1))


def test_zero_output_grad_gives_zero_grads():
    net = init_mlp((3, 8, 8, 2), np.random.default_rng(0))
    _, tape = mlp_forward(net, np.ones(3))
    gp, gx = mlp_backward(net, tape, np.zeros(2))
    assert np.all(gp == 0) and np.all(gx == 0)


def test_linear_input_grad_is_weight():
    net = Mlp((1, 1), np.array([-1.7, 0.4]))
    _, tape = mlp_forward(net, np.array([2.0]))
    gp, gx = mlp_backward(net, tape, np.ones(1))
    assert gx[0] == -1.7
    np.testing.assert_array_equal(gp, [2.0, 1.0])


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = (3, 16, 16, 2)
    net = init_mlp(sizes, rng)
    net.params += 0.1 * rng.normal(size=net.params.shape)     # non-zero biases
    x = rng.normal(size=(4, 3))
    g_out = rng.normal(size=(4, 2))
    _, tape = mlp_forward(net, x)
    gp, gx = mlp_backward(net, tape, g_out)

    def f_params(p):
        return float(np.sum(mlp_forward(Mlp(sizes, p), x)[0] * g_out))

    def f_input(xf):
        return float(np.sum(mlp_forward(net, xf.reshape(4, 3))[0] * g_out))

    for ana, fd in ((gp, fd_grad(f_params, net.params)), (gx.ravel(), fd_grad(f_input, x.ravel()))):
        mask = np.abs(fd) > 1e-8
        assert np.all(rel_err(ana[mask], fd[mask]) < 1e-4)


def test_dead_relu_passes_no_gradient():
    # hidden unit 0 gets a large negative bias so it is always off
    net = init_mlp((2, 3, 1), np.random.default_rng(0))
    w, b = net.weights, net.biases
    b[0][0] = -100.0
    _, tape = mlp_forward(net, np.array([0.2, -0.1]))
    gp, _ = mlp_backward(net, tape, np.ones(1))
    gw, gb = net.split(gp)
    assert gb[0][0] == 0.0 and np.all(gw[0][:, 0] == 0.0)
    assert gw[1][0, 0] == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_forward_backward_deterministic(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp((2, 5, 5, 3), rng)
    x, g = rng.normal(size=2), rng.normal(size=3)
    o1, t1 = mlp_forward(net, x)
    o2, t2 = mlp_forward(net, x)
    assert np.array_equal(o1, o2)
    a = mlp_backward(net, t1, g)
    b = mlp_backward(net, t2, g)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_adam_zero_grad_leaves_params():
    net = init_mlp((2, 4, 1), np.random.default_rng(0))
    before = net.params.copy()
    st_ = AdamState.for_net(net, 0.01)
    adam_step(st_, net, np.zeros_like(net.params))
    assert np.array_equal(net.params, before) and st_.step == 1


def test_adam_first_step_magnitude():
    # m1 = 0.1, v1 = 0.001; bias-corrected m/sqrt(v) = 1 -> step = lr / (1 + eps)
    net = Mlp((1, 1), np.array([0.5, 0.0]))
    st_ = AdamState.for_net(net, 0.01)
    adam_step(st_, net, np.array([1.0, 0.0]))
    assert net.params[0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)
    assert net.params[1] == 0.0


def test_adam_matches_hand_recurrence():
    grads = [1.0, -0.5, 2.0, 0.25]
    p, m, v = 0.0, 0.0, 0.0
    net = Mlp((1, 1), np.array([0.0, 0.0]))
    st_ = AdamState.for_net(net, 0.05)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(st_, net, np.array([g, 0.0]))
    assert net.params[0] == pytest.approx(p, abs=1e-14)


def test_adam_rejects_non_finite():
    net = Mlp((1, 1), np.zeros(2))
    with pytest.raises(DivergenceError):
        adam_step(AdamState.for_net(net, 0.1), net, np.array([np.nan, 0.0]))


def test_identical_nets_stay_identical():
    rng = np.random.default_rng(3)
    a = init_mlp((3, 6, 1), np.random.default_rng(0))
    b = a.copy()
    sa, sb = AdamState.for_net(a, 0.01), AdamState.for_net(b, 0.01)
    for _ in range(50):
        g = rng.normal(size=a.params.shape)
        adam_step(sa, a, g)
        adam_step(sb, b, g.copy())
    assert np.array_equal(a.params, b.params)


def test_polyak_geometric_decay():
    src = Mlp((1, 1), np.zeros(2))
    tgt = Mlp((1, 1), np.ones(2))
    for _ in range(100):
        polyak(tgt, src, 0.005)
    np.testing.assert_allclose(tgt.params, (1 - 0.005) ** 100, atol=1e-10, rtol=0)


class TestInit:
    def test_fan_in_bounds(self):
        net = init_mlp((4, 16, 3), np.random.default_rng(0))
        for w, b in zip(net.weights, net.biases):
            bound = 1.0 / np.sqrt(w.shape[0])
            assert np.abs(w).max() <= bound and np.abs(b).max() <= bound
            assert np.any(b != 0.0)

    def test_he_bounds_and_zero_biases(self):
        net = init_mlp((4, 16, 3), np.random.default_rng(0), scheme="he")
        for w, b in zip(net.weights, net.biases):
            assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[0])
            assert np.all(b == 0.0)

    def test_fan_in_spread_matches_uniform_variance(self):
        w = init_mlp((64, 4000, 1), np.random.default_rng(1)).weights[0]
        # Var U(-c, c) = c^2 / 3 with c = 1/8
        assert abs(w.var() - (1 / 64) / 3) < 0.02 * (1 / 64) / 3

    def test_seeded(self):
        a = init_mlp((3, 5, 2), np.random.default_rng(9))
        b = init_mlp((3, 5, 2), np.random.default_rng(9))
        assert np.array_equal(a.params, b.params)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            init_mlp((2, 2), np.random.default_rng(0), scheme="xavier")
