import numpy as np
import pytest

from aimgate.errors import NumericError
from aimgate.nets import (AdamState, Mlp, TargetPair, adam_step, backward,
                          finite_difference_grads, forward, init_mlp,
                          load_net, net_from_json, net_to_json, polyak_update,
                          save_net)


def test_forward_zero_weights_gives_bias():
    net = Mlp([3, 2])
    net.biases[0][:] = [1.5, -0.5]
    out = forward(net, np.zeros(3) + 7.0)
    assert np.allclose(out, [1.5, -0.5])


def test_forward_single_linear_layer():
    net = Mlp([1, 1])
    net.weights[0][0, 0] = 2.0
    assert forward(net, np.array([3.0]))[0] == pytest.approx(6.0)


def test_forward_pure():
    rng = np.random.default_rng(0)
    net = init_mlp([4, 8, 2], rng)
    x = rng.normal(size=4)
    assert np.array_equal(forward(net, x), forward(net, x))


def test_forward_shape_mismatch():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        forward(net, np.zeros(4))


def test_forward_batch_matches_rows():
    rng = np.random.default_rng(1)
    net = init_mlp([5, 16, 3], rng)
    xb = rng.normal(size=(6, 5))
    out = forward(net, xb)
    for i in range(6):
        assert np.allclose(out[i], forward(net, xb[i]))


def test_backward_zero_upstream():
    rng = np.random.default_rng(2)
    net = init_mlp([3, 8, 2], rng)
    g = backward(net, rng.normal(size=3), np.zeros(2))
    assert all(np.all(gw == 0) for gw in g.weights)
    assert all(np.all(gb == 0) for gb in g.biases)
    assert np.all(g.x == 0)


def test_backward_linear_weight_grad():
    net = Mlp([1, 1])
    net.weights[0][0, 0] = 1.7
    g = backward(net, np.array([3.0]), np.array([2.0]))
    assert g.weights[0][0, 0] == pytest.approx(6.0)  # x * upstream
    assert g.x[0] == pytest.approx(1.7 * 2.0)


def _max_rel_err(net, x, upstream):
    g = backward(net, x, upstream)
    fd = finite_difference_grads(net, x, upstream)
    worst = 0.0
    for a, b in zip(g.params, fd):
        scale = max(np.max(np.abs(b)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - b)) / scale))
    return worst


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    net = init_mlp([4, 16, 16, 2], rng)
    x = rng.normal(size=4)
    upstream = rng.normal(size=2)
    assert _max_rel_err(net, x, upstream) < 1e-4


def test_backward_batch_sums_rows():
    rng = np.random.default_rng(8)
    net = init_mlp([3, 8, 2], rng)
    xb = rng.normal(size=(4, 3))
    ub = rng.normal(size=(4, 2))
    g = backward(net, xb, ub)
    acc = [np.zeros_like(p) for p in net.params]
    for i in range(4):
        gi = backward(net, xb[i], ub[i])
        for a, b in zip(acc, gi.params):
            a += b
    for a, b in zip(acc, g.params):
        assert np.allclose(a, b)


def test_adam_one_step_closed_form():
    p = [np.array([0.0])]
    st = AdamState.for_params(p, lr=1e-4)
    adam_step(p, [np.array([1.0])], st)
    assert p[0][0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-12)


def test_adam_zero_grad_no_move():
    p = [np.array([1.0, 2.0])]
    st = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], st)
    assert np.allclose(p[0], [1.0, 2.0])


def test_adam_equal_grads_equal_updates():
    p = [np.array([5.0, -3.0])]
    st = AdamState.for_params(p, lr=1e-3)
    adam_step(p, [np.array([0.7, 0.7])], st)
    assert p[0][0] - 5.0 == pytest.approx(p[0][1] + 3.0)


def test_adam_nonfinite_grad_leaves_params():
    p = [np.array([1.0])]
    st = AdamState.for_params(p)
    with pytest.raises(NumericError):
        adam_step(p, [np.array([np.nan])], st)
    assert p[0][0] == 1.0
    assert st.step_count == 0


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = init_mlp([2, 4, 1], rng)
        st = AdamState.for_params(net.params, lr=1e-3)
        for _ in range(10):
            g = backward(net, rng.normal(size=2), np.ones(1))
            adam_step(net.params, g.params, st)
        return net.weights[0].copy()
    assert np.array_equal(run(), run())


def test_polyak_tau_one_copies():
    rng = np.random.default_rng(6)
    pair = TargetPair.create([2, 4, 1], rng, tau=1.0)
    pair.online.weights[0][:] = 3.0
    polyak_update(pair)
    assert np.allclose(pair.target.weights[0], 3.0)


def test_polyak_small_tau():
    pair = TargetPair(online=Mlp([1, 1]), target=Mlp([1, 1]), tau=0.005)
    pair.online.weights[0][0, 0] = 1.0
    polyak_update(pair)
    assert pair.target.weights[0][0, 0] == pytest.approx(0.005)


def test_polyak_geometric_decay():
    rng = np.random.default_rng(9)
    pair = TargetPair.create([3, 8, 2], rng, tau=0.1)
    pair.online.weights[0] += 1.0  # freeze online away from target
    gaps = []
    for _ in range(5):
        polyak_update(pair)
        gaps.append(max(np.max(np.abs(o - t)) for o, t in
                        zip(pair.online.params, pair.target.params)))
    for g0, g1 in zip(gaps, gaps[1:]):
        assert g1 == pytest.approx(g0 * 0.9, rel=1e-9)


def test_target_only_moves_via_polyak():
    rng = np.random.default_rng(10)
    pair = TargetPair.create([2, 4, 1], rng)
    before = [p.copy() for p in pair.target.params]
    st = AdamState.for_params(pair.online.params, lr=1e-2)
    g = backward(pair.online, rng.normal(size=2), np.ones(1))
    adam_step(pair.online.params, g.params, st)
    assert all(np.array_equal(a, b) for a, b in zip(before, pair.target.params))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    net = init_mlp([4, 8, 3], rng)
    path = tmp_path / "net.json"
    save_net(path, net)
    loaded = load_net(path)
    assert loaded.layer_sizes == net.layer_sizes
    for a, b in zip(net.params, loaded.params):
        assert np.array_equal(a, b)
    # and through the document form too
    again = net_from_json(net_to_json(net))
    for a, b in zip(net.params, again.params):
        assert np.array_equal(a, b)


def test_gradient_suite_100_random_nets():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        sizes = [int(rng.integers(2, 6)), int(rng.integers(3, 10)),
                 int(rng.integers(3, 10)), int(rng.integers(1, 4))]
        net = init_mlp(sizes, rng)
        x = rng.normal(size=sizes[0])
        upstream = rng.normal(size=sizes[-1])
        worst = max(worst, _max_rel_err(net, x, upstream))
    assert worst < 1e-4
