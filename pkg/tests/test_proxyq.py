import numpy as np
import pytest

from aimgate.buffers import Transition, AGENT, EXPERT, human_buffer, novice_buffer
from aimgate.errors import EmptySourceError
from aimgate.nets import AdamState, Mlp, TargetPair, forward
from aimgate.policy import Policy, make_policy, act_batch
from aimgate.proxyq import (ProxyQ, aim_loss_and_grads, compute_beta,
                            compute_epsilon, make_proxy_q, q_value,
                            should_release, should_request, td_loss_and_grads,
                            update_proxy_q)
from aimgate.spaces import DiscreteSpace, symmetric_box

BOX2 = symmetric_box(2)


def constant_q(space, value: float, obs_dim: int = 3) -> ProxyQ:
    """Critic that outputs `value` everywhere (zero weights, bias=value)."""
    if space is BOX2 or not isinstance(space, DiscreteSpace):
        net = Mlp([obs_dim + 2, 8, 1])
    else:
        net = Mlp([obs_dim, 8, space.n])
    net.biases[-1][:] = value
    return ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005),
                  space=space)


def constant_policy(space, action, obs_dim: int = 3) -> Policy:
    """Deterministic policy that always proposes `action`."""
    if isinstance(space, DiscreteSpace):
        net = Mlp([obs_dim, 4, space.n])
        net.biases[-1][action] = 1.0
    else:
        net = Mlp([obs_dim, 4, 2])
        net.biases[-1][:] = np.arctanh(np.asarray(action, dtype=float))
    return Policy(net=net, space=space)


def test_aim_loss_closed_form_deviating():
    # Q == 0 everywhere, agent deviates: |0+1|^2 + |0-1|^2 = 2
    q = constant_q(BOX2, 0.0)
    policy = constant_policy(BOX2, [0.9, 0.0])
    states = np.zeros((1, 3))
    a_h = np.array([[0.0, 0.0]])
    loss, _ = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)
    assert loss == pytest.approx(2.0, abs=1e-12)


def test_aim_loss_closed_form_matched():
    # agent matches expert: masked second term, loss = |0+1|^2 = 1
    q = constant_q(BOX2, 0.0)
    policy = constant_policy(BOX2, [0.0, 0.0])
    states = np.zeros((1, 3))
    a_h = np.array([[0.0, 0.0]])
    loss, _ = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)
    assert loss == pytest.approx(1.0, abs=1e-12)


def test_aim_loss_attained_minimum_is_zero():
    # Q(s, a_h) = -1 and Q(s, a_r) = +1 exactly: loss 0.  Build a critic that
    # keys on the action's first coordinate.
    net = Mlp([5, 1])
    net.weights[0][3, 0] = 2.0 / 0.9   # reads action dim 0 (a_h=0, a_r=0.9)
    net.biases[0][0] = -1.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=BOX2)
    policy = constant_policy(BOX2, [0.9, 0.0])
    states = np.zeros((1, 3))
    a_h = np.array([[0.0, 0.0]])
    loss, grads = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_aim_loss_masked_term_has_no_gradient():
    # with f = 0 everywhere, perturbing Q(s, a_r) changes nothing
    rng = np.random.default_rng(0)
    q = make_proxy_q(3, BOX2, (8,), rng)
    policy = constant_policy(BOX2, [0.1, 0.1])
    states = rng.normal(size=(4, 3))
    a_h = np.tile([0.1, 0.1], (4, 1))  # identical: f = 0
    loss, grads = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)
    # gradient must equal the gradient of the first term alone
    x_h = np.concatenate([states, a_h], axis=1)
    from aimgate.nets import backward
    q_h = forward(q.online, x_h)[:, 0]
    ref = backward(q.online, x_h, ((2.0 / 4) * (q_h + 1.0))[:, None])
    for a, b in zip(grads, ref.params):
        assert np.allclose(a, b, atol=1e-12)


def test_aim_loss_empty_batch():
    q = constant_q(BOX2, 0.0)
    policy = constant_policy(BOX2, [0.0, 0.0])
    with pytest.raises(ValueError):
        aim_loss_and_grads(q, np.zeros((0, 3)), np.zeros((0, 2)), policy, 0.04)


def test_aim_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    q = make_proxy_q(3, BOX2, (8, 8), rng)
    policy = make_policy(3, BOX2, (8,), rng)
    states = rng.normal(size=(5, 3))
    a_h = rng.uniform(-1, 1, size=(5, 2))
    _, grads = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)

    def loss_at():
        l, _ = aim_loss_and_grads(q, states, a_h, policy, eps=0.04)
        return l

    h = 1e-6
    worst = 0.0
    for p, g in zip(q.online.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(0, flat.size, max(1, flat.size // 5)):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_at()
            flat[j] = orig - h
            fm = loss_at()
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - gflat[j]) / max(abs(fd), 1e-6))
    assert worst < 1e-3


def test_td_loss_closed_form():
    # Q(s,a) = 0.5, gamma = 0.99, M(s') = -1 -> (0.5 + 0.99)^2 = 2.2201
    q = constant_q(BOX2, 0.5)
    q.target.biases[-1][:] = -1.0  # target net outputs -1 everywhere
    policy = constant_policy(BOX2, [0.0, 0.0])
    t = Transition(s=np.zeros(3), a=np.zeros(2), s_next=np.zeros(3),
                   actor=AGENT, done=False)
    loss, _ = td_loss_and_grads(q, [t], 0.99, policy, np.random.default_rng(0))
    assert loss == pytest.approx(2.2201, abs=1e-12)


def test_td_loss_terminal_target_zero():
    q = constant_q(BOX2, 0.0)
    q.target.biases[-1][:] = 5.0
    policy = constant_policy(BOX2, [0.0, 0.0])
    t = Transition(s=np.zeros(3), a=np.zeros(2), s_next=np.zeros(3),
                   actor=AGENT, done=True, outcome="crash")
    loss, _ = td_loss_and_grads(q, [t], 0.99, policy, np.random.default_rng(0))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_td_loss_discrete_exact_max():
    sp = DiscreteSpace(3)
    q = constant_q(sp, 0.0)
    q.target.biases[-1][:] = [-1.0, 0.2, -0.3]
    policy = constant_policy(sp, 0)
    t = Transition(s=np.zeros(3), a=1, s_next=np.zeros(3), actor=AGENT, done=False)
    loss, _ = td_loss_and_grads(q, [t], 0.99, policy, np.random.default_rng(0))
    assert loss == pytest.approx((0.0 - 0.99 * 0.2) ** 2, abs=1e-12)


def test_td_loss_empty_batch():
    q = constant_q(BOX2, 0.0)
    policy = constant_policy(BOX2, [0.0, 0.0])
    with pytest.raises(ValueError):
        td_loss_and_grads(q, [], 0.99, policy, np.random.default_rng(0))


def test_compute_beta_nearest_rank():
    sp = DiscreteSpace(2)
    rng = np.random.default_rng(0)
    q = constant_q(sp, 0.0, obs_dim=1)
    # craft a critic that returns the state value itself for action 0
    q.online.weights[0][:] = 0.0
    q.online.biases[0][:] = 0.0
    net = Mlp([1, 2])
    net.weights[0][0, :] = 1.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=sp)
    policy = constant_policy(sp, 0, obs_dim=1)
    buf = novice_buffer()
    for v in (1.0, 2.0, 3.0, 4.0, 5.0):
        buf.push(Transition(s=np.array([v]), a=0, s_next=np.array([v]),
                            actor=AGENT, done=False))
    beta = compute_beta(q, buf, policy, delta=0.2, rng=rng)
    assert beta == pytest.approx(4.0, abs=1e-12)


def test_compute_beta_constant_values():
    sp = DiscreteSpace(2)
    net = Mlp([1, 2])
    net.biases[0][:] = 7.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=sp)
    policy = constant_policy(sp, 0, obs_dim=1)
    buf = novice_buffer()
    for v in range(10):
        buf.push(Transition(s=np.array([float(v)]), a=0, s_next=np.array([0.0]),
                            actor=AGENT, done=False))
    for delta in (0.05, 0.2, 0.9):
        assert compute_beta(q, buf, policy, delta, np.random.default_rng(0)) == 7.0


def test_compute_beta_normal_quantile_monte_carlo():
    # 10^4 standard normal "values": beta should approximate the 95% quantile
    sp = DiscreteSpace(2)
    net = Mlp([1, 2])
    net.weights[0][0, :] = 1.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=sp)
    policy = constant_policy(sp, 0, obs_dim=1)
    rng = np.random.default_rng(2024)
    buf = novice_buffer()
    for v in rng.normal(size=10_000):
        buf.push(Transition(s=np.array([v]), a=0, s_next=np.array([0.0]),
                            actor=AGENT, done=False))
    beta = compute_beta(q, buf, policy, delta=0.05, rng=np.random.default_rng(1))
    assert beta == pytest.approx(1.645, abs=0.05)


def test_compute_beta_exceedance_bound():
    # count of values strictly above beta never exceeds floor(delta * N)
    sp = DiscreteSpace(2)
    net = Mlp([1, 2])
    net.weights[0][0, :] = 1.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=sp)
    policy = constant_policy(sp, 0, obs_dim=1)
    rng = np.random.default_rng(7)
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        delta = float(rng.uniform(0.01, 0.5))
        vals = rng.normal(size=n)
        buf = novice_buffer()
        for v in vals:
            buf.push(Transition(s=np.array([v]), a=0, s_next=np.array([0.0]),
                                actor=AGENT, done=False))
        beta = compute_beta(q, buf, policy, delta, np.random.default_rng(0))
        assert np.sum(vals > beta + 1e-12) <= int(np.floor(delta * n))


def test_compute_beta_empty():
    q = constant_q(BOX2, 0.0)
    policy = constant_policy(BOX2, [0.0, 0.0])
    with pytest.raises(EmptySourceError):
        compute_beta(q, novice_buffer(), policy, 0.05, np.random.default_rng(0))


def test_compute_epsilon_mean_of_squared_distances():
    policy = constant_policy(BOX2, [0.0, 0.0])
    buf = human_buffer()
    buf.push(Transition(s=np.zeros(3), a=np.array([0.1, 0.0]),
                        s_next=np.zeros(3), actor=EXPERT, done=False))
    buf.push(Transition(s=np.zeros(3), a=np.array([0.3, 0.0]),
                        s_next=np.zeros(3), actor=EXPERT, done=False))
    eps = compute_epsilon(buf, policy)
    assert eps == pytest.approx(0.05, abs=1e-12)  # mean of {0.01, 0.09}


def test_compute_epsilon_zero_when_policy_matches():
    policy = constant_policy(BOX2, [0.25, -0.5])
    buf = human_buffer()
    for _ in range(5):
        buf.push(Transition(s=np.zeros(3), a=np.array([0.25, -0.5]),
                            s_next=np.zeros(3), actor=EXPERT, done=False))
    assert compute_epsilon(buf, policy) == pytest.approx(0.0, abs=1e-9)


def test_compute_epsilon_matches_brute_force():
    rng = np.random.default_rng(5)
    policy = make_policy(3, BOX2, (8,), rng)
    buf = human_buffer()
    for _ in range(100):
        buf.push(Transition(s=rng.normal(size=3), a=rng.uniform(-1, 1, 2),
                            s_next=np.zeros(3), actor=EXPERT, done=False))
    eps = compute_epsilon(buf, policy)
    # independent summation oracle
    from aimgate.policy import act
    total = 0.0
    for t in buf.entries:
        d = act(policy, t.s) - t.a
        total += float(d @ d)
    assert eps == pytest.approx(total / 100, abs=1e-12)


def test_compute_epsilon_empty():
    policy = constant_policy(BOX2, [0.0, 0.0])
    with pytest.raises(EmptySourceError):
        compute_epsilon(human_buffer(), policy)


def test_should_request_strict():
    sp = DiscreteSpace(2)
    net = Mlp([1, 2])
    net.weights[0][0, :] = 1.0
    q = ProxyQ(pair=TargetPair(online=net, target=net.copy(), tau=0.005), space=sp)
    assert should_request(q, np.array([4.5]), 0, beta=4.0) is True
    assert should_request(q, np.array([4.0]), 0, beta=4.0) is False


def test_should_release_boundary():
    a_r, a_h = np.array([0.3, 0.0]), np.array([0.1, 0.0])
    assert should_release(a_r, a_h, 0.04, BOX2) is True   # exactly eps
    assert should_release(np.array([0.5, 0.0]), a_h, 0.04, BOX2) is False
    sp = DiscreteSpace(4)
    assert should_release(2, 2, 0.0, sp) is True
    assert should_release(1, 2, 0.0, sp) is False


def test_update_proxy_q_deterministic_and_reports_components():
    rng_seed = 33

    def run():
        rng = np.random.default_rng(rng_seed)
        q = make_proxy_q(3, BOX2, (8,), rng)
        policy = make_policy(3, BOX2, (8,), rng)
        human = human_buffer()
        novice = novice_buffer()
        for i in range(10):
            human.push(Transition(s=rng.normal(size=3), a=rng.uniform(-1, 1, 2),
                                  s_next=rng.normal(size=3), actor=EXPERT,
                                  done=False))
            novice.push(Transition(s=rng.normal(size=3), a=rng.uniform(-1, 1, 2),
                                   s_next=rng.normal(size=3), actor=AGENT,
                                   done=False))
        opt = AdamState.for_params(q.online.params, lr=1e-3)
        reports = []
        for _ in range(5):
            reports.append(update_proxy_q(q, human, novice, policy, 8, 0.99,
                                          0.04, opt, rng))
        return q.online.weights[0].copy(), reports

    w1, r1 = run()
    w2, r2 = run()
    assert np.array_equal(w1, w2)
    assert r1 == r2
    assert set(r1[0]) == {"aim_loss", "td_loss"}
    assert r1[0]["aim_loss"] > 0 and r1[0]["td_loss"] >= 0


def test_update_proxy_q_no_td_matches_label_only_training():
    # with TD disabled the update must depend only on the label loss
    def run(variant):
        rng = np.random.default_rng(4)
        q = make_proxy_q(3, BOX2, (8,), rng)
        policy = make_policy(3, BOX2, (8,), rng)
        human = human_buffer()
        novice = novice_buffer()
        for i in range(6):
            human.push(Transition(s=rng.normal(size=3), a=rng.uniform(-1, 1, 2),
                                  s_next=rng.normal(size=3), actor=EXPERT,
                                  done=False))
        opt = AdamState.for_params(q.online.params, lr=1e-3)
        update_proxy_q(q, human, novice, policy, 4, 0.99, 0.04, opt, rng,
                       variant=variant)
        return q

    q_no_td = run("no_td")
    # manual label-only step for comparison
    rng = np.random.default_rng(4)
    q_ref = make_proxy_q(3, BOX2, (8,), rng)
    policy = make_policy(3, BOX2, (8,), rng)
    human = human_buffer()
    for i in range(6):
        human.push(Transition(s=rng.normal(size=3), a=rng.uniform(-1, 1, 2),
                              s_next=rng.normal(size=3), actor=EXPERT,
                              done=False))
    opt = AdamState.for_params(q_ref.online.params, lr=1e-3)
    batch = human.sample(4, rng)
    states = np.stack([t.s for t in batch])
    acts = np.stack([t.a for t in batch])
    _, grads = aim_loss_and_grads(q_ref, states, acts, policy, 0.04)
    from aimgate.nets import adam_step, polyak_update
    adam_step(q_ref.online.params, grads, opt)
    polyak_update(q_ref.pair)
    for a, b in zip(q_no_td.online.params, q_ref.online.params):
        assert np.array_equal(a, b)


def test_q_value_encoding():
    # continuous: concat(s, a); discrete: one head per action
    rng = np.random.default_rng(9)
    qc = make_proxy_q(3, BOX2, (8,), rng)
    s, a = rng.normal(size=3), rng.uniform(-1, 1, 2)
    expected = forward(qc.online, np.concatenate([s, a]))[0]
    assert q_value(qc, s, a) == pytest.approx(float(expected), abs=1e-15)

    sp = DiscreteSpace(3)
    qd = make_proxy_q(3, sp, (8,), rng)
    out = forward(qd.online, s)
    for i in range(3):
        assert q_value(qd, s, i) == pytest.approx(float(out[i]), abs=1e-15)
