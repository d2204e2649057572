import numpy as np
import pytest

from edgematrix import nmac
from edgematrix.nmac import (
    Mlp, NmacTrainer, ReplayBuffer, ShapeMismatch, StateSchema, TrainSettings,
    Transition, act, baseline_policy, critic_target, make_actor, make_critic,
    soft_update, train_offline, update_actor, update_critic,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- networks and acting ------------------------------------------------------

def test_act_deterministic_without_noise():
    actor = make_actor(4, rng(1))
    s = rng(2).uniform(size=4)
    a1 = act(actor, s, 0.0)
    a2 = act(actor, s, 0.0)
    assert np.array_equal(a1, a2)
    assert a1.shape == (2,)


def test_zero_weight_actor_outputs_half():
    actor = make_actor(3, rng(0))
    for W in actor.weights:
        W[:] = 0.0
    assert np.allclose(act(actor, np.zeros(3), 0.0), 0.5)


def test_noise_clamped_to_unit_box():
    actor = make_actor(3, rng(0))
    r = rng(5)
    s = r.uniform(size=3)
    for _ in range(1000):
        a = act(actor, s, 10.0, r)
        assert np.all(a >= 0.0) and np.all(a <= 1.0)


def test_forward_rejects_wrong_width():
    net = make_actor(4, rng(0))
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros(5))


def test_mlp_checkpoint_roundtrip():
    net = make_critic(6, rng(3))
    again = Mlp.from_dict(net.to_dict())
    x = rng(4).uniform(size=6)
    assert np.allclose(net.forward(x), again.forward(x))


# -- targets and updates ------------------------------------------------------

def test_critic_target_arithmetic():
    actor = make_actor(2, rng(0))
    critic = make_critic(4, rng(1))

    class Const:
        def forward(self, x):
            return np.array([[2.0]])

    ns = np.zeros((1, 2))
    assert critic_target(1.0, 0.95, [actor], Const(), ns) == pytest.approx(2.9)
    assert critic_target(1.0, 0.0, [actor], Const(), ns) == 1.0
    assert critic_target(1.0, 0.95, [actor], Const(), ns, terminal=True) == 1.0


def test_update_critic_noop_at_zero_error():
    critic = make_critic(3, rng(0))
    inputs = rng(1).uniform(size=(4, 3))
    targets = critic.forward(inputs)[:, 0].copy()
    before = [W.copy() for W in critic.weights]
    loss = update_critic(critic, inputs, targets)
    assert loss == pytest.approx(0.0)
    for W0, W1 in zip(before, critic.weights):
        assert np.array_equal(W0, W1)


def test_update_critic_reduces_loss_on_frozen_batch():
    critic = make_critic(5, rng(2))
    inputs = rng(3).uniform(size=(16, 5))
    targets = rng(4).uniform(size=16)
    losses = [update_critic(critic, inputs, targets, lr=0.01) for _ in range(50)]
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_critic_gradient_matches_finite_differences():
    h = 1e-5
    critic = make_critic(4, rng(7))
    inputs = rng(8).uniform(size=(6, 4))
    targets = rng(9).uniform(size=6)

    def loss_at():
        q = critic.forward(inputs)[:, 0]
        return float(np.mean((q - targets) ** 2))

    cache = []
    q = critic.forward(inputs, cache)[:, 0]
    grad_out = (2.0 * (q - targets) / len(targets))[:, None]
    gW, gb, _ = critic.backward(cache, grad_out)
    worst = 0.0
    for W, g in zip(critic.weights, gW):
        for idx in [(0, 0), (0, 1)]:
            keep = W[idx]
            W[idx] = keep + h
            up = loss_at()
            W[idx] = keep - h
            dn = loss_at()
            W[idx] = keep
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(1e-8, abs(fd)))
    assert worst <= 1e-3


class QuadraticCritic:
    """Exact Q = -sum((a - 0.7)^2) over the action coordinates."""

    def __init__(self, action_slice):
        self.action_slice = action_slice

    def forward(self, x, cache=None):
        a = x[:, self.action_slice]
        if cache is not None:
            cache.append(x)
        return -np.sum((a - 0.7) ** 2, axis=1, keepdims=True)

    def backward(self, cache, grad_out):
        x = cache[0]
        d_in = np.zeros_like(x)
        d_in[:, self.action_slice] = -2.0 * (x[:, self.action_slice] - 0.7)
        return [], [], d_in * grad_out


def test_actor_ascends_to_quadratic_optimum():
    actor = make_actor(1, rng(12))
    sl = slice(1, 3)
    critic = QuadraticCritic(sl)
    states = np.array([[0.5]])
    for _ in range(4000):
        fresh = actor.forward(states)
        inputs = np.concatenate([states, fresh], axis=1)
        update_actor(actor, critic, states, inputs, sl, lr=0.05)
    out = actor.forward(states)[0]
    assert np.all(np.abs(out - 0.7) <= 0.01)


def test_actor_unchanged_for_action_constant_critic():
    actor = make_actor(2, rng(1))

    class Flat:
        def forward(self, x, cache=None):
            if cache is not None:
                cache.append(x)
            return np.full((len(x), 1), 3.0)

        def backward(self, cache, grad_out):
            return [], [], np.zeros_like(cache[0])

    states = rng(2).uniform(size=(4, 2))
    fresh = actor.forward(states)
    inputs = np.concatenate([states, fresh], axis=1)
    before = [W.copy() for W in actor.weights]
    update_actor(actor, Flat(), states, inputs, slice(2, 4), lr=0.1)
    for W0, W1 in zip(before, actor.weights):
        assert np.array_equal(W0, W1)


def test_actor_gradient_matches_finite_differences():
    h = 1e-5
    state_dim = 3
    actor = make_actor(state_dim, rng(20))
    critic = make_critic(state_dim + 2, rng(21))
    states = rng(22).uniform(size=(5, state_dim))
    sl = slice(state_dim, state_dim + 2)

    def j_at():
        a = actor.forward(states)
        return float(np.mean(critic.forward(np.concatenate([states, a], axis=1))))

    c_cache = []
    a = actor.forward(states)
    q_in = np.concatenate([states, a], axis=1)
    critic.forward(q_in, c_cache)
    grad_out = np.full((5, 1), 1.0 / 5)
    _, _, d_in = critic.backward(c_cache, grad_out)
    a_cache = []
    actor.forward(states, a_cache)
    gW, gb, _ = actor.backward(a_cache, d_in[:, sl])
    worst = 0.0
    for W, g in zip(actor.weights, gW):
        for idx in [(0, 0), (1, 1)]:
            keep = W[idx]
            W[idx] = keep + h
            up = j_at()
            W[idx] = keep - h
            dn = j_at()
            W[idx] = keep
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(1e-8, abs(fd)))
    assert worst <= 1e-3


def test_soft_update_limits_and_convergence():
    a = make_actor(2, rng(0))
    b = make_actor(2, rng(1))
    t = a.copy()
    soft_update(t, b, tau_soft=1.0)
    for pt, pb in zip(t.params(), b.params()):
        assert np.allclose(pt, pb)
    t = a.copy()
    soft_update(t, b, tau_soft=0.0)
    for pt, pa in zip(t.params(), a.params()):
        assert np.allclose(pt, pa)
    t = a.copy()
    d0 = max(np.max(np.abs(pt - pb)) for pt, pb in zip(t.params(), b.params()))
    for _ in range(69):
        soft_update(t, b, tau_soft=0.01)
    d1 = max(np.max(np.abs(pt - pb)) for pt, pb in zip(t.params(), b.params()))
    assert d1 <= 0.55 * d0  # (1 - 0.01)^69 ~ 0.5


def test_soft_update_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        soft_update(make_actor(2, rng(0)), make_actor(3, rng(0)))


# -- replay, schema, policies -------------------------------------------------

def _transition(n=2, d=3, seed=0):
    r = rng(seed)
    return Transition(r.uniform(size=(n, d)), r.uniform(size=(n, 2)),
                      r.uniform(size=n), r.uniform(size=(n, d)))


def test_replay_seeded_sampling_reproducible():
    a = ReplayBuffer(capacity=50, batch_size=4, seed=9)
    b = ReplayBuffer(capacity=50, batch_size=4, seed=9)
    for k in range(10):
        t = _transition(seed=k)
        a.push(t)
        b.push(t)
    sa, sb = a.sample(), b.sample()
    for x, y in zip(sa, sb):
        assert np.array_equal(x.rewards, y.rewards)


def test_replay_ring_overwrite_and_underflow():
    buf = ReplayBuffer(capacity=3, batch_size=2, seed=0)
    with pytest.raises(nmac.NmacError):
        buf.sample()
    for k in range(5):
        buf.push(_transition(seed=k))
    assert len(buf) == 3


def test_state_schema_size_and_range():
    from edgematrix.domain import ServiceClass
    services = [ServiceClass(1, l, 0.1, 200.0, 0.05, 30.0, 3.0) for l in (1, 2)]
    schema = StateSchema(services, cell_budget=6, degree_cap=4)
    assert schema.size == 5 * 2 + 3 * 6 + 2 * 5
    v = schema.encode({(1, 1): 3.0}, [(0.5, 0.5, 1.0)], [(0.2, 0.9)])
    assert v.shape == (schema.size,)
    assert np.all(v >= 0.0) and np.all(v <= 1.0)


def test_baseline_policies():
    static = baseline_policy("static_half")
    assert np.array_equal(static.act(0, np.zeros(3)), [0.5, 0.5])
    r1 = baseline_policy("random", seed=4)
    r2 = baseline_policy("random", seed=4)
    assert np.array_equal(r1.act(0, np.zeros(3)), r2.act(0, np.zeros(3)))
    assert baseline_policy("independent") == "independent"
    with pytest.raises(nmac.NmacError):
        baseline_policy("greedy")


def test_trainer_critic_input_dims():
    cen = NmacTrainer(n_agents=3, state_dim=7, centralized=True)
    ind = NmacTrainer(n_agents=3, state_dim=7, centralized=False)
    assert cen.critic_input_dim == 3 * 7 + 2 * 3
    assert ind.critic_input_dim == 7 + 2


def test_trainer_checkpoint_roundtrip_and_mismatch():
    tr = NmacTrainer(n_agents=2, state_dim=4, seed=1)
    data = tr.to_dict()
    again = NmacTrainer.from_dict(data)
    s = rng(2).uniform(size=4)
    assert np.allclose(tr.actors[0].forward(s), again.actors[0].forward(s))
    data["state_dim"] = 9
    with pytest.raises(ShapeMismatch):
        NmacTrainer.from_dict(data)


# -- offline loop against a toy env -------------------------------------------

class ToyEnv:
    """Reward = mean action; richer actions are strictly better."""

    def __init__(self, n=2, d=3):
        self.n, self.d = n, d

    def reset(self):
        return np.full((self.n, self.d), 0.5)

    def step(self, actions):
        rewards = actions.mean(axis=1)
        return np.full((self.n, self.d), 0.5), rewards


def test_train_offline_zero_episodes():
    tr, log = train_offline(ToyEnv(), 0, 4, seed=1)
    assert log == []


def test_train_offline_seed_determinism():
    settings = TrainSettings(explore_episodes=2, batch_size=8)
    _, log1 = train_offline(ToyEnv(), 6, 4, seed=3, settings=settings)
    _, log2 = train_offline(ToyEnv(), 6, 4, seed=3, settings=settings)
    assert log1 == log2
    _, log3 = train_offline(ToyEnv(), 6, 4, seed=4, settings=settings)
    assert log1 != log3


def test_train_offline_improves_on_toy_env():
    settings = TrainSettings(explore_episodes=10, batch_size=16)
    tr, log = train_offline(ToyEnv(), 80, 4, seed=5, settings=settings)
    assert np.mean(log[-10:]) > np.mean(log[:10])
    # trained actor should push actions well above the random mean of 0.5
    out = tr.actors[0].forward(np.full(3, 0.5))[0]
    assert out.mean() > 0.6
