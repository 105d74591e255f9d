import copy

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from taylortd import autodiff as ad
from taylortd import taylor as T
from taylortd.agents import Agent, behavioural_action, random_policy_return, train_agent, train_iteration
from taylortd.buffer import ReplayBuffer
from taylortd.config import desk_config
from taylortd.envs import Pendulum
from taylortd.rng import make_rng

from conftest import rel_err


def small_cfg(**kw):
    base = dict(actor_hidden=(16, 16), critic_hidden=(16, 16), model_hidden=(16, 16), reward_hidden=(16,),
                n_members=3, batch_size=16, model_batch_size=16, dyna_updates=3, warmup_steps=50,
                total_steps=300, eval_interval=100, eval_episodes=1, expected_batch_size=4,
                n_state_perturb=3, n_action_perturb=3)
    base.update(kw)
    return desk_config(**base)


def filled_buffer(n=200, seed=0):
    env, rng = Pendulum(), make_rng((seed, 5))
    buf = ReplayBuffer(1000, env.obs_dim, env.act_dim)
    state = env.reset(rng)
    for _ in range(n):
        a = rng.uniform(-env.action_bound, env.action_bound, size=1)
        obs = env.observe(state)
        state, r, _ = env.step(state, a)
        buf.add(obs, a, r, env.observe(state))
    return buf


def make_agent(kind="tatd3", seed=0, **kw):
    env = Pendulum()
    return Agent(kind, env.obs_dim, env.act_dim, env.action_bound, small_cfg(**kw), make_rng((seed, 6)))


def capture_grads(agent):
    captured = []
    agent._apply_critic_grads = lambda grads: captured.append([g.copy() for g in grads])
    return captured


# ---------------------------------------------------------------------------
# behaviour policy and buffer


def test_behavioural_action_examples():
    actor = lambda S: np.full((len(S), 1), 1.5)
    rng = make_rng(0)
    assert_array_equal(behavioural_action(actor, np.zeros(3), 0.0, 2.0, rng), [1.5])
    a = behavioural_action(actor, np.zeros((500, 3)), 10.0, 2.0, rng)
    assert a.shape == (500, 1) and a.max() == 2.0 and a.min() == -2.0
    with pytest.raises(ValueError):
        behavioural_action(actor, np.zeros(3), -0.1, 2.0, rng)


def test_behavioural_noise_statistics():
    actor = lambda S: np.zeros((len(S), 2))
    a = behavioural_action(actor, np.zeros((100_000, 3)), 0.2, 10.0, make_rng(1))
    assert np.all(np.abs(a.mean(0)) < 4 * 0.2 / np.sqrt(1e5))
    assert_allclose(a.std(0), 0.2, rtol=0.02)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(3, 1, 1)
    for i in range(5):
        buf.add([i], [0.0], float(i), [i + 1.0])
    assert len(buf) == 3
    assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]
    # running stats track only the stored transitions
    m_in, _, m_d, _ = buf.input_stats()
    assert_allclose(m_in, [3.0, 0.0])
    assert_allclose(m_d, [1.0])


def test_buffer_sampling_is_uniform_and_without_replacement():
    buf = ReplayBuffer(10, 1, 1)
    for i in range(10):
        buf.add([i], [0.0], 0.0, [0.0])
    rng = make_rng(2)
    counts = np.zeros(10)
    for _ in range(5000):
        idx = buf.sample_indices(4, rng)
        assert len(set(idx.tolist())) == 4
        counts[idx] += 1
    expected = counts.sum() / 10
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 < 21.67  # upper 1% point of chi-squared with 9 degrees of freedom


def test_buffer_errors():
    buf = ReplayBuffer(4, 1, 1)
    with pytest.raises(ValueError):
        buf.sample_indices(1, make_rng(0))
    buf.add([0.0], [0.0], 0.0, [0.0])
    with pytest.raises(ValueError):
        buf.sample_indices(2, make_rng(0))
    with pytest.raises(ValueError):
        buf.add([0.0], [0.0], np.nan, [0.0])
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1, 1)


# ---------------------------------------------------------------------------
# critic updates


def test_zero_lambda_tatd3_is_bitwise_dyna_with_matched_noise():
    buf = filled_buffer()
    a = make_agent("tatd3", lambda_a=0.0, lambda_s=0.0)
    b = make_agent("dyna", lambda_a=0.0, lambda_s=0.0, dyna_noise="matched")
    ra, rb = make_rng(3), make_rng(3)
    for _ in range(5):
        train_iteration(a, buf, ra)
        train_iteration(b, buf, rb)
    pa, pb = a.parameters(), b.parameters()
    assert a.critic_updates == 15
    for key in pa:
        assert_array_equal(pa[key], pb[key])


@pytest.mark.parametrize("kind", ["tatd3", "dyna", "expected"])
def test_critic_changes_only_after_warmup(kind):
    agent = make_agent(kind, warmup_steps=100)
    rng = make_rng(4)
    before = agent.critics[0].copy()
    out = train_iteration(agent, filled_buffer(99), rng)
    assert not out["updated"]
    assert_array_equal(agent.critics[0], before)
    out = train_iteration(agent, filled_buffer(100), rng)
    assert out["updated"] and np.isfinite(out["critic_loss"])
    assert np.any(agent.critics[0] != before)


def test_dyna_loss_is_non_negative():
    agent, buf, rng = make_agent("dyna"), filled_buffer(), make_rng(5)
    for _ in range(10):
        assert agent.dyna_critic_update(buf, rng)["critic_loss"] >= 0.0


@pytest.mark.parametrize("similarity", ["dot", "cosine"])
def test_fused_taylor_gradient_matches_graph(similarity):
    agent, buf = make_agent("tatd3", similarity=similarity, lambda_a=0.25, lambda_s=0.05), filled_buffer()
    rng = make_rng(6)
    S = buf.s[:8]
    A = agent.actor_target(S)
    member = 1
    members = np.full(len(S), member)
    noise = rng.standard_normal((len(S), agent.obs_dim))
    y, dy_s, dy_a = agent.target_values(S, A, members, noise, need_grad=True)
    X = np.concatenate([S, A], axis=1)
    net = agent.critic_net
    boot = [T.frozen(T.MlpCritic(net, agent.critic_targets[k])) for k in range(2)]
    model = T.learned_model(agent.ensemble, agent.reward_model, member, noise)
    actor = T.mlp_actor(agent.actor.net, agent.actor_target.theta, agent.bound)
    cfg = T.ExpansionConfig(lambda_a=0.25, lambda_s=0.05, similarity=similarity, gamma=agent.cfg.gamma)
    for k in range(2):
        fused, _ = agent._taylor_gradient(k, X, y, np.concatenate([dy_s, dy_a], axis=1))
        crit = T.MlpCritic(net, agent.critics[k])
        graph = crit.flat(ad.grad(T.taylor_critic_loss(crit, model, actor, S, A, cfg, boot), crit.params))
        assert rel_err(fused, graph) < 1e-8


def test_expected_update_matches_graph_replay():
    agent, buf = make_agent("expected", n_members=1, lambda_a=0.2, lambda_s=0.01), filled_buffer()
    rng = make_rng(7)
    replay = copy.deepcopy(rng)
    captured = capture_grads(agent)
    agent.expected_critic_update(buf, rng)
    # replay the draws by hand
    cfg = agent.cfg
    B, n_s, n_a = cfg.expected_batch_size, cfg.n_state_perturb, cfg.n_action_perturb
    idx = buf.sample_indices(B, replay)
    mu_s = buf.s[idx]
    mu_a = agent.actor_target(mu_s)
    d_s = np.sqrt(cfg.lambda_s) * replay.standard_normal((B, n_s, agent.obs_dim))
    d_a = np.sqrt(cfg.lambda_a) * replay.standard_normal((B, n_a, agent.act_dim))
    S = np.array([mu_s[b] + d_s[b, i] for b in range(B) for i in range(n_s) for _ in range(n_a)])
    A = np.array([mu_a[b] + d_a[b, j] for b in range(B) for _ in range(n_s) for j in range(n_a)])
    replay.integers(1, size=len(S))
    noise = replay.standard_normal((len(S), agent.obs_dim))
    net = agent.critic_net
    boot = [T.frozen(T.MlpCritic(net, agent.critic_targets[k])) for k in range(2)]
    model = T.learned_model(agent.ensemble, agent.reward_model, 0, noise)
    actor = T.mlp_actor(agent.actor.net, agent.actor_target.theta, agent.bound)
    for k in range(2):
        crit = T.MlpCritic(net, agent.critics[k])
        ref = crit.flat(ad.grad(T.semi_gradient_loss(crit, model, actor, S, A, cfg.gamma, boot), crit.params))
        assert rel_err(captured[0][k], ref) < 1e-10


def test_expected_update_without_noise_is_replicated_semi_gradient():
    agent = make_agent("expected", n_members=1, lambda_a=0.0, lambda_s=0.0, n_state_perturb=2, n_action_perturb=3)
    buf = filled_buffer()
    captured = capture_grads(agent)
    out = agent.expected_critic_update(buf, make_rng(8))
    assert np.isfinite(out["critic_loss"]) and out["critic_loss"] >= 0
    assert all(np.all(np.isfinite(g)) for g in captured[0])


def test_twin_target_takes_minimum():
    agent, buf = make_agent("dyna"), filled_buffer()
    S = buf.s[:32]
    A = agent.actor_target(S)
    noise = make_rng(9).standard_normal((32, agent.obs_dim))
    y, _, _ = agent.target_values(S, A, np.zeros(32, dtype=int), noise, need_grad=False)
    r = agent.reward_model.predict(S, A)
    s_next, _ = agent.ensemble.sample(S, A, np.zeros(32, dtype=int), noise)
    Xn = np.concatenate([s_next, agent.actor_target(s_next)], axis=1)
    q = [agent.critic_net.forward(agent.critic_targets[k], Xn)[:, 0] for k in range(2)]
    assert_allclose(y, r + agent.cfg.gamma * np.minimum(*q), rtol=1e-14)


# ---------------------------------------------------------------------------
# actor


def test_actor_gradient_matches_finite_differences():
    agent, buf = make_agent("tatd3"), filled_buffer()
    S = buf.s[:16]
    seen = []
    agent.actor_opt.step = lambda theta, g: seen.append(g.copy())
    agent.actor_update(S)
    theta0 = agent.actor.theta.copy()

    def objective(theta):
        A = agent.bound * np.tanh(agent.actor.net.forward(theta, S))
        return -float(np.mean(agent.critic_net.forward(agent.critics[0], np.concatenate([S, A], axis=1))))

    assert rel_err(seen[0], ad.finite_difference_gradient(objective, theta0)) < 1e-6


def test_actor_unchanged_under_constant_critic():
    agent, buf = make_agent("tatd3"), filled_buffer()
    n_out = agent.critic_net.sizes[-2] + 1
    agent.critics[0][-n_out:-1] = 0.0  # last-layer weights zero, so Q is constant
    before = agent.actor.theta.copy()
    agent.actor_update(buf.s[:16])
    assert_array_equal(agent.actor.theta, before)


def test_actor_ascends_critic():
    agent, buf = make_agent("tatd3", lr_actor=1e-3), filled_buffer()
    S = buf.s[:64]

    def q_of_policy():
        X = np.concatenate([S, agent.actor(S)], axis=1)
        return float(np.mean(agent.critic_net.forward(agent.critics[0], X)))

    start = q_of_policy()
    for _ in range(50):
        agent.actor_update(S)
    assert q_of_policy() > start


# ---------------------------------------------------------------------------
# full runs


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        make_agent("sac")


def test_training_run_is_reproducible():
    cfg = small_cfg(total_steps=150, warmup_steps=60, eval_interval=75, dyna_updates=1)
    a = train_agent("tatd3", Pendulum(), cfg, 3)
    b = train_agent("tatd3", Pendulum(), cfg, 3)
    assert_array_equal(a["step"], [0, 75, 150])
    for key in ("eval_return", "critic_loss", "model_nll"):
        assert_array_equal(a[key], b[key])
    for key, value in a["agent"].parameters().items():
        assert_array_equal(value, b["agent"].parameters()[key])
    c = train_agent("tatd3", Pendulum(), cfg, 4)
    assert not np.array_equal(a["eval_return"], c["eval_return"])


def test_random_policy_return_is_deterministic_and_negative():
    r1 = random_policy_return(Pendulum(), 3, 0)
    assert r1 == random_policy_return(Pendulum(), 3, 0)
    assert r1 < 0
