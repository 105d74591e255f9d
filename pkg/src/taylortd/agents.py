"""TD3-style agents that learn critics from imagined one-step transitions.

Three critic updates share everything else (buffer, model, actor, targets):

* ``tatd3``: the Taylor-expanded update. For each critic the loss is
  ``-sg(delta) Q - lambda_a sim(d_a Q, sg(d_a delta)) - lambda_s sim(d_s Q, sg(d_s delta))``.
* ``dyna``: squared TD error on one imagined transition per sampled state,
  with the action drawn around the target policy.
* ``expected``: squared TD error averaged over a grid of state and action
  perturbations of each sampled state.

All gradients are computed with the fused kernels in :mod:`taylortd.kernels`.
The input gradients of the TD error are propagated by hand through the
reward model, the sampled model transition, the target actor and the
minimizing target critic. :mod:`taylortd.taylor` holds the graph version
that these are tested against.
"""

from __future__ import annotations

import numpy as np

from .buffer import ReplayBuffer
from .config import AgentConfig
from .dynamics import GaussianDynamicsEnsemble, RewardModel, train_models
from .nets import MLP, Adam, soft_update
from .rng import split
from .taylor import COSINE_EPS

AGENT_KINDS = ("tatd3", "dyna", "expected")


class Actor:
    """Deterministic policy ``bound * tanh(MLP(s))`` on a flat parameter vector."""

    def __init__(self, net: MLP, theta, bound: float):
        self.net, self.theta, self.bound = net, theta, float(bound)

    def __call__(self, S):
        return self.bound * np.tanh(self.net.forward(self.theta, S))

    def act_and_cache(self, S):
        H = np.tanh(self.net.forward(self.theta, S))
        return self.bound * H, H

    def vjp(self, S, H, adj):
        """Pull ``adj`` (on actions) back to ``(dS, dtheta)``."""
        _, dS, dtheta = self.net.vjp(self.theta, S, adj * self.bound * (1.0 - H * H))
        return dS, dtheta


def behavioural_action(actor, s, sigma, bound, rng):
    """``clip(pi(s) + sigma * eps, -bound, bound)`` for one state or a batch."""
    if sigma < 0:
        raise ValueError("exploration noise must be non-negative")
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = actor(S)
    a = np.clip(a + sigma * rng.standard_normal(a.shape), -bound, bound)
    return a[0] if np.ndim(s) == 1 else a


class Agent:
    """Twin critics, target networks, deterministic actor and a learned model."""

    def __init__(self, kind: str, obs_dim: int, act_dim: int, action_bound: float, cfg: AgentConfig, rng):
        if kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {kind!r}; choose from {AGENT_KINDS}")
        self.kind, self.cfg = kind, cfg
        self.obs_dim, self.act_dim, self.bound = obs_dim, act_dim, float(action_bound)
        actor_net = MLP((obs_dim, *cfg.actor_hidden, act_dim))
        self.actor = Actor(actor_net, actor_net.init(rng), action_bound)
        self.actor_target = Actor(actor_net, self.actor.theta.copy(), action_bound)
        self.critic_net = MLP((obs_dim + act_dim, *cfg.critic_hidden, 1))
        self.critics = [self.critic_net.init(rng) for _ in range(2)]
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = Adam(actor_net.n_params, cfg.lr_actor)
        self.critic_opts = [Adam(self.critic_net.n_params, cfg.lr_critic) for _ in range(2)]
        self.ensemble = GaussianDynamicsEnsemble(obs_dim, act_dim, rng, cfg.model_hidden, cfg.n_members,
                                                 cfg.lr_model)
        self.reward_model = RewardModel(obs_dim, act_dim, rng, cfg.reward_hidden, cfg.lr_model,
                                        normalize=cfg.reward_normalize)
        self.critic_updates = 0

    # ------------------------------------------------------------------
    # imagined TD targets

    def _draw_members(self, n, rng):
        if self.cfg.member_selection == "per_batch":
            return np.full(n, rng.integers(self.cfg.n_members))
        return rng.integers(self.cfg.n_members, size=n)

    def target_values(self, S, A, members, noise, need_grad: bool):
        """``y = r_hat + gamma min_k Q'_k(s', pi'(s'))`` and optionally ``(dy/ds, dy/da)``."""
        gamma = self.cfg.gamma
        r_hat = self.reward_model.predict(S, A)
        s_next, cache = self.ensemble.sample(S, A, members, noise)
        a_next, H = self.actor_target.act_and_cache(s_next)
        X_next = np.concatenate([s_next, a_next], axis=1)
        q1 = self.critic_net.forward(self.critic_targets[0], X_next)[:, 0]
        q2 = self.critic_net.forward(self.critic_targets[1], X_next)[:, 0]
        first = q1 <= q2
        y = r_hat + gamma * np.where(first, q1, q2)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("non-finite imagined TD target (model unfit?)")
        if not need_grad:
            return y, None, None
        g = np.zeros_like(X_next)
        for k, rows in enumerate((first, ~first)):
            if rows.any():
                _, gX, _ = self.critic_net.vjp(self.critic_targets[k], X_next[rows],
                                               np.full((rows.sum(), 1), gamma))
                g[rows] = gX
        dS_actor, _ = self.actor_target.vjp(s_next, H, g[:, self.obs_dim:])
        d_s, d_a = self.ensemble.sample_vjp(cache, g[:, :self.obs_dim] + dS_actor)
        _, r_s, r_a = self.reward_model.vjp(S, A, np.ones(len(S)))
        return y, d_s + r_s, d_a + r_a

    # ------------------------------------------------------------------
    # critic gradients

    def _semi_gradient(self, k, X, y):
        """Gradient of ``mean(0.5 delta^2)`` with the target held fixed, and the loss."""
        q = self.critic_net.forward(self.critics[k], X)[:, 0]
        delta = y - q
        _, _, g = self.critic_net.vjp(self.critics[k], X, (-delta / len(y)).reshape(-1, 1))
        return g, float(np.mean(0.5 * delta * delta))

    def _taylor_gradient(self, k, X, y, dy):
        cfg = self.cfg
        lam_a = cfg.lambda_a if cfg.action_expansion else 0.0
        lam_s = cfg.lambda_s if cfg.state_expansion else 0.0
        q, dq = self.critic_net.input_grad(self.critics[k], X)
        delta = y - q
        d_delta = dy - dq
        U = np.zeros_like(X)
        B = len(y)
        ds = self.obs_dim
        for lam, cols in ((lam_s, slice(0, ds)), (lam_a, slice(ds, None))):
            if lam == 0.0:
                continue
            if cfg.similarity == "dot":
                coef = np.full(B, lam)
            else:
                norms = np.linalg.norm(dq[:, cols], axis=1) * np.linalg.norm(d_delta[:, cols], axis=1)
                coef = lam / np.maximum(norms, COSINE_EPS)
            U[:, cols] = coef[:, None] * d_delta[:, cols]
        _, g = self.critic_net.value_tangent_grad(self.critics[k], X, -delta / B, -U / B)
        return g, float(np.mean(0.5 * delta * delta))

    def _apply_critic_grads(self, grads):
        for k in range(2):
            self.critic_opts[k].step(self.critics[k], grads[k])
        self.critic_updates += 1

    # ------------------------------------------------------------------
    # the three critic updates

    def _draw_common(self, buffer, batch, rng):
        idx = buffer.sample_indices(batch, rng)
        members = self._draw_members(batch, rng)
        noise = rng.standard_normal((batch, self.obs_dim))
        action_noise = rng.standard_normal((batch, self.act_dim))
        return buffer.s[idx], members, noise, action_noise

    def taylor_critic_update(self, buffer, rng) -> dict:
        cfg = self.cfg
        S, members, noise, _ = self._draw_common(buffer, cfg.batch_size, rng)
        A = self.actor_target(S)
        X = np.concatenate([S, A], axis=1)
        expand = (cfg.action_expansion and cfg.lambda_a > 0) or (cfg.state_expansion and cfg.lambda_s > 0)
        if not expand:
            y, _, _ = self.target_values(S, A, members, noise, need_grad=False)
            out = [self._semi_gradient(k, X, y) for k in range(2)]
        else:
            y, dy_s, dy_a = self.target_values(S, A, members, noise, need_grad=True)
            dy = np.concatenate([dy_s, dy_a], axis=1)
            out = [self._taylor_gradient(k, X, y, dy) for k in range(2)]
        self._apply_critic_grads([g for g, _ in out])
        return {"critic_loss": 0.5 * (out[0][1] + out[1][1])}

    def dyna_critic_update(self, buffer, rng) -> dict:
        cfg = self.cfg
        S, members, noise, action_noise = self._draw_common(buffer, cfg.batch_size, rng)
        sigma = cfg.explore_noise * self.bound if cfg.dyna_noise == "explore" else np.sqrt(cfg.lambda_a)
        A = np.clip(self.actor_target(S) + sigma * action_noise, -self.bound, self.bound)
        X = np.concatenate([S, A], axis=1)
        y, _, _ = self.target_values(S, A, members, noise, need_grad=False)
        out = [self._semi_gradient(k, X, y) for k in range(2)]
        self._apply_critic_grads([g for g, _ in out])
        return {"critic_loss": 0.5 * (out[0][1] + out[1][1])}

    def expected_critic_update(self, buffer, rng) -> dict:
        """TD error averaged over ``n_state_perturb x n_action_perturb`` perturbations per state."""
        cfg = self.cfg
        B, n_s, n_a = min(cfg.expected_batch_size, len(buffer)), cfg.n_state_perturb, cfg.n_action_perturb
        idx = buffer.sample_indices(B, rng)
        mu_s = buffer.s[idx]
        mu_a = self.actor_target(mu_s)
        d_s = np.sqrt(cfg.lambda_s) * rng.standard_normal((B, n_s, self.obs_dim))
        d_a = np.sqrt(cfg.lambda_a) * rng.standard_normal((B, n_a, self.act_dim))
        S = np.broadcast_to((mu_s[:, None, :] + d_s)[:, :, None, :], (B, n_s, n_a, self.obs_dim))
        A = np.broadcast_to((mu_a[:, None, :] + d_a)[:, None, :, :], (B, n_s, n_a, self.act_dim))
        S = S.reshape(-1, self.obs_dim)
        A = A.reshape(-1, self.act_dim)
        n = len(S)
        members = self._draw_members(n, rng)
        noise = rng.standard_normal((n, self.obs_dim))
        X = np.concatenate([S, A], axis=1)
        y, _, _ = self.target_values(S, A, members, noise, need_grad=False)
        out = [self._semi_gradient(k, X, y) for k in range(2)]
        self._apply_critic_grads([g for g, _ in out])
        return {"critic_loss": 0.5 * (out[0][1] + out[1][1])}

    def critic_update(self, buffer, rng) -> dict:
        if self.kind == "tatd3":
            return self.taylor_critic_update(buffer, rng)
        if self.kind == "dyna":
            return self.dyna_critic_update(buffer, rng)
        return self.expected_critic_update(buffer, rng)

    # ------------------------------------------------------------------
    # actor and targets

    def actor_update(self, states) -> dict:
        """One ascent step on ``mean Q_1(s, pi(s))`` over real buffer states."""
        S = np.asarray(states, dtype=np.float64)
        A, H = self.actor.act_and_cache(S)
        q, dX = self.critic_net.input_grad(self.critics[0], np.concatenate([S, A], axis=1))
        _, g = self.actor.vjp(S, H, -dX[:, self.obs_dim:] / len(S))
        self.actor_opt.step(self.actor.theta, g)
        return {"actor_objective": float(np.mean(q))}

    def update_targets(self):
        tau = self.cfg.tau
        soft_update(self.actor_target.theta, self.actor.theta, tau)
        for k in range(2):
            soft_update(self.critic_targets[k], self.critics[k], tau)

    def act(self, s, rng, explore=True):
        sigma = self.cfg.explore_noise * self.bound if explore else 0.0
        if not explore:
            return self.actor(np.atleast_2d(s))[0]
        return behavioural_action(self.actor, s, sigma, self.bound, rng)

    def parameters(self) -> dict:
        """Named flat parameter vectors (for checkpoints and trajectory comparisons)."""
        out = {"actor": self.actor.theta, "actor_target": self.actor_target.theta}
        for k in range(2):
            out[f"critic{k + 1}"] = self.critics[k]
            out[f"critic{k + 1}_target"] = self.critic_targets[k]
        for k, th in enumerate(self.ensemble.thetas):
            out[f"model{k}"] = th
        out["reward"] = self.reward_model.theta
        return out


def tatd3_train_iteration(agent: Agent, buffer: ReplayBuffer, rng) -> dict:
    """``dyna_updates`` critic updates with delayed actor and target updates."""
    return _train_iteration(agent, buffer, rng, agent.taylor_critic_update)


def dyna_td3_critic_update(agent: Agent, buffer: ReplayBuffer, rng) -> dict:
    return agent.dyna_critic_update(buffer, rng)


def sample_based_expected_critic_update(agent: Agent, buffer: ReplayBuffer, rng) -> dict:
    return agent.expected_critic_update(buffer, rng)


def actor_update(agent: Agent, states) -> dict:
    return agent.actor_update(states)


def train_iteration(agent: Agent, buffer: ReplayBuffer, rng) -> dict:
    return _train_iteration(agent, buffer, rng, agent.critic_update)


def _train_iteration(agent, buffer, rng, critic_update):
    cfg = agent.cfg
    if len(buffer) < max(cfg.warmup_steps, 1):
        return {"critic_loss": float("nan"), "updated": False}
    losses = []
    for _ in range(cfg.dyna_updates):
        losses.append(critic_update(buffer, rng)["critic_loss"])
        if agent.critic_updates % cfg.policy_delay == 0:
            states = buffer.s[buffer.sample_indices(min(cfg.batch_size, len(buffer)), rng)]
            agent.actor_update(states)
            agent.update_targets()
    return {"critic_loss": float(np.mean(losses)) if losses else float("nan"), "updated": True}


# ----------------------------------------------------------------------
# full training run


def evaluate(agent: Agent, env, episodes: int, rng) -> float:
    """Mean undiscounted return of the deterministic policy over ``episodes`` episodes."""
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        for _ in range(env.episode_steps):
            a = agent.act(env.observe(state), rng, explore=False)
            state, r, done = env.step(state, a, rng)
            total += r
            if done:
                break
    return total / episodes


def random_policy_return(env, episodes: int, seed) -> float:
    """Mean return of uniformly random actions (the reference level for learning)."""
    rng = split(seed, 1)[0]
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        for _ in range(env.episode_steps):
            a = rng.uniform(-env.action_bound, env.action_bound, size=env.act_dim)
            state, r, done = env.step(state, a, rng)
            total += r
            if done:
                break
    return total / episodes


def train_agent(kind: str, env, cfg: AgentConfig, seed, progress=None) -> dict:
    """Run the full online protocol and return the learning curve.

    Returns ``{"step", "eval_return", "critic_loss", "model_nll"}`` arrays with
    one entry per evaluation (including step 0), plus the trained agent.
    """
    init_rng, act_rng, update_rng, eval_rng = split(seed, 4)
    agent = Agent(kind, env.obs_dim, env.act_dim, env.action_bound, cfg, init_rng)
    buffer = ReplayBuffer(min(cfg.buffer_capacity, cfg.total_steps), env.obs_dim, env.act_dim)
    curve = {"step": [], "eval_return": [], "critic_loss": [], "model_nll": []}
    recent_loss, recent_nll = [], []

    def record(step):
        curve["step"].append(step)
        curve["eval_return"].append(evaluate(agent, env, cfg.eval_episodes, eval_rng))
        curve["critic_loss"].append(float(np.mean(recent_loss)) if recent_loss else float("nan"))
        curve["model_nll"].append(float(np.mean(recent_nll)) if recent_nll else float("nan"))
        recent_loss.clear()
        recent_nll.clear()
        if progress is not None:
            progress(kind, seed, step, curve["eval_return"][-1])

    record(0)
    state = env.reset(act_rng)
    t_episode = 0
    for step in range(1, cfg.total_steps + 1):
        obs = env.observe(state)
        if step <= cfg.warmup_steps:
            a = act_rng.uniform(-env.action_bound, env.action_bound, size=env.act_dim)
        else:
            a = agent.act(obs, act_rng)
        state, r, done = env.step(state, a, act_rng)
        buffer.add(obs, a, r, env.observe(state), done)
        t_episode += 1
        if done or t_episode >= env.episode_steps:
            state, t_episode = env.reset(act_rng), 0
        if len(buffer) >= max(cfg.warmup_steps, 1):
            n_model = cfg.model_updates_per_step
            if len(buffer) == max(cfg.warmup_steps, 1):
                n_model += cfg.model_pretrain_steps
            if n_model:
                trace = train_models(agent.ensemble, agent.reward_model, buffer, n_model,
                                     cfg.model_batch_size, update_rng)
                recent_nll.append(float(trace["nll"][-1].mean()))
            it = train_iteration(agent, buffer, update_rng)
            if it["updated"]:
                recent_loss.append(it["critic_loss"])
        if step % cfg.eval_interval == 0:
            record(step)
    return {**{k: np.asarray(v) for k, v in curve.items()}, "agent": agent}
