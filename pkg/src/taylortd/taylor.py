"""Taylor-expanded TD updates on the autodiff graph.

This is the reference implementation: every quantity is built as a graph so
it can be checked against finite differences and against brute-force
expectations. The training agents use fused kernels that are tested against
these functions.

Conventions
-----------
A *critic* is a callable ``(s, a) -> Node`` of shape ``(B,)`` with a
``params`` list of graph leaves. A *model* is a callable
``(s, a) -> (r_hat, s_next)``. The target actor and bootstrap critics are
callables whose parameters are constants. ``mu_s`` has shape ``(B, d_s)`` and
``mu_a`` shape ``(B, d_a)``; per-row quantities are averaged over rows, so
every returned update is the batch mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ExpansionConfig:
    lambda_a: float = 0.25
    lambda_s: float = 1e-5
    action_expansion: bool = True
    state_expansion: bool = True
    similarity: str = "cosine"
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("lambda_a", "lambda_s"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"similarity must be 'cosine' or 'dot', got {self.similarity!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def effective_lambda_a(self) -> float:
        return self.lambda_a if self.action_expansion else 0.0

    @property
    def effective_lambda_s(self) -> float:
        return self.lambda_s if self.state_expansion else 0.0


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic Gaussian perturbations with per-dimension variances ``lambda_a``, ``lambda_s``."""

    lambda_a: float
    lambda_s: float = 0.0
    n_samples: int = 100_000

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_s < 0:
            raise ValueError("noise variances must be non-negative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def draw(self, rng, n, d_s, d_a):
        """``(delta_s, delta_a)`` of shapes ``(n, d_s)`` and ``(n, d_a)``."""
        ds = np.sqrt(self.lambda_s) * rng.standard_normal((n, d_s))
        da = np.sqrt(self.lambda_a) * rng.standard_normal((n, d_a))
        return ds, da


# ---------------------------------------------------------------------------
# graph callables for the learners and the model


class MlpCritic:
    """``Q(s, a) = MLP([s, a])`` with the parameters as graph leaves."""

    def __init__(self, net, theta):
        self.net = net
        self.graph = net.to_graph(theta)
        self.params = self.graph.nodes()

    def __call__(self, s, a):
        return ad.mlp_forward(self.graph, ad.concat([ad.const(s), ad.const(a)], axis=-1))[:, 0]

    def flat(self, grads) -> np.ndarray:
        return self.net.flatten_grads(grads)


class LinearCritic:
    """``Q(s, a) = x(s, a) . theta`` for a graph feature map ``x``."""

    def __init__(self, features, theta):
        self.features = features
        self.theta = ad.param(np.asarray(theta, dtype=np.float64))
        self.params = [self.theta]

    def __call__(self, s, a):
        return ad.sum(self.features(ad.const(s), ad.const(a)) * self.theta, axis=-1)

    def flat(self, grads) -> np.ndarray:
        return np.asarray(grads[0]).reshape(-1)


def frozen(critic):
    """A copy of ``critic`` whose parameters are constants (for bootstrap targets)."""
    if isinstance(critic, LinearCritic):
        theta = critic.theta.value.copy()
        return lambda s, a: ad.sum(critic.features(ad.const(s), ad.const(a)) * theta, axis=-1)
    if isinstance(critic, MlpCritic):
        graph = ad.MlpParams([ad.const(w.value) for w in critic.graph.weights],
                             [ad.const(b.value) for b in critic.graph.biases],
                             list(critic.graph.activations))
        return lambda s, a: ad.mlp_forward(graph, ad.concat([ad.const(s), ad.const(a)], axis=-1))[:, 0]
    raise TypeError(f"cannot freeze {type(critic).__name__}")


def affine_features(s, a):
    """``[s, a, 1]``: Q is affine in both the state and the action."""
    ones = ad.const(np.ones((s.shape[0], 1)))
    return ad.concat([s, a, ones], axis=-1)


def _pair_selector(d):
    iu = np.triu_indices(d)
    P = np.zeros((d * d, len(iu[0])))
    P[iu[0] * d + iu[1], np.arange(len(iu[0]))] = 1.0
    return P


def quadratic_features(s, a):
    """Upper-triangular products of ``z = [s, a]``, then ``z`` and a constant."""
    z = ad.concat([s, a], axis=-1)
    B, d = z.shape
    outer = ad.reshape(ad.reshape(z, (B, d, 1)) * ad.reshape(z, (B, 1, d)), (B, d * d))
    return ad.concat([outer @ _pair_selector(d), z, ad.const(np.ones((B, 1)))], axis=-1)


def n_quadratic_features(d: int) -> int:
    return d * (d + 1) // 2 + d + 1


def mlp_actor(net, theta, bound):
    """Deterministic target policy ``bound * tanh(MLP(s))`` with constant parameters."""
    graph = net.to_graph(theta)
    graph = ad.MlpParams([ad.const(w.value) for w in graph.weights],
                         [ad.const(b.value) for b in graph.biases], list(graph.activations))
    return lambda s: bound * ad.tanh(ad.mlp_forward(graph, s))


def linear_actor(K):
    """``pi(s) = s K^T``."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    return lambda s: ad.const(s) @ K.T


def lq_model(spec):
    """The exact noise-free LQ transition as a model callable."""
    from .envs import lq_step

    def model(s, a):
        s_next, r = lq_step(ad.const(s), ad.const(a), spec)
        return r, s_next

    return model


def learned_model(ensemble, reward_model, member: int, noise):
    """One ensemble member with fixed per-row noise (tiled when rows are replicated)."""
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))

    def model(s, a):
        s, a = ad.const(s), ad.const(a)
        reps = s.shape[0] // noise.shape[0]
        eps = np.tile(noise, (reps, 1))
        return reward_model.graph_predict(s, a), ensemble.graph_sample(member, s, a, eps)

    return model


def _minimum(x, y):
    # ties resolve to x, matching np.where(q1 <= q2, q1, q2)
    return -ad.maximum(-x, -y)


# ---------------------------------------------------------------------------
# TD error and its input gradients


def td_target(model_prediction, target_actor, gamma, bootstrap_critics):
    """``y = r_hat + gamma * min_k Q'_k(s', pi'(s'))``."""
    r_hat, s_next = model_prediction
    a_next = target_actor(s_next)
    if callable(bootstrap_critics):
        bootstrap_critics = [bootstrap_critics]
    q_next = bootstrap_critics[0](s_next, a_next)
    for q in bootstrap_critics[1:]:
        q_next = _minimum(q_next, q(s_next, a_next))
    r_hat = ad.const(r_hat)
    if r_hat.shape != q_next.shape:
        raise ad.ShapeError(f"td_delta: reward shape {r_hat.shape} != bootstrap shape {q_next.shape}")
    return r_hat + gamma * q_next


def td_delta(critic, model_prediction, target_actor, mu_s, mu_a, gamma, bootstrap_critics=None):
    """Per-row TD error ``y - Q(mu_s, mu_a)``; bootstraps with ``critic`` when no targets are given."""
    q = critic(mu_s, mu_a)
    y = td_target(model_prediction, target_actor, gamma,
                  critic if bootstrap_critics is None else bootstrap_critics)
    if q.shape != y.shape:
        raise ad.ShapeError(f"td_delta: value shape {q.shape} != target shape {y.shape}")
    return y - q


def td_delta_input_gradients(delta, mu_s, mu_a):
    """``(d delta / d s, d delta / d a)`` per row, as differentiable nodes."""
    gs, ga = ad.grad(ad.sum(delta), [mu_s, mu_a], create_graph=True)
    return gs, ga


def _leaves(mu_s, mu_a):
    return ad.param(np.asarray(ad.const(mu_s).value, dtype=np.float64)), \
        ad.param(np.asarray(ad.const(mu_a).value, dtype=np.float64))


def delta_and_input_gradients(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics=None):
    """Numeric ``(delta, d_s delta, d_a delta)`` at ``(mu_s, mu_a)``."""
    S, A = _leaves(mu_s, mu_a)
    delta = td_delta(critic, model(S, A), target_actor, S, A, gamma, bootstrap_critics)
    gs, ga = ad.grad(ad.sum(delta), [S, A])
    return delta.value.copy(), gs, ga


# ---------------------------------------------------------------------------
# losses and updates


def semi_gradient_loss(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics=None):
    """``-mean(stopgrad(delta) * Q)``: its gradient is minus the plain TD update."""
    delta, _, _ = delta_and_input_gradients(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics)
    return -ad.mean(ad.stopgrad(delta) * critic(ad.const(mu_s), ad.const(mu_a)))


def _similarity(u, v_value, similarity):
    """Rowwise ``u . v`` with ``v`` constant, normalized by a constant denominator in cosine mode."""
    dot = ad.sum(u * v_value, axis=-1)
    if similarity == "dot":
        return dot
    denom = np.maximum(np.linalg.norm(u.value, axis=-1) * np.linalg.norm(v_value, axis=-1), COSINE_EPS)
    return dot / denom


def taylor_critic_loss(critic, model, target_actor, mu_s, mu_a, cfg: ExpansionConfig, bootstrap_critics=None):
    """Scalar loss whose negative gradient is the Taylor TD update direction.

    ``-sg(delta) Q - lambda_a sim(d_a Q, sg(d_a delta)) - lambda_s sim(d_s Q, sg(d_s delta))``,
    averaged over rows, where ``sim`` is either the plain inner product or the
    cosine with a stop-gradient denominator.
    """
    lam_a, lam_s = cfg.effective_lambda_a, cfg.effective_lambda_s
    if lam_a == 0.0 and lam_s == 0.0:
        return semi_gradient_loss(critic, model, target_actor, mu_s, mu_a, cfg.gamma, bootstrap_critics)
    delta, d_s, d_a = delta_and_input_gradients(critic, model, target_actor, mu_s, mu_a, cfg.gamma,
                                                bootstrap_critics)
    S, A = _leaves(mu_s, mu_a)
    q = critic(S, A)
    q_s, q_a = ad.grad(ad.sum(q), [S, A], create_graph=True)
    per_row = -ad.stopgrad(delta) * q
    if lam_a:
        per_row = per_row - lam_a * _similarity(q_a, d_a, cfg.similarity)
    if lam_s:
        per_row = per_row - lam_s * _similarity(q_s, d_s, cfg.similarity)
    return ad.mean(per_row)


def taylor_update_analytic(critic, model, target_actor, mu_s, mu_a, cfg: ExpansionConfig,
                           bootstrap_critics=None) -> list:
    """``delta dQ/dtheta + lambda_a H_{theta a} d_a delta + lambda_s H_{theta s} d_s delta`` (row mean).

    The mixed second derivatives are materialized one input coordinate and
    row at a time and only then contracted with the TD-error gradients.
    """
    delta, d_s, d_a = delta_and_input_gradients(critic, model, target_actor, mu_s, mu_a, cfg.gamma,
                                                bootstrap_critics)
    S, A = _leaves(mu_s, mu_a)
    q = critic(S, A)
    B = q.shape[0]
    update = [np.zeros_like(p.value) for p in critic.params]
    for i in range(B):
        g = ad.grad(q[i], critic.params)
        for k in range(len(update)):
            update[k] += delta[i] * g[k] / B
    terms = [(cfg.effective_lambda_a, A, d_a), (cfg.effective_lambda_s, S, d_s)]
    for lam, X, d_x in terms:
        if lam == 0.0:
            continue
        gx = ad.grad(ad.sum(q), [X], create_graph=True)[0]
        for i in range(B):
            for j in range(X.shape[1]):
                h = ad.grad(gx[i, j], critic.params)
                for k in range(len(update)):
                    update[k] += lam * d_x[i, j] * h[k] / B
    return update


def _weighted_td_update(critic, model, target_actor, S, A, weights, gamma, bootstrap_critics):
    """``sum_r w_r delta_r dQ_r/dtheta`` over stacked rows."""
    with ad.no_grad():
        delta = td_delta(critic, model(S, A), target_actor, S, A, gamma, bootstrap_critics).value
    q = critic(ad.const(S), ad.const(A))
    return ad.grad(ad.sum(q * (weights * delta)), critic.params)


def td_update(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics=None) -> list:
    """Plain TD update ``mean_r delta_r dQ_r/dtheta`` at the given points."""
    B = np.shape(ad.const(mu_s).value)[0]
    return _weighted_td_update(critic, model, target_actor, np.asarray(mu_s, float), np.asarray(mu_a, float),
                               np.full(B, 1.0 / B), gamma, bootstrap_critics)


def expected_update_mc_oracle(critic, model, target_actor, mu_s, mu_a, noise: NoiseSpec, gamma, rng,
                              bootstrap_critics=None, antithetic=True, chunk=1000):
    """Monte-Carlo estimate of ``E[delta dQ/dtheta]`` under Gaussian input perturbations.

    Returns ``(mean, stderr)`` as lists of parameter-shaped arrays. Standard
    errors come from the spread of per-chunk means. With ``antithetic`` each
    draw is paired with its negation, which leaves the estimator unbiased.
    """
    mu_s = np.asarray(ad.const(mu_s).value, dtype=np.float64)
    mu_a = np.asarray(ad.const(mu_a).value, dtype=np.float64)
    B, d_s = mu_s.shape
    d_a = mu_a.shape[1]
    n = noise.n_samples
    if noise.lambda_a == 0.0 and noise.lambda_s == 0.0:
        u = td_update(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics)
        return u, [np.zeros_like(x) for x in u]
    chunk = max(2, min(chunk, n))
    chunk -= chunk % 2 if antithetic else 0
    chunk_means = []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        if antithetic:
            half = (m + 1) // 2
            ds, da = noise.draw(rng, half, d_s, d_a)
            ds, da = np.concatenate([ds, -ds])[:m], np.concatenate([da, -da])[:m]
        else:
            ds, da = noise.draw(rng, m, d_s, d_a)
        S = (mu_s[None, :, :] + ds[:, None, :]).reshape(m * B, d_s)
        A = (mu_a[None, :, :] + da[:, None, :]).reshape(m * B, d_a)
        u = _weighted_td_update(critic, model, target_actor, S, A, np.full(m * B, 1.0 / (m * B)), gamma,
                                bootstrap_critics)
        chunk_means.append((m, critic.flat(u)))
        done += m
    weights = np.array([m for m, _ in chunk_means], dtype=float)
    values = np.stack([v for _, v in chunk_means])
    mean = weights @ values / weights.sum()
    if len(values) > 1:
        se = np.sqrt(np.sum(weights[:, None] * (values - mean) ** 2, axis=0) / weights.sum() / (len(values) - 1))
    else:
        se = np.full_like(mean, np.inf)
    return _unflat(mean, critic.params), _unflat(se, critic.params)


def expected_update_quadrature(critic, model, target_actor, mu_s, mu_a, noise: NoiseSpec, gamma,
                               bootstrap_critics=None, rule="sigma", order=5) -> list:
    """Deterministic quadrature for ``E[delta dQ/dtheta]`` under Gaussian perturbations.

    ``rule="sigma"`` uses the ``2n`` symmetric points ``+-sqrt(n lambda_k) e_k``
    with equal weights, which is exact whenever the integrand is a polynomial
    of degree at most three in the perturbation (e.g. products of two affine
    functions). ``rule="gauss-hermite"`` uses a tensor-product rule with
    ``order`` nodes per perturbed dimension, exact up to degree ``2 order - 1``.
    """
    mu_s = np.asarray(ad.const(mu_s).value, dtype=np.float64)
    mu_a = np.asarray(ad.const(mu_a).value, dtype=np.float64)
    B, d_s = mu_s.shape
    d_a = mu_a.shape[1]
    scales = np.concatenate([np.full(d_s, np.sqrt(noise.lambda_s)), np.full(d_a, np.sqrt(noise.lambda_a))])
    active = np.nonzero(scales > 0)[0]
    n = len(active)
    if n == 0:
        return td_update(critic, model, target_actor, mu_s, mu_a, gamma, bootstrap_critics)
    if rule == "sigma":
        pts = np.zeros((2 * n, d_s + d_a))
        for i, k in enumerate(active):
            pts[2 * i, k] = np.sqrt(n) * scales[k]
            pts[2 * i + 1, k] = -np.sqrt(n) * scales[k]
        w = np.full(2 * n, 1.0 / (2 * n))
    elif rule == "gauss-hermite":
        x, wx = np.polynomial.hermite_e.hermegauss(order)
        wx = wx / wx.sum()
        grids = np.meshgrid(*([x] * n), indexing="ij")
        wgrids = np.meshgrid(*([wx] * n), indexing="ij")
        pts = np.zeros((order ** n, d_s + d_a))
        for i, k in enumerate(active):
            pts[:, k] = grids[i].reshape(-1) * scales[k]
        w = np.prod(np.stack([g.reshape(-1) for g in wgrids]), axis=0)
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    m = len(pts)
    S = (mu_s[None] + pts[:, None, :d_s]).reshape(m * B, d_s)
    A = (mu_a[None] + pts[:, None, d_s:]).reshape(m * B, d_a)
    weights = np.repeat(w, B) / B
    return _weighted_td_update(critic, model, target_actor, S, A, weights, gamma, bootstrap_critics)


def _unflat(vec, params):
    out, off = [], 0
    for p in params:
        out.append(vec[off:off + p.value.size].reshape(p.shape))
        off += p.value.size
    return out


def flat_update(critic, update) -> np.ndarray:
    return critic.flat([np.asarray(u) for u in update])


def linear_update_by_hand(x, x_next, grad_a_x, grad_a_x_next, r, grad_a_r, theta, gamma, lambda_a):
    """Taylor update for ``Q = x . theta`` assembled from features and their action Jacobians.

    ``x``, ``x_next``: ``(B, N)``; ``grad_a_x``, ``grad_a_x_next``: ``(B, d_a, N)``
    (Jacobians with respect to the initial action); ``r``: ``(B,)``;
    ``grad_a_r``: ``(B, d_a)``. Returns the row-mean update ``(N,)``::

        r x - x (x - gamma x')^T theta
          + lambda_a [ (J_x)^T grad_a r - (J_x)^T (J_x - gamma J_x') theta ]
    """
    td = r - (x - gamma * x_next) @ theta
    first = td[:, None] * x
    jd = grad_a_x - gamma * grad_a_x_next
    second = np.einsum("bjn,bj->bn", grad_a_x, grad_a_r) - np.einsum("bjn,bjm,m->bn", grad_a_x, jd, theta)
    return np.mean(first + lambda_a * second, axis=0)
