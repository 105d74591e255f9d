"""Learned differentiable models: a Gaussian next-state ensemble and a reward net.

Each ensemble member maps normalized ``(s, a)`` to a diagonal Gaussian over
the next state. The mean is parameterized as a residual,
``mu = s + delta_mean + delta_std * out_mean``, and the log-variance is
squashed smoothly into ``[ln 1e-8, ln 1e2]``. Next-state samples are
reparameterized (``mu + sigma * noise``) so they can be differentiated with
respect to ``s`` and ``a``.

Two routes are provided: array methods built on the fused kernels (used
during training) and ``graph_*`` methods that build autodiff graphs (the
reference the kernels are tested against).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nets import MLP, Adam

LOGVAR_MIN = float(np.log(1e-8))
LOGVAR_MAX = float(np.log(1e2))
LOG_2PI = float(np.log(2.0 * np.pi))
# inner ceiling chosen so that LOGVAR_MIN + softplus(ceiling - LOGVAR_MIN) == LOGVAR_MAX
_INNER_MAX = LOGVAR_MIN + float(np.log(np.expm1(LOGVAR_MAX - LOGVAR_MIN)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_clamp(x):
    """Smooth clamp into ``[LOGVAR_MIN, LOGVAR_MAX]``; returns ``(y, dy/dx)``."""
    y1 = _INNER_MAX - np.logaddexp(0.0, _INNER_MAX - x)
    y = LOGVAR_MIN + np.logaddexp(0.0, y1 - LOGVAR_MIN)
    return y, _sigmoid(y1 - LOGVAR_MIN) * _sigmoid(_INNER_MAX - x)


def soft_clamp_graph(x):
    y1 = _INNER_MAX - ad.softplus(_INNER_MAX - x)
    return LOGVAR_MIN + ad.softplus(y1 - LOGVAR_MIN)


def gaussian_nll(target, mean, log_var):
    """Mean over rows of the diagonal-Gaussian negative log-likelihood."""
    target, mean, log_var = ad.const(target), ad.const(mean), ad.const(log_var)
    r = target - mean
    per_row = 0.5 * ad.sum(r * r / ad.exp(log_var) + log_var + LOG_2PI, axis=-1)
    return ad.mean(per_row)


def _rows_by_member(members):
    members = np.asarray(members)
    for k in np.unique(members):
        yield int(k), np.nonzero(members == k)[0]


class GaussianDynamicsEnsemble:
    def __init__(self, obs_dim, act_dim, rng, hidden=(512, 512, 512, 512), n_members=8,
                 lr=1e-3, activation="relu"):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP((obs_dim + act_dim, *hidden, 2 * obs_dim), hidden=activation)
        self.thetas = [self.net.init(rng) for _ in range(n_members)]
        self.opts = [Adam(self.net.n_params, lr) for _ in range(n_members)]
        self.in_mean = np.zeros(obs_dim + act_dim)
        self.in_std = np.ones(obs_dim + act_dim)
        self.delta_mean = np.zeros(obs_dim)
        self.delta_std = np.ones(obs_dim)

    @property
    def n_members(self) -> int:
        return len(self.thetas)

    def set_normalizer(self, in_mean, in_std, delta_mean, delta_std):
        self.in_mean, self.in_std = np.array(in_mean, float), np.array(in_std, float)
        self.delta_mean, self.delta_std = np.array(delta_mean, float), np.array(delta_std, float)

    def _inputs(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.ndim != 2 or a.ndim != 2 or s.shape[1] != self.obs_dim or a.shape[1] != self.act_dim \
                or len(s) != len(a):
            raise ValueError(f"model input mismatch: s {s.shape}, a {a.shape}, "
                             f"expected (B, {self.obs_dim}) and (B, {self.act_dim})")
        return (np.concatenate([s, a], axis=1) - self.in_mean) / self.in_std

    def _head(self, s, out):
        d = self.obs_dim
        mean = s + self.delta_mean + self.delta_std * out[:, :d]
        log_var, dlv = soft_clamp(out[:, d:] + 2.0 * np.log(self.delta_std))
        return mean, log_var, dlv

    def outputs(self, k, s, a):
        """``(mean, log_var)`` of member ``k`` for a batch."""
        out = self.net.forward(self.thetas[k], self._inputs(s, a))
        mean, log_var, _ = self._head(np.asarray(s, float), out)
        return mean, log_var

    def sample(self, s, a, members, noise):
        """Reparameterized next states, member chosen per row. Returns ``(s_next, cache)``."""
        s = np.asarray(s, dtype=np.float64)
        X = self._inputs(s, a)
        noise = np.asarray(noise, dtype=np.float64).reshape(s.shape)
        s_next = np.empty_like(s)
        sigma = np.empty_like(s)
        dlv = np.empty_like(s)
        for k, rows in _rows_by_member(members):
            mean, log_var, dl = self._head(s[rows], self.net.forward(self.thetas[k], X[rows]))
            sigma[rows] = np.exp(0.5 * log_var)
            dlv[rows] = dl
            s_next[rows] = mean + sigma[rows] * noise[rows]
        return s_next, (X, np.asarray(members), noise, sigma, dlv)

    def sample_vjp(self, cache, adj_next):
        """Pull an adjoint on the sampled next states back to ``(adj_s, adj_a)``."""
        X, members, noise, sigma, dlv = cache
        d = self.obs_dim
        gX = np.empty_like(X)
        g_out = np.concatenate([adj_next * self.delta_std, adj_next * noise * sigma * 0.5 * dlv], axis=1)
        for k, rows in _rows_by_member(members):
            _, gX[rows], _ = self.net.vjp(self.thetas[k], X[rows], g_out[rows])
        g_in = gX / self.in_std
        return adj_next + g_in[:, :d], g_in[:, d:]

    def nll_and_grad(self, k, s, a, s_next):
        """Mean Gaussian NLL of member ``k`` on a batch and its parameter gradient."""
        s = np.asarray(s, dtype=np.float64)
        X = self._inputs(s, a)
        out = self.net.forward(self.thetas[k], X)
        mean, log_var, dlv = self._head(s, out)
        inv_var = np.exp(-log_var)
        r = np.asarray(s_next, dtype=np.float64) - mean
        B = len(s)
        nll = 0.5 * np.mean(np.sum(r * r * inv_var + log_var + LOG_2PI, axis=1))
        g_mean = -r * inv_var * self.delta_std
        g_lv = 0.5 * (1.0 - r * r * inv_var) * dlv
        _, _, grad = self.net.vjp(self.thetas[k], X, np.concatenate([g_mean, g_lv], axis=1) / B)
        return nll, grad

    # graph route ---------------------------------------------------------

    def graph_outputs(self, k, s, a, params=None):
        s, a = ad.const(s), ad.const(a)
        params = params if params is not None else self.net.to_graph(self.thetas[k])
        X = (ad.concat([s, a], axis=-1) - self.in_mean) / self.in_std
        out = ad.mlp_forward(params, X)
        d = self.obs_dim
        mean = s + self.delta_mean + self.delta_std * out[:, :d]
        log_var = soft_clamp_graph(out[:, d:] + 2.0 * np.log(self.delta_std))
        return mean, log_var

    def graph_sample(self, k, s, a, noise, params=None):
        mean, log_var = self.graph_outputs(k, s, a, params)
        return mean + ad.exp(0.5 * log_var) * noise


class RewardModel:
    def __init__(self, obs_dim, act_dim, rng, hidden=(256, 256, 256), lr=1e-3,
                 activation="relu", normalize=True):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP((obs_dim + act_dim, *hidden, 1), hidden=activation)
        self.theta = self.net.init(rng)
        self.opt = Adam(self.net.n_params, lr)
        self.normalize = normalize
        self.in_mean = np.zeros(obs_dim + act_dim)
        self.in_std = np.ones(obs_dim + act_dim)

    def set_normalizer(self, in_mean, in_std):
        if self.normalize:
            self.in_mean, self.in_std = np.array(in_mean, float), np.array(in_std, float)

    def _inputs(self, s, a):
        return (np.concatenate([np.asarray(s, float), np.asarray(a, float)], axis=1) - self.in_mean) / self.in_std

    def predict(self, s, a) -> np.ndarray:
        return self.net.forward(self.theta, self._inputs(s, a))[:, 0]

    def vjp(self, s, a, adj_r):
        """``(r_hat, adj_s, adj_a)`` for a per-row adjoint on the predicted reward."""
        Y, gX, _ = self.net.vjp(self.theta, self._inputs(s, a), np.asarray(adj_r, float).reshape(-1, 1))
        g = gX / self.in_std
        return Y[:, 0], g[:, :self.obs_dim], g[:, self.obs_dim:]

    def mse_and_grad(self, s, a, r):
        X = self._inputs(s, a)
        pred = self.net.forward(self.theta, X)[:, 0]
        err = pred - np.asarray(r, float)
        _, _, grad = self.net.vjp(self.theta, X, (2.0 * err / len(err)).reshape(-1, 1))
        return float(np.mean(err * err)), grad

    def graph_predict(self, s, a, params=None):
        params = params if params is not None else self.net.to_graph(self.theta)
        X = (ad.concat([ad.const(s), ad.const(a)], axis=-1) - self.in_mean) / self.in_std
        return ad.mlp_forward(params, X)[:, 0]


def model_nll(ensemble: GaussianDynamicsEnsemble, member: int, batch, params=None):
    """Graph node for member ``member``'s mean NLL on ``batch = (s, a, r, s_next)``."""
    s, a, _, s_next = batch[:4]
    if len(s) == 0:
        raise ValueError("model_nll needs a non-empty batch")
    mean, log_var = ensemble.graph_outputs(member, s, a, params)
    return gaussian_nll(s_next, mean, log_var)


def predict(ensemble, reward_model, s, a, member_index: int, noise):
    """Differentiable ``(r_hat, s_next)`` nodes for one member and supplied noise."""
    if not 0 <= member_index < ensemble.n_members:
        raise IndexError(f"member {member_index} out of range [0, {ensemble.n_members})")
    s_next = ensemble.graph_sample(member_index, s, a, noise)
    return reward_model.graph_predict(s, a), s_next


def train_models(ensemble, reward_model, buffer, steps: int, batch_size: int, rng) -> dict:
    """Run ``steps`` Adam steps on every member and the reward model.

    Each member draws its own mini-batch. Returns per-step losses:
    ``{"nll": (steps, n_members), "reward_mse": (steps,)}``.
    """
    if len(buffer) == 0:
        raise ValueError("cannot train models on an empty buffer")
    batch_size = min(batch_size, len(buffer))
    m_in, sd_in, m_d, sd_d = buffer.input_stats()
    ensemble.set_normalizer(m_in, sd_in, m_d, sd_d)
    reward_model.set_normalizer(m_in, sd_in)
    nll = np.zeros((steps, ensemble.n_members))
    mse = np.zeros(steps)
    for t in range(steps):
        for k in range(ensemble.n_members):
            idx = buffer.sample_indices(batch_size, rng)
            nll[t, k], g = ensemble.nll_and_grad(k, buffer.s[idx], buffer.a[idx], buffer.s_next[idx])
            ensemble.opts[k].step(ensemble.thetas[k], g)
        idx = buffer.sample_indices(batch_size, rng)
        mse[t], g = reward_model.mse_and_grad(buffer.s[idx], buffer.a[idx], buffer.r[idx])
        reward_model.opt.step(reward_model.theta, g)
    return {"nll": nll, "reward_mse": mse}
