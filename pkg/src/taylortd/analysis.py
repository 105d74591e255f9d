"""Empirical analyses: update variance, linear stability and the toy regression.

The update-variance measurements use the batch-update protocol: parameters
are frozen and many per-state updates are computed from them. On the LQ
testbed with a linear critic every update has a closed form, so the per-state
updates are computed in vectorized numpy. The per-sample formulas are tested
against the graph implementation in :mod:`taylortd.taylor`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import LqSpec
from .nets import MLP, Adam
from .rng import make_rng

# ---------------------------------------------------------------------------
# feature maps with action/state Jacobians


class QuadraticFeatures:
    """``[z_i z_j (i <= j), z, 1]`` for ``z = [s, a]``; Q is a general quadratic."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim, self.action_dim = state_dim, action_dim
        d = state_dim + action_dim
        self.iu, self.ju = np.triu_indices(d)
        self.dim = len(self.iu) + d + 1

    def __call__(self, S, A):
        """``(x, J_s, J_a)`` with shapes ``(n, N)``, ``(n, N, d_s)``, ``(n, N, d_a)``."""
        Z = np.concatenate([S, A], axis=1)
        n, d = Z.shape
        P = len(self.iu)
        x = np.concatenate([Z[:, self.iu] * Z[:, self.ju], Z, np.ones((n, 1))], axis=1)
        J = np.zeros((n, self.dim, d))
        rows = np.arange(P)
        J[:, rows, self.iu] += Z[:, self.ju]
        J[:, rows, self.ju] += Z[:, self.iu]
        J[:, P + np.arange(d), np.arange(d)] = 1.0
        return x, J[:, :, :self.state_dim], J[:, :, self.state_dim:]


class AffineFeatures:
    """``[s, a, 1]``: Q is affine in the state and the action."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.dim = state_dim + action_dim + 1

    def __call__(self, S, A):
        n, d = len(S), self.state_dim + self.action_dim
        x = np.concatenate([S, A, np.ones((n, 1))], axis=1)
        J = np.zeros((n, self.dim, d))
        J[:, np.arange(d), np.arange(d)] = 1.0
        return x, J[:, :, :self.state_dim], J[:, :, self.state_dim:]


class RandomTanhFeatures:
    """``x = tanh(W2 tanh(W1 [s, a] + b1) + b2)`` with fixed random weights."""

    def __init__(self, state_dim, action_dim, n_features, rng, hidden=64, scale=1.0):
        self.state_dim, self.action_dim, self.dim = state_dim, action_dim, n_features
        d = state_dim + action_dim
        self.W1 = scale * rng.standard_normal((d, hidden)) / np.sqrt(d)
        self.b1 = 0.1 * rng.standard_normal(hidden)
        self.W2 = scale * rng.standard_normal((hidden, n_features)) / np.sqrt(hidden)
        self.b2 = 0.1 * rng.standard_normal(n_features)

    def __call__(self, S, A):
        Z = np.concatenate([S, A], axis=1)
        H = np.tanh(Z @ self.W1 + self.b1)
        x = np.tanh(H @ self.W2 + self.b2)
        # dx/dz = diag(1 - x^2) W2^T diag(1 - H^2) W1^T
        J = (1.0 - x * x)[:, :, None] * np.matmul(self.W2.T, (1.0 - H * H)[:, :, None] * self.W1.T)
        return x, J[:, :, :self.state_dim], J[:, :, self.state_dim:]


# ---------------------------------------------------------------------------
# LQ testbed with a linear critic


@dataclass
class LinearLqProblem:
    """Linear critic ``Q = x(s, a) . theta`` on exact LQ dynamics with a linear target policy ``a = K s``.

    The bootstrap uses the same ``theta`` (no separate target network).
    """

    spec: LqSpec
    K: np.ndarray
    theta: np.ndarray
    features: object
    gamma: float = 0.99
    lambda_a: float = 0.25
    lambda_s: float = 1e-5

    @classmethod
    def random(cls, state_dim, action_dim, rng, features="quadratic", policy_scale=0.3, theta_scale=0.1,
               **kw):
        spec_kw = {k: kw.pop(k) for k in ("action_cost", "dt") if k in kw}
        spec = LqSpec.random(state_dim, action_dim, rng, **spec_kw)
        K = policy_scale * rng.standard_normal((action_dim, state_dim)) / np.sqrt(state_dim)
        feats = (QuadraticFeatures if features == "quadratic" else AffineFeatures)(state_dim, action_dim)
        theta = theta_scale * rng.standard_normal(feats.dim) / np.sqrt(feats.dim)
        return cls(spec, K, theta, feats, **kw)

    @property
    def n_params(self) -> int:
        return self.features.dim

    def sample_states(self, rng, n):
        return rng.standard_normal((n, self.spec.state_dim))

    def policy(self, S):
        return S @ self.K.T

    def td(self, S, A):
        """``(delta, x, J_s, J_a, d_s delta, d_a delta)`` at a batch of points."""
        spec, theta, g = self.spec, self.theta, self.gamma
        S_next = S + spec.dt * (S @ spec.F.T + A @ spec.G.T)
        A_next = self.policy(S_next)
        r = -np.sum((S @ spec.C) * S, axis=1) - spec.action_cost * np.sum(A * A, axis=1)
        x, Js, Ja = self.features(S, A)
        xn, Jsn, Jan = self.features(S_next, A_next)
        delta = r + g * xn @ theta - x @ theta
        # gradient of Q(s', K s') with respect to s'
        q_sn = np.einsum("nfd,f->nd", Jsn, theta) + np.einsum("nfa,f,ad->nd", Jan, theta, self.K)
        dsn_ds = np.eye(spec.state_dim) + spec.dt * spec.F
        dsn_da = spec.dt * spec.G
        d_s = -2.0 * S @ spec.C + g * q_sn @ dsn_ds - np.einsum("nfd,f->nd", Js, theta)
        d_a = -2.0 * spec.action_cost * A + g * q_sn @ dsn_da - np.einsum("nfa,f->na", Ja, theta)
        return delta, x, Js, Ja, d_s, d_a

    def td_updates(self, S, A):
        delta, x, *_ = self.td(S, A)
        return delta[:, None] * x

    def taylor_updates(self, S, A=None):
        """Per-state ``delta x + lambda_a J_a d_a delta + lambda_s J_s d_s delta``."""
        A = self.policy(S) if A is None else A
        delta, x, Js, Ja, d_s, d_a = self.td(S, A)
        return (delta[:, None] * x + self.lambda_a * np.einsum("nfa,na->nf", Ja, d_a)
                + self.lambda_s * np.einsum("nfd,nd->nf", Js, d_s))

    def sample_updates(self, S, rng, A=None):
        """Single-sample TD updates at ``(s + e_s, a + e_a)`` with matched noise scales."""
        A = self.policy(S) if A is None else A
        e_s = np.sqrt(self.lambda_s) * rng.standard_normal(S.shape)
        e_a = np.sqrt(self.lambda_a) * rng.standard_normal(A.shape)
        return self.td_updates(S + e_s, A + e_a)

    def expected_updates(self, S, A=None):
        """Exact ``E[delta x]`` under the perturbations when the integrand is at most cubic.

        Uses symmetric sigma points, so it is exact for affine features; for
        quadratic features it is only an approximation.
        """
        A = self.policy(S) if A is None else A
        d_s, d_a = S.shape[1], A.shape[1]
        scales = np.concatenate([np.full(d_s, np.sqrt(self.lambda_s)), np.full(d_a, np.sqrt(self.lambda_a))])
        active = np.nonzero(scales > 0)[0]
        if len(active) == 0:
            return self.td_updates(S, A)
        n = len(active)
        out = np.zeros((len(S), self.n_params))
        for k in active:
            for sign in (1.0, -1.0):
                shift = np.zeros(d_s + d_a)
                shift[k] = sign * np.sqrt(n) * scales[k]
                out += self.td_updates(S + shift[:d_s], A + shift[d_s:]) / (2 * n)
        return out


# ---------------------------------------------------------------------------
# update variance


def _summed_variance(U):
    return float(np.sum(np.var(U, axis=0, ddof=1)))


@dataclass
class VarianceReport:
    taylor: np.ndarray
    sample_based: np.ndarray
    seeds: tuple
    step: int = 0

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)

    @staticmethod
    def _se(x):
        return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")

    @property
    def taylor_mean(self):
        return float(np.mean(self.taylor))

    @property
    def sample_mean(self):
        return float(np.mean(self.sample_based))

    @property
    def taylor_se(self):
        return self._se(self.taylor)

    @property
    def sample_se(self):
        return self._se(self.sample_based)

    @property
    def taylor_lower(self) -> int:
        """Number of seeds where the Taylor variance is strictly lower."""
        return int(np.sum(self.taylor < self.sample_based))

    def rows(self, condition=""):
        out = []
        for seed, t, s in zip(self.seeds, self.taylor, self.sample_based):
            out.append((seed, condition, "taylor_variance", float(t)))
            out.append((seed, condition, "sample_variance", float(s)))
        return out


def measure_update_variance(problem, n_states: int, seeds, state_sampler=None) -> VarianceReport:
    """Summed per-parameter variance across states of Taylor vs single-sample updates.

    For every seed the same states feed both methods; the sample-based arm
    draws fresh perturbation noise per state.
    """
    if n_states < 2:
        raise ValueError("need at least 2 states per seed for a variance")
    seeds = tuple(seeds)
    taylor, sample = [], []
    for seed in seeds:
        rng = make_rng(seed)
        S = (state_sampler or problem.sample_states)(rng, n_states)
        taylor.append(_summed_variance(problem.taylor_updates(S)))
        sample.append(_summed_variance(problem.sample_updates(S, rng)))
    return VarianceReport(np.array(taylor), np.array(sample), seeds)


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial sign-test p-value for ``wins`` successes out of ``n``."""
    from math import comb

    return sum(comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


@dataclass
class Decomposition:
    var_sample: float
    var_sample_se: float
    expected_inner_var: float
    expected_inner_var_se: float
    var_expected: float
    var_expected_se: float

    @property
    def gap(self) -> float:
        return self.var_sample - (self.expected_inner_var + self.var_expected)

    @property
    def gap_se(self) -> float:
        return float(np.sqrt(self.var_sample_se ** 2 + self.expected_inner_var_se ** 2 + self.var_expected_se ** 2))

    def closes(self, n_se=3.0) -> bool:
        return abs(self.gap) <= n_se * self.gap_se


def total_variance_decomposition(problem, n_states: int, n_inner: int, rng, chunk=200) -> Decomposition:
    """Check ``Var[sample update] = E[Var inner] + Var[expected update]`` by simulation.

    The left side uses ``n_states * n_inner`` independent (state, noise)
    draws. The right side uses a nested design: ``n_states`` states with
    ``n_inner`` noise draws each. ``Var[expected update]`` is corrected for the
    noise in the inner means. All sums run over parameters.
    """
    if n_inner < 2 or n_states < 2:
        raise ValueError("need n_states >= 2 and n_inner >= 2")
    P = problem.n_params
    # independent draws
    n_total = n_states * n_inner
    blocks = []
    for start in range(0, n_total, chunk * n_inner):
        m = min(chunk * n_inner, n_total - start)
        blocks.append(problem.sample_updates(problem.sample_states(rng, m), rng))
    U = np.concatenate(blocks)
    mean = U.mean(axis=0)
    z = np.sum((U - mean) ** 2, axis=1) * n_total / (n_total - 1)
    var_sample, var_sample_se = float(z.mean()), float(z.std(ddof=1) / np.sqrt(n_total))
    del U, blocks
    # nested draws
    inner_var = np.zeros(n_states)
    inner_mean = np.zeros((n_states, P))
    for start in range(0, n_states, chunk):
        m = min(chunk, n_states - start)
        S = problem.sample_states(rng, m)
        U = problem.sample_updates(np.repeat(S, n_inner, axis=0), rng).reshape(m, n_inner, P)
        inner_mean[start:start + m] = U.mean(axis=1)
        inner_var[start:start + m] = np.sum(np.var(U, axis=1, ddof=1), axis=1)
    e_inner = float(inner_var.mean())
    e_inner_se = float(inner_var.std(ddof=1) / np.sqrt(n_states))
    centered = np.sum((inner_mean - inner_mean.mean(axis=0)) ** 2, axis=1) * n_states / (n_states - 1)
    var_exp = float(centered.mean() - e_inner / n_inner)
    var_exp_se = float(np.sqrt(centered.var(ddof=1) / n_states + (e_inner_se / n_inner) ** 2))
    return Decomposition(var_sample, var_sample_se, e_inner, e_inner_se, var_exp, var_exp_se)


def train_linear_critic(problem, steps: int, rng, lr=1e-3, batch_size=32, method="taylor"):
    """Batch Taylor (or plain TD) updates on ``problem.theta`` in place."""
    for _ in range(steps):
        S = problem.sample_states(rng, batch_size)
        U = problem.taylor_updates(S) if method == "taylor" else problem.sample_updates(S, rng)
        problem.theta += lr * U.mean(axis=0)
        if not np.all(np.isfinite(problem.theta)):
            raise FloatingPointError("linear critic diverged during training")
    return problem.theta


def variance_across_training(problem_factory, checkpoints=(0, 5000, 50000), seeds=tuple(range(10)),
                             n_states=256, lr=1e-3, batch_size=32) -> list:
    """One :class:`VarianceReport` per training checkpoint (critic trained with Taylor updates).

    ``problem_factory(seed)`` builds a fresh untrained problem; each seed's
    critic is trained once and measured at every checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints or any(c < 0 for c in checkpoints) or checkpoints != sorted(set(checkpoints)):
        raise ValueError(f"checkpoints must be distinct, non-negative and increasing: {checkpoints}")
    per_step = {c: ([], []) for c in checkpoints}
    for seed in seeds:
        problem = problem_factory(seed)
        train_rng = make_rng((seed, 1))
        done = 0
        for c in checkpoints:
            train_linear_critic(problem, c - done, train_rng, lr, batch_size)
            done = c
            rep = measure_update_variance(problem, n_states, [seed])
            per_step[c][0].append(rep.taylor[0])
            per_step[c][1].append(rep.sample_based[0])
    return [VarianceReport(np.array(t), np.array(s), tuple(seeds), step=c) for c, (t, s) in per_step.items()]


# ---------------------------------------------------------------------------
# linear stability


@dataclass
class StabilityReport:
    A: np.ndarray
    A_tilde: np.ndarray
    u: np.ndarray
    lambda_a: float
    dt: float
    min_eig_A: float
    min_eig_A_tilde: float
    min_eig_M: float
    step_threshold: float
    tolerance: float = 1e-6

    @property
    def M(self):
        return self.A + self.lambda_a * self.A_tilde

    @property
    def a_tilde_psd(self) -> bool:
        return self.min_eig_A_tilde >= -self.tolerance

    @property
    def fixed_point(self):
        return np.linalg.solve(self.M, self.u)


def _min_sym_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def stability_matrices(feature_map, dataset: dict, gamma: float, lambda_a: float, dt: float,
                       tolerance: float = 1e-6) -> StabilityReport:
    """Empirical ``A``, ``A~`` and ``u`` of the expected linear Taylor update.

    ``dataset`` holds ``s, a, r, s_next, a_next`` plus ``grad_a_r`` ``(n, d_a)``
    and ``grad_a_next`` ``(n, N, d_a)``, the total derivative of the next
    features with respect to the initial action (see :func:`lq_stability_dataset`).
    """
    x, _, Ja = feature_map(dataset["s"], dataset["a"])
    xn, _, _ = feature_map(dataset["s_next"], dataset["a_next"])
    Jan = dataset["grad_a_next"]
    n = len(x)
    if Jan.shape != Ja.shape or xn.shape != x.shape:
        raise ValueError(f"feature dimension mismatch: {Ja.shape} vs {Jan.shape}")
    A = x.T @ (x - gamma * xn) / n
    A_tilde = np.einsum("nfa,nga->fg", Ja, Ja - gamma * Jan) / n
    u = (dataset["r"] @ x + lambda_a * np.einsum("nfa,na->f", Ja, dataset["grad_a_r"])) / n
    M = A + lambda_a * A_tilde
    eig = np.linalg.eigvals(M)
    if np.any(eig.real <= 0):
        threshold = 0.0
    else:
        threshold = float(np.min(2.0 * eig.real / np.abs(eig) ** 2))
    return StabilityReport(A, A_tilde, u, lambda_a, dt, _min_sym_eig(A), _min_sym_eig(A_tilde), _min_sym_eig(M),
                           threshold, tolerance)


def stationary_covariance(T, Q):
    """Solve ``P = T P T^T + Q`` (discrete Lyapunov equation) by vectorization."""
    d = T.shape[0]
    vec = np.linalg.solve(np.eye(d * d) - np.kron(T, T), Q.reshape(-1))
    P = vec.reshape(d, d)
    return 0.5 * (P + P.T)


def lq_stability_dataset(feature_map, spec: LqSpec, K, n: int, rng, process_noise=1.0, state_cov=None):
    """On-policy transitions of the closed-loop chain ``s' = s + dt f(s, K s) + sqrt(dt) sigma xi``.

    States are drawn from the chain's stationary Gaussian distribution, so
    ``s`` and ``s'`` share one marginal. The additive process noise does not
    depend on the action, hence ``ds'/da = dt G`` as for the noise-free step.
    ``state_cov`` replaces the stationary covariance (needed when the chain
    is unstable, e.g. for very large ``dt``).
    """
    d_s = spec.state_dim
    if state_cov is None:
        T = np.eye(d_s) + spec.dt * (spec.F + spec.G @ K)
        if np.max(np.abs(np.linalg.eigvals(T))) >= 1.0:
            raise ValueError("closed-loop chain has no stationary distribution; pass state_cov")
        P = stationary_covariance(T, spec.dt * process_noise ** 2 * np.eye(d_s))
    else:
        P = np.asarray(state_cov, dtype=float)
    S = rng.multivariate_normal(np.zeros(d_s), P, size=n, method="cholesky")
    A = S @ K.T
    S_next = S + spec.dt * (S @ spec.F.T + A @ spec.G.T) + np.sqrt(spec.dt) * process_noise * \
        rng.standard_normal((n, d_s))
    A_next = S_next @ K.T
    r = -np.sum((S @ spec.C) * S, axis=1) - spec.action_cost * np.sum(A * A, axis=1)
    _, Jsn, Jan = feature_map(S_next, A_next)
    # d x'/d a = (J_s' + J_a' K) ds'/da, with ds'/da = dt G
    grad_a_next = np.einsum("nfd,de->nfe", Jsn + np.einsum("nfa,ad->nfd", Jan, K), spec.dt * spec.G)
    return {"s": S, "a": A, "r": r, "s_next": S_next, "a_next": A_next,
            "grad_a_r": -2.0 * spec.action_cost * A, "grad_a_next": grad_a_next}


def iterate_expected_update(report: StabilityReport, eta: float, max_iter=100_000, tol=1e-8, theta0=None):
    """Run ``theta <- (I - eta M) theta + eta u`` until within ``tol`` of the fixed point.

    Returns ``(converged, iterations, final_error)``; the error is
    ``|theta - theta*| / max(1, |theta*|)``.
    """
    M, u = report.M, report.u
    target = report.fixed_point
    scale = max(1.0, float(np.linalg.norm(target)))
    theta = np.zeros_like(u) if theta0 is None else np.array(theta0, dtype=float)
    T = np.eye(len(u)) - eta * M
    c = eta * u
    err = float(np.linalg.norm(theta - target)) / scale
    for it in range(1, max_iter + 1):
        theta = T @ theta + c
        if it % 10 == 0 or it == max_iter:
            err = float(np.linalg.norm(theta - target)) / scale
            if not np.isfinite(err):
                return False, it, err
            if err <= tol:
                return True, it, err
    return False, max_iter, err



@dataclass
class StabilityRun:
    report: StabilityReport
    eta: float
    converged: bool
    iterations: int
    error: float


def stability_experiment(seed, dt=1e-3, n_features=64, n_samples=20000, state_dim=8, action_dim=8,
                         gamma=0.99, lambda_a=0.25, eta_fraction=0.9, policy_scale=0.3, state_cov=None,
                         max_iter=100_000) -> StabilityRun:
    """Random LQ system, random tanh features and linear policy; build the report and iterate.

    The expected update is iterated at ``eta_fraction`` times the spectral
    step threshold. When ``M`` has an eigenvalue with non-positive real part
    the threshold is zero and no iteration is attempted.
    """
    rng = make_rng(seed)
    spec = LqSpec.random(state_dim, action_dim, rng, dt=dt)
    K = policy_scale * rng.standard_normal((action_dim, state_dim)) / np.sqrt(state_dim)
    features = RandomTanhFeatures(state_dim, action_dim, n_features, rng)
    data = lq_stability_dataset(features, spec, K, n_samples, rng, state_cov=state_cov)
    report = stability_matrices(features, data, gamma, lambda_a, dt)
    eta = eta_fraction * report.step_threshold
    if eta <= 0:
        return StabilityRun(report, 0.0, False, 0, float("inf"))
    converged, iters, err = iterate_expected_update(report, eta, max_iter=max_iter)
    return StabilityRun(report, eta, converged, iters, err)

# ---------------------------------------------------------------------------
# toy regression: Taylor-expanded vs sample-based targets


@dataclass(frozen=True)
class ToyConfig:
    dim: int = 10
    regime: str = "low"
    lambda_x: float = 0.1
    seed: int = 0
    n_test: int = 50
    test_draws: int = 64
    hidden: tuple = (64,)
    target_hidden: int = 64
    steps: int = 1000
    lr: float = 3e-3
    resample: bool = False
    n_train: dict = field(default_factory=lambda: {"low": 15, "high": 128})

    def __post_init__(self):
        if not 1 <= self.dim:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.regime not in self.n_train:
            raise ValueError(f"regime must be one of {sorted(self.n_train)}, got {self.regime!r}")
        if self.lambda_x < 0:
            raise ValueError("lambda_x must be non-negative")

    @property
    def train_size(self) -> int:
        return self.n_train[self.regime]


class ToyTarget:
    """``y(x)``: one hidden layer of tanh units with seeded weights."""

    def __init__(self, dim, hidden, rng):
        self.net = MLP((dim, hidden, 1), hidden="tanh")
        W1 = rng.standard_normal((dim, hidden)) / np.sqrt(dim)
        b1 = 0.1 * rng.standard_normal(hidden)
        W2 = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
        self.theta = np.concatenate([W1.ravel(), b1, W2.ravel(), [0.0]])

    def __call__(self, X):
        return self.net.forward(self.theta, X)[:, 0]

    def value_and_grad(self, X):
        return self.net.input_grad(self.theta, X)


def toy_taylor_objective_grad(net, theta, X, y, gy, lambda_x):
    """``(J, dJ/dtheta)`` for ``mean 0.5 (y - f)^2 + 0.5 lambda |grad y - grad f|^2``."""
    f, gf = net.input_grad(theta, X)
    n = len(X)
    J = float(np.mean(0.5 * (y - f) ** 2 + 0.5 * lambda_x * np.sum((gy - gf) ** 2, axis=1)))
    _, g = net.value_tangent_grad(theta, X, (f - y) / n, lambda_x * (gf - gy) / n)
    return J, g


def toy_taylor_objective_graph(params, X, y, gy, lambda_x):
    """Graph version of the Taylor toy objective (for gradient checks)."""
    from . import autodiff as ad

    Xn = ad.param(np.asarray(X, dtype=np.float64))
    f = ad.mlp_forward(params, Xn)[:, 0]
    gf = ad.grad(ad.sum(f), [Xn], create_graph=True)[0]
    return ad.mean(0.5 * ad.square(y - f) + 0.5 * lambda_x * ad.sum(ad.square(gy - gf), axis=-1))


def toy_sample_objective_grad(net, theta, Xp, yp):
    """Squared error on perturbed inputs ``Xp`` with sampled targets ``yp``, and its gradient."""
    f = net.forward(theta, Xp)[:, 0]
    n = len(Xp)
    _, _, g = net.vjp(theta, Xp, ((f - yp) / n).reshape(-1, 1))
    return float(np.mean(0.5 * (yp - f) ** 2)), g


def toy_experiment(cfg: ToyConfig, method: str) -> float:
    """Train on ``cfg`` with ``method`` in {"taylor", "sample_based"}; return the test MSE.

    The sample-based arm sees one perturbed target per training input, drawn
    once, so both arms query the target function at the same number of
    points. ``cfg.resample`` redraws the perturbations at every step instead.

    The test MSE is the perturbed-input objective on ``n_test`` fresh inputs,
    ``mean (y(x + e) - f(x + e))^2``, estimated with ``test_draws`` fixed
    draws per input (identical for both methods).
    """
    if method not in ("taylor", "sample_based"):
        raise ValueError(f"unknown method {method!r}")
    data_rng = make_rng((cfg.seed, cfg.dim, 0))
    target = ToyTarget(cfg.dim, cfg.target_hidden, data_rng)
    X = data_rng.standard_normal((cfg.train_size, cfg.dim))
    X_test = data_rng.standard_normal((cfg.n_test, cfg.dim))
    E_test = np.sqrt(cfg.lambda_x) * data_rng.standard_normal((cfg.n_test, cfg.test_draws, cfg.dim))
    net = MLP((cfg.dim, *cfg.hidden, 1), hidden="tanh")
    theta = net.init(make_rng((cfg.seed, cfg.dim, 1)))
    opt = Adam(net.n_params, cfg.lr)
    train_rng = make_rng((cfg.seed, cfg.dim, 2))
    y, gy = target.value_and_grad(X)
    scale = np.sqrt(cfg.lambda_x)
    Xp = X + scale * train_rng.standard_normal(X.shape)
    yp = target(Xp)
    for _ in range(cfg.steps):
        if method == "taylor":
            _, g = toy_taylor_objective_grad(net, theta, X, y, gy, cfg.lambda_x)
        else:
            if cfg.resample:
                Xp = X + scale * train_rng.standard_normal(X.shape)
                yp = target(Xp)
            _, g = toy_sample_objective_grad(net, theta, Xp, yp)
        opt.step(theta, g)
    Xt = (X_test[:, None, :] + E_test).reshape(-1, cfg.dim)
    return float(np.mean((target(Xt) - net.forward(theta, Xt)[:, 0]) ** 2))


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        r[order] = np.arange(len(v))
        for val in np.unique(v):
            idx = v == val
            r[idx] = r[idx].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


def toy_sweep(dims=(1, 5, 10, 25, 50, 100), regimes=("low", "high"), seeds=range(5), **kw) -> list:
    """Rows ``(seed, condition, metric, value)`` for every (dim, regime, method, seed)."""
    rows = []
    for d in dims:
        for regime in regimes:
            for seed in seeds:
                cfg = ToyConfig(dim=d, regime=regime, seed=seed, **kw)
                for method in ("taylor", "sample_based"):
                    rows.append((seed, f"d={d};regime={regime}", f"{method}_test_mse", toy_experiment(cfg, method)))
    return rows


def toy_advantage(rows) -> dict:
    """Per (regime, dim) mean relative advantage ``(mse_sample - mse_taylor) / mse_sample`` over seeds."""
    table = {}
    for seed, cond, metric, value in rows:
        table.setdefault(cond, {}).setdefault(seed, {})[metric] = value
    out = {}
    for cond, per_seed in table.items():
        parts = dict(p.split("=") for p in cond.split(";"))
        adv = [(v["sample_based_test_mse"] - v["taylor_test_mse"]) / v["sample_based_test_mse"]
               for v in per_seed.values()]
        out[(parts["regime"], int(parts["d"]))] = float(np.mean(adv))
    return out
