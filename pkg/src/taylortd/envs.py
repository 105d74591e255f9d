"""Continuous-control environments: the classic pendulum and a linear-quadratic
testbed whose dynamics are exactly linear (used for closed-form checks).

Environments are stateless objects; the state is a value passed in and out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .rng import make_rng

# Pendulum-v1 constants
GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
DT = 0.05
MAX_SPEED = 8.0
MAX_TORQUE = 2.0
EPISODE_STEPS = 200
MIN_REWARD = -(np.pi ** 2 + 0.1 * MAX_SPEED ** 2 + 0.001 * MAX_TORQUE ** 2)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float

    def observation(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])


def wrap_angle(theta):
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


def pendulum_step(state: PendulumState, action) -> tuple:
    """Advance one step; returns ``(next_state, reward, done)``. ``done`` is always False."""
    u = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(u):
        raise ValueError(f"non-finite action {action!r}")
    th, thdot, r = kernels.pendulum_dynamics(float(state.theta), float(state.theta_dot), u,
                                             GRAVITY, MASS, LENGTH, DT, MAX_SPEED, MAX_TORQUE)
    return PendulumState(th, thdot), float(r), False


def pendulum_step_graph(theta, theta_dot, action):
    """Differentiable pendulum step on graph nodes.

    Returns ``(next_observation, reward)`` nodes. The reward's angle wrap is a
    constant shift, so its derivative is 1 (one-sided at the jump).
    """
    th, thdot = ad.const(theta), ad.const(theta_dot)
    u = ad.clip(action, -MAX_TORQUE, MAX_TORQUE)
    wrapped = th + ad.stopgrad(wrap_angle(th.value) - th.value)
    reward = -(ad.square(wrapped) + 0.1 * ad.square(thdot) + 0.001 * ad.square(u))
    accel = (3.0 * GRAVITY / (2.0 * LENGTH)) * ad.sin(th) + (3.0 / (MASS * LENGTH ** 2)) * u
    new_thdot = ad.clip(thdot + accel * DT, -MAX_SPEED, MAX_SPEED)
    new_th = th + new_thdot * DT
    obs = ad.concat([ad.reshape(ad.cos(new_th), (1,)), ad.reshape(ad.sin(new_th), (1,)),
                     ad.reshape(new_thdot, (1,))])
    return obs, reward


class Pendulum:
    obs_dim = 3
    act_dim = 1
    action_bound = MAX_TORQUE
    episode_steps = EPISODE_STEPS

    def reset(self, rng: np.random.Generator) -> PendulumState:
        return PendulumState(rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0))

    def observe(self, state: PendulumState) -> np.ndarray:
        return state.observation()

    def step(self, state, action, rng=None):
        return pendulum_step(state, action)


@dataclass(frozen=True)
class LqSpec:
    """``s' = s + dt (F s + G a) + noise_scale * noise``, reward ``-s'Cs - c_a |a|^2``."""

    F: np.ndarray
    G: np.ndarray
    C: np.ndarray
    action_cost: float = 0.1
    dt: float = 0.05
    noise_scale: float = 0.0

    def __post_init__(self):
        F, G, C = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (self.F, self.G, self.C))
        d = F.shape[0]
        if F.shape != (d, d) or G.shape[0] != d or C.shape != (d, d):
            raise ValueError(f"inconsistent LQ shapes F{F.shape} G{G.shape} C{C.shape}")
        if not np.allclose(C, C.T) or np.linalg.eigvalsh(C).min() < -1e-12:
            raise ValueError("state cost matrix must be symmetric positive semi-definite")
        if self.dt < 0 or self.action_cost < 0 or self.noise_scale < 0:
            raise ValueError("dt, action_cost and noise_scale must be non-negative")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "C", C)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def action_dim(self) -> int:
        return self.G.shape[1]

    @classmethod
    def random(cls, state_dim, action_dim, rng, **kw):
        """Stable drift (eigenvalues with negative real part), unit state cost."""
        A = rng.standard_normal((state_dim, state_dim)) / np.sqrt(state_dim)
        F = 0.5 * (A - A.T) - np.eye(state_dim)
        G = rng.standard_normal((state_dim, action_dim)) / np.sqrt(action_dim)
        return cls(F, G, np.eye(state_dim), **kw)


def lq_step(state, action, spec: LqSpec, noise=None):
    """One LQ step on arrays or graph nodes; batches are rows. Returns ``(s', r)``."""
    graph = isinstance(state, ad.Node) or isinstance(action, ad.Node) or isinstance(noise, ad.Node)
    if not graph:
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
    if state.shape[-1] != spec.state_dim or action.shape[-1] != spec.action_dim:
        raise ValueError(f"LQ dimension mismatch: state {state.shape}, action {action.shape}, "
                         f"expected ({spec.state_dim},), ({spec.action_dim},)")
    if noise is not None and np.shape(ad.const(noise).value)[-1] != spec.state_dim:
        raise ValueError(f"noise dimension {np.shape(noise)} != state dimension {spec.state_dim}")
    if graph:
        s2 = ad.reshape(state, (-1, spec.state_dim)) if state.ndim == 1 else state
        a2 = ad.reshape(action, (-1, spec.action_dim)) if action.ndim == 1 else action
        nxt = s2 + spec.dt * (s2 @ spec.F.T + a2 @ spec.G.T)
        if noise is not None:
            nxt = nxt + spec.noise_scale * ad.reshape(noise, nxt.shape)
        r = -ad.sum((s2 @ spec.C) * s2, axis=-1) - spec.action_cost * ad.sum(a2 * a2, axis=-1)
        if state.ndim == 1:
            return ad.reshape(nxt, (spec.state_dim,)), ad.reshape(r, ())
        return nxt, r
    nxt = state + spec.dt * (state @ spec.F.T + action @ spec.G.T)
    if noise is not None:
        nxt = nxt + spec.noise_scale * np.asarray(noise, dtype=np.float64)
    r = -np.sum((state @ spec.C) * state, axis=-1) - spec.action_cost * np.sum(action * action, axis=-1)
    return nxt, r


@dataclass
class LQEnv:
    spec: LqSpec
    action_bound: float = 1.0
    episode_steps: int = 200
    obs_dim: int = field(init=False)
    act_dim: int = field(init=False)

    def __post_init__(self):
        self.obs_dim = self.spec.state_dim
        self.act_dim = self.spec.action_dim

    def reset(self, rng):
        return rng.standard_normal(self.obs_dim)

    def observe(self, state):
        return np.asarray(state, dtype=np.float64)

    def step(self, state, action, rng=None):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.act_dim),
                    -self.action_bound, self.action_bound)
        noise = rng.standard_normal(self.obs_dim) if (rng is not None and self.spec.noise_scale > 0) else None
        nxt, r = lq_step(state, a, self.spec, noise)
        return nxt, float(r), False


def rollout(env, policy, horizon: int, seed, initial_state=None) -> list:
    """Run ``policy`` (observation -> action) for ``horizon`` steps from a seeded reset."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = make_rng(seed)
    state = env.reset(rng) if initial_state is None else initial_state
    out = []
    for _ in range(horizon):
        obs = env.observe(state)
        a = np.asarray(policy(obs), dtype=np.float64).reshape(-1)
        if a.shape != (env.act_dim,):
            raise ValueError(f"policy returned shape {a.shape}, expected ({env.act_dim},)")
        state, r, done = env.step(state, a, rng)
        out.append(Transition(obs, a, r, env.observe(state), done))
        if done:
            break
    return out
