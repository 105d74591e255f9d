"""Flat-parameter MLPs with their optimizer and target-network blending.

An :class:`MLP` is only an architecture; its parameters are a separate flat
float64 vector so that optimizers, target copies and checkpoints work on
plain arrays. ``to_graph`` lifts a parameter vector into autodiff leaves for
the reference (graph) path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels

_CODES = {"identity": kernels.IDENTITY, "relu": kernels.RELU, "tanh": kernels.TANH}


@dataclass(frozen=True)
class MLP:
    sizes: tuple
    hidden: str = "relu"
    output: str = "identity"
    _sizes: np.ndarray = field(init=False, repr=False, compare=False)
    _acts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if self.hidden not in _CODES or self.output not in _CODES:
            raise ValueError(f"unknown activation {self.hidden!r}/{self.output!r}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "_sizes", np.array(sizes, dtype=np.int64))
        acts = [_CODES[self.hidden]] * (len(sizes) - 2) + [_CODES[self.output]]
        object.__setattr__(self, "_acts", np.array(acts, dtype=np.int64))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        parts = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            parts.append(rng.uniform(-bound, bound, size=n_in * n_out))
            parts.append(rng.uniform(-bound, bound, size=n_out))
        return np.concatenate(parts)

    def unflatten(self, theta) -> list:
        """``[(W, b), ...]`` views into ``theta``."""
        out, off = [], 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[off:off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            out.append((W, theta[off:off + n_out]))
            off += n_out
        return out

    def tensor_shapes(self) -> list:
        shapes = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        return shapes

    def _check(self, theta, X):
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValueError(f"expected input of shape (B, {self.n_in}), got {X.shape}")
        return X

    def forward(self, theta, X) -> np.ndarray:
        X = self._check(theta, X)
        return kernels.forward(theta, self._sizes, self._acts, X)

    def vjp(self, theta, X, GY):
        """``(Y, dX, dtheta)`` for output adjoint ``GY``."""
        X = self._check(theta, X)
        GY = np.ascontiguousarray(GY, dtype=np.float64).reshape(X.shape[0], self.n_out)
        return kernels.vjp(theta, self._sizes, self._acts, X, GY)

    def input_grad(self, theta, X):
        """``(y, dy/dx)`` for a scalar-output network."""
        Y, dX, _ = self.vjp(theta, X, np.ones((len(X), 1)))
        return Y[:, 0], dX

    def value_tangent_grad(self, theta, X, alpha, U):
        """``(Y, d/dtheta sum_i [alpha_i y_i + U_i . grad_x y_i])``."""
        if self.n_out != 1:
            raise ValueError("value_tangent_grad needs a scalar-output network")
        X = self._check(theta, X)
        U = np.ascontiguousarray(U, dtype=np.float64)
        if U.shape != X.shape:
            raise ValueError(f"tangent shape {U.shape} != input shape {X.shape}")
        alpha = np.ascontiguousarray(alpha, dtype=np.float64).reshape(-1)
        return kernels.value_tangent_grad(theta, self._sizes, self._acts, X, alpha, U)

    def to_graph(self, theta) -> ad.MlpParams:
        weights, biases = [], []
        for W, b in self.unflatten(np.asarray(theta, dtype=np.float64)):
            weights.append(ad.param(W))
            biases.append(ad.param(b))
        acts = [self.hidden] * (len(self.sizes) - 2) + [self.output]
        return ad.MlpParams(weights, biases, acts)

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([np.asarray(g).reshape(-1) for g in grads])


class Adam:
    """Adam over a flat parameter vector, updated in place."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), float(beta1), float(beta2), float(eps)
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        if grad.shape != theta.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
        self.t += 1
        kernels.adam_step(theta, np.ascontiguousarray(grad), self.m, self.v, float(self.t),
                          self.lr, self.beta1, self.beta2, self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


def soft_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    """``target <- (1 - tau) target + tau online`` in place; returns ``target``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if target.shape != online.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {online.shape}")
    if tau == 1.0:
        target[:] = online
    else:
        kernels.soft_update(target, online, float(tau))
    return target
