"""Fused multilayer-perceptron kernels for the training hot path.

Parameters live in one flat float64 vector; layer ``k`` occupies a weight
block of shape ``(sizes[k], sizes[k+1])`` (row-major) followed by its bias.
Activation codes are per layer: 0 identity, 1 relu, 2 tanh.

The same source runs either compiled with ``numba.njit`` or as plain numpy.
Set ``TTD_NUMBA=0`` to force the numpy path (numba is also skipped when it
is not importable). Both paths are tested against each other and against
the graph engine in :mod:`taylortd.autodiff`.
"""

from __future__ import annotations

import os

import numpy as np

IDENTITY, RELU, TANH = 0, 1, 2

_want_numba = os.environ.get("TTD_NUMBA", "1").lower() not in ("0", "false", "no", "off")
try:
    if not _want_numba:
        raise ImportError
    import numba

    USE_NUMBA = True
except ImportError:  # pragma: no cover - depends on the environment
    numba = None
    USE_NUMBA = False


def _jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


@_jit
def _act(Z, code):
    if code == RELU:
        return np.maximum(Z, 0.0)
    if code == TANH:
        return np.tanh(Z)
    return Z.copy()


@_jit
def _dact(Z, H, code):
    if code == RELU:
        return (Z > 0.0) * 1.0
    if code == TANH:
        return 1.0 - H * H
    return np.ones_like(Z)


@_jit
def _ddact(Z, H, code):
    if code == TANH:
        return -2.0 * H * (1.0 - H * H)
    return np.zeros_like(Z)


@_jit
def _weights(theta, sizes, k, off):
    ni = sizes[k]
    no = sizes[k + 1]
    W = theta[off:off + ni * no].reshape((ni, no))
    b = theta[off + ni * no:off + ni * no + no]
    return W, b, off + ni * no + no


@_jit
def forward(theta, sizes, acts, X):
    """Network output for a batch ``X`` of shape (B, sizes[0])."""
    H = X
    off = 0
    for k in range(sizes.shape[0] - 1):
        W, b, off = _weights(theta, sizes, k, off)
        H = _act(np.dot(H, W) + b, acts[k])
    return H


@_jit
def vjp(theta, sizes, acts, X, GY):
    """Reverse pass for output adjoint ``GY``.

    Returns ``(Y, dX, dtheta)`` where ``dX = GY . dY/dX`` row by row and
    ``dtheta`` is the adjoint summed over the batch.
    """
    L = sizes.shape[0] - 1
    Hs = [X]
    Zs = [X]
    off = 0
    for k in range(L):
        W, b, off = _weights(theta, sizes, k, off)
        Z = np.dot(Hs[k], W) + b
        Zs.append(Z)
        Hs.append(_act(Z, acts[k]))
    dtheta = np.zeros_like(theta)
    Hbar = GY
    for k in range(L - 1, -1, -1):
        off -= sizes[k] * sizes[k + 1] + sizes[k + 1]
        W, b, _ = _weights(theta, sizes, k, off)
        Zbar = Hbar * _dact(Zs[k + 1], Hs[k + 1], acts[k])
        n = sizes[k] * sizes[k + 1]
        dtheta[off:off + n] = np.dot(Hs[k].T, Zbar).ravel()
        dtheta[off + n:off + n + sizes[k + 1]] = Zbar.sum(axis=0)
        Hbar = np.dot(Zbar, W.T)
    return Hs[L], Hbar, dtheta


@_jit
def value_tangent_grad(theta, sizes, acts, X, alpha, U):
    """Parameter gradient of ``sum_i alpha_i y(x_i) + U_i . grad_x y(x_i)``.

    For a scalar-output network. The second term is differentiated through
    the input gradient (reverse over forward-mode), which is exactly what a
    loss containing ``stopgrad(v) . grad_x Q`` needs. Returns ``(Y, dtheta)``.
    """
    L = sizes.shape[0] - 1
    Hs = [X]
    Ts = [U]
    Zs = [X]
    Zts = [U]
    off = 0
    for k in range(L):
        W, b, off = _weights(theta, sizes, k, off)
        Z = np.dot(Hs[k], W) + b
        Zt = np.dot(Ts[k], W)
        H = _act(Z, acts[k])
        Zs.append(Z)
        Zts.append(Zt)
        Hs.append(H)
        Ts.append(_dact(Z, H, acts[k]) * Zt)
    dtheta = np.zeros_like(theta)
    Hbar = alpha.reshape((-1, 1)) * np.ones_like(Hs[L])
    Tbar = np.ones_like(Ts[L])
    for k in range(L - 1, -1, -1):
        off -= sizes[k] * sizes[k + 1] + sizes[k + 1]
        W, b, _ = _weights(theta, sizes, k, off)
        s1 = _dact(Zs[k + 1], Hs[k + 1], acts[k])
        Zbar = Hbar * s1
        if acts[k] == TANH:  # relu and identity have no curvature term
            Zbar += Tbar * _ddact(Zs[k + 1], Hs[k + 1], acts[k]) * Zts[k + 1]
        Ztbar = Tbar * s1
        n = sizes[k] * sizes[k + 1]
        dtheta[off:off + n] = (np.dot(Hs[k].T, Zbar) + np.dot(Ts[k].T, Ztbar)).ravel()
        dtheta[off + n:off + n + sizes[k + 1]] = Zbar.sum(axis=0)
        Hbar = np.dot(Zbar, W.T)
        Tbar = np.dot(Ztbar, W.T)
    return Hs[L], dtheta


@_jit
def adam_step(theta, grad, m, v, t, lr, beta1, beta2, eps):
    """In-place bias-corrected Adam descent step (``t`` is the 1-based step)."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(theta.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        theta[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@_jit
def soft_update(target, online, tau):
    for i in range(target.shape[0]):
        target[i] = (1.0 - tau) * target[i] + tau * online[i]


@_jit
def pendulum_dynamics(th, thdot, u, g, m, l, dt, max_speed, max_torque):
    """One step of the standard pendulum; returns (th', thdot', reward)."""
    u = min(max(u, -max_torque), max_torque)
    wrapped = ((th + np.pi) % (2.0 * np.pi)) - np.pi
    reward = -(wrapped * wrapped + 0.1 * thdot * thdot + 0.001 * u * u)
    newthdot = thdot + (3.0 * g / (2.0 * l) * np.sin(th) + 3.0 / (m * l * l) * u) * dt
    newthdot = min(max(newthdot, -max_speed), max_speed)
    return th + newthdot * dt, newthdot, reward
