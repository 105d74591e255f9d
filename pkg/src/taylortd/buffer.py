from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """FIFO ring buffer of transitions with running input/delta statistics.

    Sampling is uniform over stored transitions, without replacement inside a
    batch. The running sums feed the model-input normalizer.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.inserted = 0
        self.size = 0
        d_in = obs_dim + act_dim
        self._sum_in = np.zeros(d_in)
        self._sq_in = np.zeros(d_in)
        self._sum_d = np.zeros(obs_dim)
        self._sq_d = np.zeros(obs_dim)

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next, done=False) -> None:
        i = self.inserted % self.capacity
        s = np.asarray(s, dtype=np.float64).reshape(self.obs_dim)
        a = np.asarray(a, dtype=np.float64).reshape(self.act_dim)
        s_next = np.asarray(s_next, dtype=np.float64).reshape(self.obs_dim)
        if not np.isfinite(r):
            raise ValueError("non-finite reward")
        if self.size == self.capacity:
            self._account(self.s[i], self.a[i], self.s_next[i], -1.0)
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self._account(s, a, s_next, 1.0)
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def _account(self, s, a, s_next, sign):
        x = np.concatenate([s, a])
        d = s_next - s
        self._sum_in += sign * x
        self._sq_in += sign * x * x
        self._sum_d += sign * d
        self._sq_d += sign * d * d

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if batch_size > self.size:
            raise ValueError(f"batch of {batch_size} requested from {self.size} transitions")
        return rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]

    def input_stats(self):
        """Mean/std of concatenated (s, a) and of s' - s over stored transitions."""
        n = max(self.size, 1)
        m_in = self._sum_in / n
        m_d = self._sum_d / n
        sd_in = np.sqrt(np.maximum(self._sq_in / n - m_in ** 2, 0.0))
        sd_d = np.sqrt(np.maximum(self._sq_d / n - m_d ** 2, 0.0))
        return m_in, np.maximum(sd_in, 1e-3), m_d, np.maximum(sd_d, 1e-6)
