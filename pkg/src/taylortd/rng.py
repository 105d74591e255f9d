import numpy as np


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox, 64-bit) generator owned by one experiment."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split(seed, n: int) -> list:
    """``n`` independent generators derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]
