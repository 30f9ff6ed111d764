"""Synthetic data shared by several test modules."""
import numpy as np

from hsipest.sampling import SpectraTable


def two_gaussian_classes(n, m=20, sep=4.0, seed=0, noise=1.0):
    """Two Gaussian classes of ``n // 2`` rows in ``m`` dimensions.

    The means differ by ``sep`` noise standard deviations along one random
    unit direction.
    """
    rng = np.random.default_rng(seed)
    d = rng.normal(size=m)
    d /= np.linalg.norm(d)
    half = n // 2
    X = rng.normal(scale=noise, size=(2 * half, m)) + 5.0
    X[half:] += sep * noise * d
    y = np.array(["A"] * half + ["B"] * half)
    return X, y


def separable_table(n_factors=12, n_proto=40, m=137, seed=0):
    """Two linearly separable classes built from a finite prototype set.

    Each prototype is ``base + sum(+-1 * factor)`` for a random sign
    pattern; the second class also carries a band-block absorption. Every
    prototype appears three times, once in each venetian-blinds fold, so
    held-out rows always have an identical twin in the training folds.
    """
    rng = np.random.default_rng(seed)
    wl = 980.0 + 5.0 * np.arange(m)
    u = np.linspace(0, 1, m)
    base = 0.6 + 0.1 * np.sin(np.arange(m) / 9.0)
    factors = np.stack([np.cos(np.pi * (j + 1) * u + rng.uniform(0, np.pi))
                        for j in range(n_factors)]) * 0.002
    bump = np.zeros(m)
    bump[40:60] = 0.1
    signs = rng.choice([-1.0, 1.0], size=(2, n_proto, n_factors))
    n = 2 * n_proto * 3
    i = np.arange(n)
    cls = i % 2
    X = base + signs[cls, (i // 2) % n_proto] @ factors - np.outer(cls, bump)
    y = np.where(cls == 1, "BMSB", "BACKGROUND").astype(object)
    obj = lambda v: np.array([v] * n, dtype=object)
    return SpectraTable(X, y, obj("img"), i, np.zeros(n, int), obj("bark"), obj("G1"), wl)
