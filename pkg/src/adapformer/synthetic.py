"""Synthetic multivariate series with known channel partners."""
from __future__ import annotations

import numpy as np


def paired_sinusoids(n_rows: int = 2000, n_pairs: int = 4, noise: float = 0.2,
                     seed: int = 0, periods=None):
    """Channels ``2p`` and ``2p+1`` share the latent sinusoid of pair ``p``.

    Each channel adds its own Gaussian noise of std ``noise``. Returns the
    (n_rows, 2*n_pairs) values and the partner index of every channel.
    """
    rng = np.random.default_rng(seed)
    if periods is None:
        periods = [12.0 + 7.3 * p for p in range(n_pairs)]
    t = np.arange(n_rows, dtype=np.float64)
    cols = []
    for p in range(n_pairs):
        phase = rng.uniform(0, 2 * np.pi)
        latent = np.sin(2 * np.pi * t / periods[p] + phase)
        for _ in range(2):
            cols.append(latent + noise * rng.standard_normal(n_rows))
    partner = np.array([c ^ 1 for c in range(2 * n_pairs)])
    return np.stack(cols, axis=1), partner
