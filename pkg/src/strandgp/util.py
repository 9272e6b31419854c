"""Small shared helpers: RNG stream splitting and worker-count resolution.

Reproducibility rule used throughout the package: a run owns one integer
seed; independent tasks (Monte Carlo draws, chains, cross-validation folds)
receive child streams via ``numpy.random.SeedSequence(seed).spawn(n)``, so
results do not depend on scheduling or worker count.
"""

from __future__ import annotations

import os

import numpy as np

THREADS_ENV = "STRANDGP_THREADS"


def worker_count() -> int:
    """Number of worker threads for parallel sections (env-controlled, >= 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent generators from one seed via SeedSequence.spawn."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in seq.spawn(n)]
