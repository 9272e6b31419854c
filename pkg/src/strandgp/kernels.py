"""Stationary Matern covariance, per-strand Gram matrices, and the prior
covariance of the differential-effect vector.

Each strand carries its own hyperparameters (process variance, smoothness,
correlation length).  Strands are independent a priori, so the latent-effect
covariance over all loci is block diagonal; the covariance of the m-vector
of unit effects is the congruence ``P W P^T`` with the incidence matrix P.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kv

from .data import DesignMatrix
from .errors import NumericalError
from .util import spawn_rngs, worker_count


@dataclass(frozen=True)
class StrandHyperParams:
    """Matern hyperparameters of one strand.

    Attributes:
        varrho2: process variance (zero-distance covariance).
        nu: smoothness.
        rho: correlation length, in the same unit as coordinates (base pairs).
    """

    varrho2: float
    nu: float
    rho: float

    def __post_init__(self):
        for name in ("varrho2", "nu", "rho"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class JitterPolicy:
    """Escalating diagonal jitter for Cholesky certification.

    Amounts are relative to the process variance: start at ``initial``,
    multiply by ``growth`` on failure, give up beyond ``maximum``.
    """

    initial: float = 1e-10
    growth: float = 2.0
    maximum: float = 1e-6


DEFAULT_JITTER = JitterPolicy()


def matern_correlation(d, nu: float) -> np.ndarray:
    """Matern correlation (variance-free part) at distances ``d >= 0``.

    Evaluated in log space through the modified Bessel function of the
    second kind.  Where the Bessel factor overflows (tiny scaled distance,
    large smoothness) the correlation is 1 to double precision and is
    returned as such; underflow of the far tail returns 0.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    x = np.sqrt(2.0 * nu) * d
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            bessel = kv(nu, xp)
            logc = (1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(xp) + np.log(bessel)
            val = np.exp(logc)
        val = np.where(np.isposinf(bessel), 1.0, val)  # x -> 0 limit
        val = np.where(bessel == 0.0, 0.0, val)        # far-tail underflow
        if not np.all(np.isfinite(val)):
            raise NumericalError(f"Matern evaluation left its numerical domain (nu={nu})")
        out[pos] = np.minimum(val, 1.0)
    return out


def matern_cov(d, h: StrandHyperParams):
    """Matern covariance at distance(s) ``d`` (scalar in, scalar out).

    Returns ``varrho2`` at distance zero and decays monotonically with
    distance; the decay rate is set by ``rho`` (distances are measured in
    the same unit, base pairs) and the shape near zero by ``nu``.
    """
    d = np.asarray(d, dtype=float)
    scalar = d.ndim == 0
    value = h.varrho2 * matern_correlation(d / h.rho, h.nu)
    return float(value) if scalar else value


def cholesky_with_jitter(matrix: np.ndarray, scale: float,
                         policy: JitterPolicy = DEFAULT_JITTER) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``matrix``, adding escalating diagonal jitter on failure.

    Args:
        matrix: symmetric matrix to factor (not modified).
        scale: reference magnitude; jitter amounts are ``policy`` fractions of it.

    Returns:
        (lower Cholesky factor, jitter actually added to the diagonal).

    Raises:
        NumericalError: factorization still fails at the jitter budget, or
            the reference scale is not a positive finite number.
    """
    if not (np.isfinite(scale) and scale > 0.0):
        raise NumericalError(f"invalid jitter reference scale {scale!r}")
    try:
        return np.linalg.cholesky(matrix), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = policy.initial * scale
    limit = policy.maximum * scale
    eye = np.eye(matrix.shape[0])
    while jitter <= limit:
        try:
            return np.linalg.cholesky(matrix + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= policy.growth
    raise NumericalError(
        f"matrix not positive definite within jitter budget ({policy.maximum:g} x scale)"
    )


def strand_cov(coords, h: StrandHyperParams,
               policy: JitterPolicy = DEFAULT_JITTER) -> tuple[np.ndarray, float]:
    """Matern Gram matrix over one strand's coordinates, certified PD.

    Args:
        coords: nonempty, distinct 1-D coordinates.
        h: strand hyperparameters.
        policy: jitter escalation schedule (relative to ``h.varrho2``).

    Returns:
        (covariance matrix with any jitter already on its diagonal, jitter used).

    Raises:
        NumericalError: PD not attainable within the jitter budget.
        ValueError: empty or duplicated coordinates.
    """
    coords = np.asarray(coords, dtype=float).ravel()
    if coords.size == 0:
        raise ValueError("coords must be nonempty")
    if np.unique(coords).size != coords.size:
        raise ValueError("coords must be distinct")
    dist = np.abs(coords[:, None] - coords[None, :])
    cov = h.varrho2 * matern_correlation(dist / h.rho, h.nu)
    cov = 0.5 * (cov + cov.T)
    _, jitter = cholesky_with_jitter(cov, h.varrho2, policy)
    if jitter > 0.0:
        cov = cov + jitter * np.eye(cov.shape[0])
    return cov, jitter


@dataclass(frozen=True)
class PriorCovariance:
    """Per-strand blocks W and the induced unit-effect covariance P W P^T."""

    w_blocks: tuple[np.ndarray, ...]
    psi_cov: np.ndarray
    jitter_used: float


def prior_cov_psi(design: DesignMatrix, hypers,
                  policy: JitterPolicy = DEFAULT_JITTER) -> PriorCovariance:
    """Assemble the blocks W and the m x m prior covariance of the effects.

    ``hypers`` supplies one StrandHyperParams per strand, in the design's
    strand order.  Cross-strand covariance is zero, so the congruence is
    accumulated strand by strand through the design's column slices.
    """
    strands = design.annotation.strands
    if len(hypers) != len(strands):
        raise ValueError(f"expected {len(strands)} strand hyperparameters, got {len(hypers)}")
    m = design.n_mirnas
    psi_cov = np.zeros((m, m))
    blocks = []
    worst_jitter = 0.0
    p = design.p.astype(float)
    for strand, h, cols in zip(strands, hypers, design.strand_slices):
        block, jitter = strand_cov(strand.coordinates, h, policy)
        blocks.append(block)
        worst_jitter = max(worst_jitter, jitter)
        p_block = p[:, cols]
        psi_cov += p_block @ block @ p_block.T
    psi_cov = 0.5 * (psi_cov + psi_cov.T)
    return PriorCovariance(w_blocks=tuple(blocks), psi_cov=psi_cov, jitter_used=worst_jitter)


def sample_psi_prior(prior_cov: PriorCovariance, n_draws: int, rng,
                     policy: JitterPolicy = DEFAULT_JITTER) -> np.ndarray:
    """Draw ``n_draws`` effect vectors from N(0, psi_cov); rows are draws."""
    cov = prior_cov.psi_cov
    scale = float(np.max(np.diag(cov)))
    chol, _ = cholesky_with_jitter(cov, scale, policy)
    normals = rng.standard_normal((n_draws, cov.shape[0]))
    return normals @ chol.T


def _correlation_from_cov(cov: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def estimate_prior_correlation(design: DesignMatrix, draw_hypers, n_mc: int, seed,
                               policy: JitterPolicy = DEFAULT_JITTER,
                               max_skip_fraction: float = 0.01) -> np.ndarray:
    """Monte Carlo estimate of the prior correlation matrix of the effects.

    For each of ``n_mc`` draws, hyperparameters come from ``draw_hypers(rng)``,
    the induced covariance P W P^T is converted to a correlation matrix, and
    the entrywise average over draws is returned (correlations, not
    covariances, are averaged: the group-formation threshold works on the
    correlation scale and the draws have heterogeneous variances).

    Draw i uses the i-th child stream of ``seed``, so the estimate is
    independent of chunking or worker count.

    Args:
        draw_hypers: callable(rng) -> sequence of StrandHyperParams.
        n_mc: number of draws, at least 1000.
        seed: base seed (int or SeedSequence).
        max_skip_fraction: abort if more than this fraction of draws fails PD.

    Returns:
        m x m correlation matrix with unit diagonal, entries in [-1, 1].
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000 for a stable percentile threshold")
    rngs = spawn_rngs(seed, n_mc)
    m = design.n_mirnas

    def accumulate(indices):
        acc = np.zeros((m, m))
        bad = 0
        for i in indices:
            hypers = draw_hypers(rngs[i])
            try:
                pc = prior_cov_psi(design, hypers, policy)
            except NumericalError:
                bad += 1
                continue
            acc += _correlation_from_cov(pc.psi_cov)
        return acc, bad

    # Fixed-size chunks summed in chunk order keep the result bit-identical
    # for any worker count.
    chunk_size = 256
    chunks = [range(start, min(start + chunk_size, n_mc)) for start in range(0, n_mc, chunk_size)]
    workers = worker_count()
    if workers == 1:
        results = map(accumulate, chunks)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(accumulate, chunks))
    total = np.zeros((m, m))
    skipped = 0
    for acc, bad in results:
        total += acc
        skipped += bad

    if skipped > max_skip_fraction * n_mc:
        raise NumericalError(
            f"{skipped}/{n_mc} prior draws failed PD certification (> {max_skip_fraction:.0%})"
        )
    corr = total / (n_mc - skipped)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)
