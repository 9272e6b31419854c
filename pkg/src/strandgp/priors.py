"""Hyperprior construction, the model state, and the marginalized log posterior.

The error covariance of the differential observations carries an
inverse-Wishart prior with identity-proportional scale ``delta2 * I`` and is
integrated out analytically, leaving a posterior over the effect vector psi,
the per-strand Matern hyperparameters, and delta2:

    -0.5 psi' (PWP')^{-1} psi - 0.5 log|PWP'|
    - m n log(delta) - ((ups + n)/2) log|I_n + (Z - M)(Z - M)' / delta2|
    + sum of hyperprior log densities,   M having every row equal to psi'.

Hyperpriors are specified by (mode, variance) pairs and solved for their
natural parameters by one-dimensional root finding; delta2's inverse-gamma
parameters come from moment matching on the per-unit sample variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.special import gammaln, polygamma

from .data import DesignMatrix
from .errors import DataError, NumericalError
from .kernels import (
    DEFAULT_JITTER,
    JitterPolicy,
    StrandHyperParams,
    cholesky_with_jitter,
    matern_correlation,
)
from .tmcmc import TargetModel

ROUND_TRIP_RTOL = 1e-8
LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# (mode, variance) -> natural parameter solvers
# ---------------------------------------------------------------------------

def solve_ig(mode: float, variance: float) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) with the given mode and variance.

    Solves shape a > 2 from variance/mode^2 = (a+1)^2 / ((a-1)^2 (a-2)),
    then scale b = mode (a + 1).  The forward formulas are re-evaluated and
    must round-trip within 1e-8 relative error.
    """
    if mode <= 0 or variance <= 0:
        raise ValueError("mode and variance must be positive")
    ratio = variance / mode**2

    # Root search in u = log(shape - 2): keeps relative precision when huge
    # variances push the shape arbitrarily close to 2.
    def gap(u):
        t = math.exp(u)
        a = 2.0 + t
        return (a + 1.0) ** 2 / ((a - 1.0) ** 2 * t) - ratio

    hi = 1.0
    while gap(hi) > 0:
        hi += 1.0
        if hi > 700.0:
            raise ValueError("no inverse-gamma solution with shape > 2")
    shape = 2.0 + math.exp(brentq(gap, -700.0, hi, xtol=1e-13, rtol=8.9e-16))
    scale = mode * (shape + 1.0)
    mode_back = scale / (shape + 1.0)
    var_back = scale**2 / ((shape - 1.0) ** 2 * (shape - 2.0))
    # The variance is exact only up to the representability of shape - 2.
    var_tol = max(ROUND_TRIP_RTOL, 8.0 * np.finfo(float).eps / (shape - 2.0))
    if abs(mode_back - mode) > ROUND_TRIP_RTOL * mode or abs(var_back - variance) > var_tol * variance:
        raise ValueError(f"inverse-gamma solver failed round trip for mode={mode}, variance={variance}")
    return shape, scale


def solve_lognormal(mode: float, variance: float) -> tuple[float, float]:
    """Lognormal (location mu, scale sigma) with the given mode and variance.

    With t = sigma^2, the mode constraint gives mu = log(mode) + t and the
    variance becomes mode^2 (e^t - 1) e^{3t}; t is found by root search and
    the pair is forward-checked to 1e-8 relative error.
    """
    if mode <= 0 or variance <= 0:
        raise ValueError("mode and variance must be positive")
    ratio = variance / mode**2

    def gap(t):
        return np.expm1(t) * np.exp(3.0 * t) - ratio

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("no lognormal scale solution")
    t = brentq(gap, 1e-300, hi, xtol=1e-300, rtol=8.9e-16)
    mu = math.log(mode) + t
    sigma = math.sqrt(t)
    mode_back = math.exp(mu - t)
    var_back = np.expm1(t) * math.exp(2.0 * mu + t)
    if abs(mode_back - mode) > ROUND_TRIP_RTOL * mode or abs(var_back - variance) > ROUND_TRIP_RTOL * variance:
        raise ValueError(f"lognormal solver failed round trip for mode={mode}, variance={variance}")
    return mu, sigma


def empirical_bayes_delta2(z: np.ndarray) -> tuple[float, float]:
    """Inverse-gamma parameters for delta2 by moment matching on column variances.

    The mean and variance of the per-unit sample variances {s_i^2} are
    matched to the inverse-gamma mean and variance, giving
    shape = 2 + mean^2/var and scale = mean (shape - 1).  When the variance
    match is infeasible (all s_i^2 equal), falls back to (3, 2 mean), whose
    prior mean equals the observed mean.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DataError("need at least two rows to form sample variances")
    s2 = z.var(axis=0, ddof=1)
    mean = float(s2.mean())
    if mean <= 0:
        raise DataError("all-constant data: column variances are zero")
    var = float(s2.var(ddof=1)) if s2.size > 1 else 0.0
    if var <= 0:
        return 3.0, 2.0 * mean
    shape = 2.0 + mean**2 / var
    scale = mean * (shape - 1.0)
    return shape, scale


# ---------------------------------------------------------------------------
# Log densities (plain formulas; kept scipy-free for the sampler's hot path)
# ---------------------------------------------------------------------------

def log_invgamma_pdf(x, shape: float, scale: float):
    x = np.asarray(x, dtype=float)
    return shape * math.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def log_lognormal_pdf(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    logx = np.log(x)
    return -logx - np.log(sigma) - 0.5 * LOG2PI - (logx - mu) ** 2 / (2.0 * np.asarray(sigma) ** 2)


# ---------------------------------------------------------------------------
# Hyperprior specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperPriorSpec:
    """All hyperprior parameters plus the two documented reading switches.

    Attributes:
        varrho2_prior: inverse-gamma (shape, scale); applies to the process
            variance itself, or to its square root when
            ``varrho_prior_on == "varrho"``.
        nu_prior: lognormal (mu, sigma), shared by all strands.
        rho_priors: per-strand lognormal (mu, sigma).
        delta2_prior: inverse-gamma (shape, scale) from empirical Bayes.
        dof: inverse-Wishart degrees of freedom (number of units + 3).
        varrho_prior_on: "varrho2" (default) or "varrho".
        rho_prior_variance_scale: "natural" solves (mode, variance) on the
            correlation-length scale; "log" reads the variance as the
            variance of log rho around log(mode).
    """

    varrho2_prior: tuple[float, float]
    nu_prior: tuple[float, float]
    rho_priors: tuple[tuple[float, float], ...]
    delta2_prior: tuple[float, float]
    dof: int
    varrho_prior_on: str = "varrho2"
    rho_prior_variance_scale: str = "natural"

    @classmethod
    def from_data(cls, design: DesignMatrix, z: np.ndarray,
                  varrho2_mode: float = 1.0, varrho2_variance: float = 100.0,
                  nu_mode: float = 1.0, nu_variance: float = 100.0,
                  rho_variance: float = 1000.0,
                  varrho_prior_on: str = "varrho2",
                  rho_prior_variance_scale: str = "natural") -> "HyperPriorSpec":
        """Standard construction: vague modes at 1, strand-length modes for rho,
        delta2 from the data, degrees of freedom m + 3."""
        if varrho_prior_on not in ("varrho2", "varrho"):
            raise ValueError(f"varrho_prior_on must be 'varrho2' or 'varrho', got {varrho_prior_on!r}")
        if rho_prior_variance_scale not in ("natural", "log"):
            raise ValueError("rho_prior_variance_scale must be 'natural' or 'log'")
        rho_priors = []
        for strand in design.annotation.strands:
            if rho_prior_variance_scale == "natural":
                rho_priors.append(solve_lognormal(strand.length, rho_variance))
            else:
                rho_priors.append((math.log(strand.length), math.sqrt(rho_variance)))
        return cls(
            varrho2_prior=solve_ig(varrho2_mode, varrho2_variance),
            nu_prior=solve_lognormal(nu_mode, nu_variance),
            rho_priors=tuple(rho_priors),
            delta2_prior=empirical_bayes_delta2(z),
            dof=z.shape[1] + 3,
            varrho_prior_on=varrho_prior_on,
            rho_prior_variance_scale=rho_prior_variance_scale,
        )

    @property
    def n_strands(self) -> int:
        return len(self.rho_priors)

    # -- densities ---------------------------------------------------------

    def log_density_varrho2(self, varrho2):
        a, b = self.varrho2_prior
        varrho2 = np.asarray(varrho2, dtype=float)
        if self.varrho_prior_on == "varrho":
            varrho = np.sqrt(varrho2)
            return log_invgamma_pdf(varrho, a, b) - np.log(2.0 * varrho)
        return log_invgamma_pdf(varrho2, a, b)

    def log_density_nu(self, nu):
        mu, sigma = self.nu_prior
        return log_lognormal_pdf(nu, mu, sigma)

    def log_density_rho(self, rho):
        mus = np.array([p[0] for p in self.rho_priors])
        sigmas = np.array([p[1] for p in self.rho_priors])
        return log_lognormal_pdf(rho, mus, sigmas)

    def log_density_delta2(self, delta2):
        a, b = self.delta2_prior
        return log_invgamma_pdf(delta2, a, b)

    def log_density_hypers(self, varrho2s, nus, rhos) -> float:
        return float(
            np.sum(self.log_density_varrho2(varrho2s))
            + np.sum(self.log_density_nu(nus))
            + np.sum(self.log_density_rho(rhos))
        )

    # -- draws -------------------------------------------------------------

    def draw_strand_hypers(self, rng) -> list[StrandHyperParams]:
        k = self.n_strands
        a, b = self.varrho2_prior
        base = 1.0 / rng.gamma(a, 1.0 / b, size=k)  # inverse-gamma draws
        varrho2 = base**2 if self.varrho_prior_on == "varrho" else base
        mu, sigma = self.nu_prior
        nus = np.exp(mu + sigma * rng.standard_normal(k))
        rhos = np.array([
            math.exp(m_ + s_ * rng.standard_normal()) for m_, s_ in self.rho_priors
        ])
        return [StrandHyperParams(v, n_, r_) for v, n_, r_ in zip(varrho2, nus, rhos)]

    def draw_delta2(self, rng) -> float:
        a, b = self.delta2_prior
        return float(1.0 / rng.gamma(a, 1.0 / b))

    # -- moments and initial values ----------------------------------------

    def modal_hypers(self) -> list[StrandHyperParams]:
        """Prior-modal hyperparameters (median for 'log'-scale rho, whose
        lognormal mode is numerically degenerate)."""
        a, b = self.varrho2_prior
        base_mode = b / (a + 1.0)
        varrho2 = base_mode**2 if self.varrho_prior_on == "varrho" else base_mode
        mu, sigma = self.nu_prior
        nu = math.exp(mu - sigma**2)
        out = []
        for m_, s_ in self.rho_priors:
            rho = math.exp(m_) if self.rho_prior_variance_scale == "log" else math.exp(m_ - s_**2)
            out.append(StrandHyperParams(varrho2, nu, rho))
        return out

    def mean_delta2(self) -> float:
        a, b = self.delta2_prior
        if a <= 1.0:
            raise NumericalError("delta2 prior mean undefined (shape <= 1)")
        return b / (a - 1.0)

    def log_scale_sds(self) -> dict:
        """Prior standard deviations of the log-scale parameters (proposal scales)."""
        a, _ = self.varrho2_prior
        sd_log_ig = math.sqrt(float(polygamma(1, a)))
        sd_varrho2 = 2.0 * sd_log_ig if self.varrho_prior_on == "varrho" else sd_log_ig
        ad, _ = self.delta2_prior
        return {
            "log_varrho2": sd_varrho2,
            "log_nu": self.nu_prior[1],
            "log_rho": np.array([s_ for _, s_ in self.rho_priors]),
            "log_delta2": math.sqrt(float(polygamma(1, ad))),
        }

    def to_dict(self) -> dict:
        return {
            "varrho2_prior": list(self.varrho2_prior),
            "nu_prior": list(self.nu_prior),
            "rho_priors": [list(p) for p in self.rho_priors],
            "delta2_prior": list(self.delta2_prior),
            "dof": self.dof,
            "varrho_prior_on": self.varrho_prior_on,
            "rho_prior_variance_scale": self.rho_prior_variance_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperPriorSpec":
        return cls(
            varrho2_prior=tuple(d["varrho2_prior"]),
            nu_prior=tuple(d["nu_prior"]),
            rho_priors=tuple(tuple(p) for p in d["rho_priors"]),
            delta2_prior=tuple(d["delta2_prior"]),
            dof=int(d["dof"]),
            varrho_prior_on=d.get("varrho_prior_on", "varrho2"),
            rho_prior_variance_scale=d.get("rho_prior_variance_scale", "natural"),
        )


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelState:
    """One point in the sampled parameter space."""

    psi: np.ndarray
    hypers: tuple[StrandHyperParams, ...]
    delta2: float

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        if not np.all(np.isfinite(psi)):
            raise ValueError("psi must be finite")
        if not (np.isfinite(self.delta2) and self.delta2 > 0):
            raise ValueError("delta2 must be positive and finite")
        object.__setattr__(self, "psi", psi)

    @property
    def n_strands(self) -> int:
        return len(self.hypers)

    def to_vector(self) -> np.ndarray:
        """Unconstrained vector [psi, log varrho2, log nu, log rho, log delta2]."""
        arrs = [self.psi]
        for attr in ("varrho2", "nu", "rho"):
            arrs.append(np.log([getattr(h, attr) for h in self.hypers]))
        arrs.append(np.array([math.log(self.delta2)]))
        return np.concatenate(arrs)

    @classmethod
    def from_vector(cls, x: np.ndarray, m: int, k: int) -> "ModelState":
        psi, varrho2, nu, rho, delta2 = split_vector(np.asarray(x, dtype=float), m, k)
        hypers = tuple(StrandHyperParams(v, n_, r_) for v, n_, r_ in zip(varrho2, nu, rho))
        return cls(psi=psi, hypers=hypers, delta2=float(delta2))


def split_vector(x: np.ndarray, m: int, k: int):
    """Decode the unconstrained layout into natural-scale arrays."""
    if x.shape != (m + 3 * k + 1,):
        raise ValueError(f"expected vector of length {m + 3 * k + 1}, got {x.shape}")
    psi = x[:m]
    with np.errstate(over="ignore"):
        varrho2 = np.exp(x[m:m + k])
        nu = np.exp(x[m + k:m + 2 * k])
        rho = np.exp(x[m + 2 * k:m + 3 * k])
        delta2 = float(np.exp(x[-1]))
    return psi, varrho2, nu, rho, delta2


def vector_names(mirna_names, strand_ids) -> list[str]:
    names = [f"psi:{name}" for name in mirna_names]
    for prefix in ("log_varrho2", "log_nu", "log_rho"):
        names.extend(f"{prefix}:{sid}" for sid in strand_ids)
    names.append("log_delta2")
    return names


def parameter_blocks(m: int, k: int) -> list[np.ndarray]:
    """Adaptation blocks: effects, strand hyperparameters, noise scale."""
    return [
        np.arange(m),
        np.arange(m, m + 3 * k),
        np.array([m + 3 * k]),
    ]


# ---------------------------------------------------------------------------
# Log posterior
# ---------------------------------------------------------------------------

class _Precomputed:
    """Geometry and data products reused across posterior evaluations."""

    def __init__(self, z: np.ndarray, design: DesignMatrix):
        self.z = np.asarray(z, dtype=float)
        self.n, self.m = self.z.shape
        if self.m != design.n_mirnas:
            raise DataError(f"z has {self.m} columns but design has {design.n_mirnas} units")
        self.design = design
        self.zzt = self.z @ self.z.T
        self.dists = [np.abs(s.coordinates[:, None] - s.coordinates[None, :])
                      for s in design.annotation.strands]
        self.p_slices = [design.p[:, cols].astype(float) for cols in design.strand_slices]


def _psi_cov_raw(pre: _Precomputed, varrho2s, nus, rhos) -> np.ndarray:
    cov = np.zeros((pre.m, pre.m))
    for dist, pb, v, n_, r_ in zip(pre.dists, pre.p_slices, varrho2s, nus, rhos):
        block = v * matern_correlation(dist / r_, n_)
        cov += pb @ block @ pb.T
    return 0.5 * (cov + cov.T)


def _log_posterior_raw(pre: _Precomputed, priors: HyperPriorSpec,
                       psi, varrho2s, nus, rhos, delta2,
                       include_likelihood: bool = True,
                       policy: JitterPolicy = DEFAULT_JITTER) -> float:
    valid = (np.all(np.isfinite(varrho2s)) and np.all(varrho2s > 0)
             and np.all(np.isfinite(nus)) and np.all(nus > 0)
             and np.all(np.isfinite(rhos)) and np.all(rhos > 0)
             and np.isfinite(delta2) and delta2 > 0)
    if not valid:
        raise NumericalError("hyperparameters left their numerical domain")
    cov = _psi_cov_raw(pre, varrho2s, nus, rhos)
    scale = float(np.max(np.diag(cov)))
    chol, _ = cholesky_with_jitter(cov, scale, policy)
    y = solve_triangular(chol, psi, lower=True, check_finite=False)
    quad = float(y @ y)
    logdet_cov = 2.0 * float(np.sum(np.log(np.diag(chol))))
    lp = -0.5 * quad - 0.5 * logdet_cov
    lp += priors.log_density_hypers(varrho2s, nus, rhos)
    lp += float(priors.log_density_delta2(delta2))

    if include_likelihood:
        n, m, ups = pre.n, pre.m, priors.dof
        u = pre.z @ psi
        s = float(psi @ psi)
        gram = pre.zzt - u[:, None] - u[None, :] + s
        b = np.eye(n) + gram / delta2
        try:
            bchol = np.linalg.cholesky(b)
        except np.linalg.LinAlgError:
            raise NumericalError("likelihood Gram matrix lost positive definiteness")
        logdet_b = 2.0 * float(np.sum(np.log(np.diag(bchol))))
        lp += -0.5 * m * n * math.log(delta2) - 0.5 * (ups + n) * logdet_b
    return lp


def log_posterior(state: ModelState, z: np.ndarray, design: DesignMatrix,
                  priors: HyperPriorSpec,
                  policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """Joint log posterior of (psi, hyperparameters, delta2), error covariance
    integrated out, up to one additive constant fixed per dataset.

    Determinants and quadratic forms go through Cholesky factorizations: the
    prior term on the m x m effect covariance, the likelihood term on the
    n x n Gram form (n << m).  A positive-definiteness failure beyond the
    jitter budget or a non-finite result returns -inf, which a sampler
    treats as certain rejection.
    """
    pre = _Precomputed(z, design)
    varrho2s = np.array([h.varrho2 for h in state.hypers])
    nus = np.array([h.nu for h in state.hypers])
    rhos = np.array([h.rho for h in state.hypers])
    try:
        lp = _log_posterior_raw(pre, priors, state.psi, varrho2s, nus, rhos, state.delta2,
                                include_likelihood=True, policy=policy)
    except NumericalError:
        return -math.inf
    return lp if np.isfinite(lp) else -math.inf


def make_posterior_model(z: np.ndarray, design: DesignMatrix, priors: HyperPriorSpec,
                         include_likelihood: bool = True,
                         policy: JitterPolicy = DEFAULT_JITTER) -> TargetModel:
    """Bundle the posterior into an unconstrained sampling target.

    The target vector is [psi, log varrho2 (k), log nu (k), log rho (k),
    log delta2]; the log Jacobian of the exponential map (the sum of the
    log-scale entries' natural values, i.e. of the vector tail) is added so
    the chain targets the posterior of the natural parameters.

    With ``include_likelihood=False`` the data term is dropped and the chain
    targets the joint prior (used for sampler validation).

    Initial point: psi at the column means of z (zeros without likelihood),
    hyperparameters at their prior modes, delta2 at its prior mean.
    """
    pre = _Precomputed(z, design)
    m, k = pre.m, design.n_strands
    if priors.n_strands != k:
        raise DataError(f"priors cover {priors.n_strands} strands, design has {k}")

    def log_target(x: np.ndarray) -> float:
        psi, varrho2s, nus, rhos, delta2 = split_vector(x, m, k)
        try:
            lp = _log_posterior_raw(pre, priors, psi, varrho2s, nus, rhos, delta2,
                                    include_likelihood=include_likelihood, policy=policy)
        except NumericalError:
            return -math.inf
        jac = float(np.sum(x[m:]))
        out = lp + jac
        return out if np.isfinite(out) else -math.inf

    modal = priors.modal_hypers()
    psi0 = pre.z.mean(axis=0) if include_likelihood else np.zeros(m)
    x0 = ModelState(psi=psi0, hypers=tuple(modal), delta2=priors.mean_delta2()).to_vector()

    sds = priors.log_scale_sds()
    cov0 = _psi_cov_raw(pre,
                        np.array([h.varrho2 for h in modal]),
                        np.array([h.nu for h in modal]),
                        np.array([h.rho for h in modal]))
    psi_scale = np.sqrt(np.clip(np.diag(cov0), 1e-12, None))
    if include_likelihood:
        # The posterior concentrates near the column means at rate 1/sqrt(n);
        # starting near the posterior width shortens adaptation.
        data_scale = pre.z.std(axis=0, ddof=1) / math.sqrt(pre.n)
        psi_scale = np.minimum(psi_scale, np.clip(data_scale, 1e-6, None))
    base_scales = np.concatenate([
        psi_scale,
        np.full(k, sds["log_varrho2"]),
        np.full(k, sds["log_nu"]),
        np.atleast_1d(sds["log_rho"]) * np.ones(k),
        [sds["log_delta2"]],
    ])
    base_scales = np.clip(base_scales, 1e-12, None)

    strand_ids = [s.strand_id for s in design.annotation.strands]
    return TargetModel(
        log_target=log_target,
        x0=x0,
        names=vector_names(design.mirna_names, strand_ids),
        blocks=parameter_blocks(m, k),
        base_scales=base_scales,
        meta={"m": m, "k": k, "n": pre.n,
              "mirna_names": list(design.mirna_names),
              "strand_ids": strand_ids,
              "likelihood": include_likelihood},
    )


def draw_prior_psi(design: DesignMatrix, priors: HyperPriorSpec, n_draws: int, seed,
                   policy: JitterPolicy = DEFAULT_JITTER,
                   max_skip_fraction: float = 0.01) -> np.ndarray:
    """Effect vectors from the full prior: hyperparameters from their priors,
    then one effect draw from the induced Gaussian prior per hyper draw.

    Draw i uses the i-th child stream of ``seed``.  Draws whose covariance
    fails PD certification are skipped; more than ``max_skip_fraction`` of
    them is an error.
    """
    from .kernels import prior_cov_psi, sample_psi_prior
    from .util import spawn_rngs

    rngs = spawn_rngs(seed, n_draws)
    rows = []
    skipped = 0
    for rng in rngs:
        hypers = priors.draw_strand_hypers(rng)
        try:
            pc = prior_cov_psi(design, hypers, policy)
            rows.append(sample_psi_prior(pc, 1, rng, policy)[0])
        except NumericalError:
            skipped += 1
    if skipped > max_skip_fraction * n_draws:
        raise NumericalError(f"{skipped}/{n_draws} prior draws failed PD certification")
    return np.array(rows)


def states_from_draws(draws: np.ndarray, m: int, k: int):
    """Decode sampler draws (rows are unconstrained vectors) into ModelStates."""
    for row in np.asarray(draws):
        yield ModelState.from_vector(row, m, k)


def psi_draws(draws: np.ndarray, m: int) -> np.ndarray:
    """Effect columns of a draw matrix."""
    return np.asarray(draws)[:, :m]


def delta2_draws(draws: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(draws)[:, -1])
