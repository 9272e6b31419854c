"""Non-marginal multiple testing on posterior draws.

A unit is deregulated when its effect exceeds 1 in absolute value.  Rather
than thresholding marginal posterior probabilities, each unit i carries a
group G_i of a-priori-correlated units, and the decision vector d maximizes

    f_beta(d) = sum_i d_i (w_i(d) - beta),

where w_i(d) is the posterior probability that unit i is deregulated AND
every other group member j's hypothesis agrees with its decision d_j.  The
maximization is exact per connected component of the decision-dependence
graph (exhaustive enumeration up to a size limit, multi-start coordinate
ascent beyond it), and beta is calibrated so the posterior false discovery
rate lands on a target.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np


def hypothesis_indicators(psi_draws: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Per-draw deregulation indicators: |effect| > threshold.  Rows are draws."""
    psi_draws = np.asarray(psi_draws, dtype=float)
    if psi_draws.ndim != 2 or psi_draws.shape[0] == 0:
        raise ValueError("need a nonempty (draws x units) matrix")
    return np.abs(psi_draws) > threshold


def marginal_probs(indicators: np.ndarray) -> np.ndarray:
    """Marginal posterior probability of deregulation per unit."""
    return np.asarray(indicators, dtype=float).mean(axis=0)


@dataclass(frozen=True)
class GroupStructure:
    """Per-unit index groups used by the non-marginal criterion.

    ``groups[i]`` always contains i; other members are the (at most ``cap``)
    units whose prior correlation with i reaches the percentile threshold.
    """

    groups: tuple
    threshold: float
    cap: int

    @property
    def n_units(self) -> int:
        return len(self.groups)

    def neighbors(self, i: int) -> np.ndarray:
        g = self.groups[i]
        return g[g != i]

    @classmethod
    def singletons(cls, m: int) -> "GroupStructure":
        return cls(groups=tuple(np.array([i]) for i in range(m)), threshold=math.nan, cap=0)


def form_groups(correlation: np.ndarray, cap: int = 5, percentile: float = 95.0,
                cap_includes_self: bool = False) -> GroupStructure:
    """Build groups from a prior correlation matrix.

    The cutoff is the given percentile of the above-diagonal correlations.
    Group i then holds i plus the up-to-``cap`` highest-correlated units at
    or above the cutoff (``cap_includes_self`` counts i itself against the
    cap); units with no qualifying partner stay singletons.  A deregulation
    coupling needs positive correlation, so nonpositive entries never
    qualify even when the cutoff itself is nonpositive.  Ties at the cap
    resolve toward smaller indices.
    """
    r = np.asarray(correlation, dtype=float)
    m = r.shape[0]
    if r.ndim != 2 or r.shape != (m, m) or m < 2:
        raise ValueError("correlation must be square with at least two units")
    if not np.allclose(np.diag(r), 1.0, atol=1e-8):
        raise ValueError("correlation matrix must have unit diagonal")
    iu = np.triu_indices(m, k=1)
    cutoff = float(np.percentile(r[iu], percentile))
    budget = max(0, cap - 1) if cap_includes_self else cap
    groups = []
    for i in range(m):
        row = r[i].copy()
        row[i] = -np.inf
        qualifying = np.flatnonzero((row >= cutoff) & (row > 0.0))
        if qualifying.size > budget:
            order = np.argsort(-row[qualifying], kind="stable")
            qualifying = qualifying[order[:budget]]
        members = np.sort(np.append(qualifying, i))
        groups.append(members.astype(int))
    return GroupStructure(groups=tuple(groups), threshold=cutoff, cap=cap)


def compute_w(d: np.ndarray, indicators: np.ndarray, groups: GroupStructure) -> np.ndarray:
    """Group-coupled posterior probabilities w_i(d).

    w_i(d) is the fraction of draws where unit i is deregulated and, for
    every other member j of its group, the draw's indicator equals d_j.
    Singleton groups give the marginal probability.
    """
    indicators = np.asarray(indicators, dtype=bool)
    d = np.asarray(d).astype(bool)
    t, m = indicators.shape
    if t == 0:
        raise ValueError("need at least one posterior draw")
    w = np.empty(m)
    for i in range(m):
        mask = indicators[:, i].copy()
        for j in groups.neighbors(i):
            mask &= indicators[:, j] == d[j]
        w[i] = mask.mean()
    return w


def posterior_fdr(d: np.ndarray, v: np.ndarray) -> float:
    """Expected false-discovery proportion under the posterior, given decisions."""
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    return float((d * (1.0 - v)).sum() / max(d.sum(), 1.0))


def posterior_fnr(d: np.ndarray, v: np.ndarray) -> float:
    """Expected false-non-discovery proportion under the posterior."""
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(((1.0 - d) * v).sum() / max((1.0 - d).sum(), 1.0))


# ---------------------------------------------------------------------------
# Decision optimization
# ---------------------------------------------------------------------------

def _w_tables(indicators: np.ndarray, groups: GroupStructure):
    """Per unit: (neighbor indices, w values for all 2^|neighbors| patterns)."""
    t = indicators.shape[0]
    tables = []
    for i in range(groups.n_units):
        nb = groups.neighbors(i)
        codes = np.zeros(t, dtype=np.int64)
        for bit, j in enumerate(nb):
            codes |= indicators[:, j].astype(np.int64) << bit
        counts = np.bincount(codes[indicators[:, i]], minlength=1 << nb.size)
        tables.append((nb, counts / t))
    return tables


def _components(groups: GroupStructure) -> list:
    m = groups.n_units
    adjacency = [set() for _ in range(m)]
    for i in range(m):
        for j in groups.neighbors(i):
            adjacency[i].add(int(j))
            adjacency[j].add(i)
    seen = np.zeros(m, dtype=bool)
    comps = []
    for start in range(m):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in adjacency[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        comps.append(np.array(sorted(comp)))
    return comps


def _component_f(comp, d_local, tables, pos_of, beta) -> float:
    f = 0.0
    for p, i in enumerate(comp):
        if not d_local[p]:
            continue
        nb, table = tables[i]
        code = 0
        for bit, j in enumerate(nb):
            code |= int(d_local[pos_of[int(j)]]) << bit
        f += table[code] - beta
    return f


def _enumerate_component(comp, tables, beta):
    """Exact maximizer over all configurations of one component.

    Configurations are scanned in lexicographic order of the decision tuple
    (component indices ascending, 0 before 1), and the first maximum is
    kept, so the returned vector is the lexicographically smallest argmax.
    """
    c = comp.size
    masks = np.arange(1 << c, dtype=np.int64)
    bit_positions = c - 1 - np.arange(c)
    bits = ((masks[:, None] >> bit_positions[None, :]) & 1).astype(bool)
    pos_of = {int(j): p for p, j in enumerate(comp)}
    f = np.zeros(masks.size)
    for p, i in enumerate(comp):
        nb, table = tables[i]
        if nb.size:
            nbpos = np.array([pos_of[int(j)] for j in nb])
            codes = bits[:, nbpos] @ (1 << np.arange(nb.size, dtype=np.int64))
            w = table[codes]
        else:
            w = table[0]
        f += bits[:, p] * (w - beta)
    best = int(np.argmax(f))
    return bits[best].astype(np.int8), float(f[best])


def _ascent_component(comp, tables, beta, v, rng, restarts: int):
    """Multi-start coordinate ascent for components beyond the enumeration limit."""
    c = comp.size
    pos_of = {int(j): p for p, j in enumerate(comp)}

    def local_f(d_local):
        return _component_f(comp, d_local, tables, pos_of, beta)

    def climb(d_local):
        improved = True
        while improved:
            improved = False
            for p in range(c):
                current = local_f(d_local)
                d_local[p] ^= 1
                flipped = local_f(d_local)
                # prefer 0 on exact ties
                keep_flip = flipped > current or (flipped == current and d_local[p] == 0)
                if not keep_flip:
                    d_local[p] ^= 1
                elif flipped > current:
                    improved = True
        return d_local

    starts = [(v[comp] > beta).astype(np.int8)]
    for _ in range(restarts):
        starts.append(rng.integers(0, 2, size=c).astype(np.int8))
    best_d, best_f = None, -math.inf
    for s in starts:
        d_local = climb(s.copy())
        f = local_f(d_local)
        if f > best_f or (f == best_f and best_d is not None
                          and tuple(d_local) < tuple(best_d)):
            best_d, best_f = d_local.copy(), f
    return best_d, best_f


@dataclass(frozen=True)
class ComponentReport:
    indices: np.ndarray
    exact: bool


@dataclass(frozen=True)
class OptimizeResult:
    d: np.ndarray
    f_value: float
    components: tuple
    exact: bool  # every component solved by enumeration


def optimize_decisions(indicators: np.ndarray, groups: GroupStructure, beta: float,
                       enum_limit: int = 20, restarts: int = 8, seed: int = 0) -> OptimizeResult:
    """Maximize f_beta over all 2^m decision vectors.

    The dependence graph (i adjacent to j when either's group contains the
    other) splits the objective into independent connected components.
    Components up to ``enum_limit`` units are enumerated exhaustively with a
    lexicographic tie-break; larger ones fall back to multi-start coordinate
    ascent and are flagged as not exact.

    Args:
        indicators: (draws x units) deregulation indicator matrix.
        groups: group structure (one group per unit).
        beta: rejection penalty in (0, 1).

    Returns:
        OptimizeResult with the decision vector, the attained f value, and
        per-component exactness reports.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    indicators = np.asarray(indicators, dtype=bool)
    m = indicators.shape[1]
    if groups.n_units != m:
        raise ValueError("groups and indicator matrix disagree on unit count")
    tables = _w_tables(indicators, groups)
    v = marginal_probs(indicators)
    rng = np.random.default_rng(seed)
    d = np.zeros(m, dtype=np.int8)
    total = 0.0
    reports = []
    for comp in _components(groups):
        if comp.size <= enum_limit:
            d_local, f = _enumerate_component(comp, tables, beta)
            exact = True
        else:
            d_local, f = _ascent_component(comp, tables, beta, v, rng, restarts)
            exact = False
        d[comp] = d_local
        total += f
        reports.append(ComponentReport(indices=comp, exact=exact))
    return OptimizeResult(d=d, f_value=total, components=tuple(reports),
                          exact=all(r.exact for r in reports))


# ---------------------------------------------------------------------------
# beta calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationResult:
    beta: float
    d: np.ndarray
    fdr: float
    fnr: float
    feasible: bool
    evaluations: tuple  # (beta, n_rejections, fdr) for every candidate tried


def calibrate_beta(indicators: np.ndarray, groups: GroupStructure,
                   target_fdr: float = 0.10, tol: float = 0.005,
                   n_bisect: int = 30, enum_limit: int = 20,
                   restarts: int = 8, seed: int = 0) -> CalibrationResult:
    """Pick beta so the posterior FDR of the optimal decisions meets a target.

    Candidate betas come from a coarse grid plus bisection (decisions are
    discrete, so FDR need not be monotone in beta; every evaluated pair is
    recorded and the final choice scans all of them).  Among candidates
    with posterior FDR at most ``target_fdr + tol`` and at least one
    rejection, the one with the most rejections wins (ties: FDR closest
    below the cap, then smaller beta).  With no admissible candidate the
    all-zero decision is returned with ``feasible=False``.
    """
    if not 0.0 < target_fdr < 1.0:
        raise ValueError("target_fdr must lie in (0, 1)")
    indicators = np.asarray(indicators, dtype=bool)
    v = marginal_probs(indicators)
    cache = {}

    def evaluate(beta: float):
        if beta not in cache:
            res = optimize_decisions(indicators, groups, beta,
                                     enum_limit=enum_limit, restarts=restarts, seed=seed)
            cache[beta] = (res.d, posterior_fdr(res.d, v))
        return cache[beta]

    for beta in np.linspace(0.05, 0.95, 10):
        evaluate(float(beta))
    lo, hi = 1e-6, 1.0 - 1e-6
    evaluate(lo)
    evaluate(hi)
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        _, fdr = evaluate(mid)
        if fdr > target_fdr + tol:
            lo = mid
        else:
            hi = mid

    evaluations = tuple(sorted((b, int(d.sum()), fdr) for b, (d, fdr) in cache.items()))
    admissible = [(b, d, fdr) for b, (d, fdr) in cache.items()
                  if fdr <= target_fdr + tol and d.sum() >= 1]
    if not admissible:
        m = indicators.shape[1]
        zeros = np.zeros(m, dtype=np.int8)
        return CalibrationResult(beta=math.nan, d=zeros, fdr=0.0,
                                 fnr=posterior_fnr(zeros, v), feasible=False,
                                 evaluations=evaluations)
    admissible.sort(key=lambda t: (-t[1].sum(), abs(t[2] - target_fdr), t[0]))
    beta, d, fdr = admissible[0]
    return CalibrationResult(beta=float(beta), d=d, fdr=float(fdr),
                             fnr=posterior_fnr(d, v), feasible=True,
                             evaluations=evaluations)


# ---------------------------------------------------------------------------
# Bayes factors and reporting
# ---------------------------------------------------------------------------

def bayes_factors(posterior_probs: np.ndarray, prior_probs: np.ndarray,
                  n_posterior_draws: int, n_prior_draws: int):
    """Posterior-to-prior odds ratios for deregulation, per unit.

    Probabilities are clipped away from {0, 1} by half a draw's worth of
    mass on each side before forming odds, so finite chains give finite
    factors.  Units whose raw prior probability was exactly 0 or 1 are
    flagged as degenerate.

    Returns:
        (bayes factor array, degenerate-prior flag array).
    """
    p = np.asarray(posterior_probs, dtype=float)
    q = np.asarray(prior_probs, dtype=float)
    degenerate = (q <= 0.0) | (q >= 1.0)
    p = np.clip(p, 1.0 / (2 * n_posterior_draws), 1.0 - 1.0 / (2 * n_posterior_draws))
    q = np.clip(q, 1.0 / (2 * n_prior_draws), 1.0 - 1.0 / (2 * n_prior_draws))
    bf = (p / (1.0 - p)) / (q / (1.0 - q))
    return bf, degenerate


def format_bayes_factor(value: float) -> str:
    """Table convention: decisive factors print as '>100'."""
    return ">100" if value > 100.0 else f"{value:.2f}"


@dataclass(frozen=True)
class DecisionReport:
    """Per-unit decisions with posterior summaries and global error rates."""

    mirna_names: tuple
    d: np.ndarray
    direction: tuple
    psi_mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    bayes_factor: np.ndarray
    degenerate_prior: np.ndarray
    group_members: tuple
    beta: float
    posterior_fdr: float
    posterior_fnr: float
    feasible: bool = True
    bf_clip_note: str = ""

    @property
    def n_discoveries(self) -> int:
        return int(self.d.sum())

    def summary_dict(self) -> dict:
        return {
            "beta": None if math.isnan(self.beta) else self.beta,
            "posterior_fdr": self.posterior_fdr,
            "posterior_fnr": self.posterior_fnr,
            "n_discoveries": self.n_discoveries,
            "feasible": self.feasible,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mirna", "decision", "direction", "psi_hat",
                             "ci_low", "ci_high", "bayes_factor", "group_members"])
            for i, name in enumerate(self.mirna_names):
                writer.writerow([
                    name, int(self.d[i]), self.direction[i],
                    repr(float(self.psi_mean[i])), repr(float(self.ci_low[i])),
                    repr(float(self.ci_high[i])), repr(float(self.bayes_factor[i])),
                    ";".join(self.group_members[i]),
                ])

    def write_summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_decision_report(mirna_names, psi_draws: np.ndarray, calibration: CalibrationResult,
                          groups: GroupStructure, prior_psi_draws: np.ndarray,
                          threshold: float = 1.0, ci_level: float = 0.95) -> DecisionReport:
    """Assemble the full per-unit report from posterior and prior draw sets.

    Point estimates are posterior means; intervals are central credible
    intervals at ``ci_level``.  Discoveries are labeled 'up' when the
    posterior mean difference is negative (fewer cycles: higher expression
    in disease tissue) and 'down' when positive.
    """
    psi_draws = np.asarray(psi_draws, dtype=float)
    names = tuple(mirna_names)
    post_ind = hypothesis_indicators(psi_draws, threshold)
    prior_ind = hypothesis_indicators(prior_psi_draws, threshold)
    bf, degenerate = bayes_factors(marginal_probs(post_ind), marginal_probs(prior_ind),
                                   post_ind.shape[0], prior_ind.shape[0])
    mean = psi_draws.mean(axis=0)
    alpha = 0.5 * (1.0 - ci_level)
    lowq, highq = np.quantile(psi_draws, [alpha, 1.0 - alpha], axis=0)
    direction = tuple(
        ("up" if mean[i] < 0 else "down") if calibration.d[i] else ""
        for i in range(len(names))
    )
    members = tuple(
        tuple(names[j] for j in groups.groups[i]) for i in range(len(names))
    )
    return DecisionReport(
        mirna_names=names,
        d=calibration.d,
        direction=direction,
        psi_mean=mean,
        ci_low=lowq,
        ci_high=highq,
        bayes_factor=bf,
        degenerate_prior=degenerate,
        group_members=members,
        beta=calibration.beta,
        posterior_fdr=calibration.fdr,
        posterior_fnr=calibration.fnr,
        feasible=calibration.feasible,
        bf_clip_note=f"probabilities clipped to [1/(2T), 1-1/(2T)] with T_post={post_ind.shape[0]}, "
                     f"T_prior={prior_ind.shape[0]}",
    )
