import mpmath as mp
import numpy as np
import pytest

from strandgp import (
    JitterPolicy,
    NumericalError,
    StrandHyperParams,
    build_design_matrix,
    cholesky_with_jitter,
    estimate_prior_correlation,
    matern_cov,
    prior_cov_psi,
    sample_psi_prior,
    strand_cov,
)
from strandgp.data import GenomeAnnotation, StrandRecord

mp.mp.dps = 50


def matern_oracle(d, varrho2, nu, rho):
    """Arbitrary-precision evaluation through mpmath's Bessel K."""
    if d == 0:
        return float(varrho2)
    x = mp.sqrt(2 * mp.mpf(nu)) * mp.mpf(d) / mp.mpf(rho)
    val = mp.mpf(varrho2) * 2 ** (1 - mp.mpf(nu)) / mp.gamma(nu) * x ** mp.mpf(nu) * mp.besselk(nu, x)
    return float(val)


def make_annotation(spec):
    """spec: list of (strand_id, length, [(name, coord), ...])."""
    strands = tuple(
        StrandRecord(strand_id=sid, length=length, loci=tuple(loci))
        for sid, length, loci in spec
    )
    return GenomeAnnotation(strands=strands)


class TestMaternCov:
    def test_zero_distance_returns_process_variance(self):
        for varrho2 in (0.5, 1.0, 7.3):
            h = StrandHyperParams(varrho2, 1.7, 11.0)
            assert matern_cov(0.0, h) == varrho2

    def test_half_smoothness_closed_form(self):
        h = StrandHyperParams(1.0, 0.5, 1.0)
        assert matern_cov(1.0, h) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_frozen_high_precision_value(self):
        # mpmath oracle at 50 digits: matern(d=5, varrho2=2, nu=1.5, rho=10)
        h = StrandHyperParams(2.0, 1.5, 10.0)
        assert matern_cov(5.0, h) == pytest.approx(1.569775307914901309, rel=1e-12)

    def test_against_live_oracle_grid(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            varrho2 = rng.uniform(0.1, 5.0)
            nu = rng.uniform(0.1, 50.0)
            rho = rng.uniform(0.5, 1e6)
            d = rng.uniform(1e-3, 1e3) * rho
            h = StrandHyperParams(varrho2, nu, rho)
            expected = matern_oracle(d, varrho2, nu, rho)
            if expected < 1e-250:
                continue
            assert matern_cov(d, h) == pytest.approx(expected, rel=1e-10)

    def test_overflow_corner_maps_to_variance(self):
        # Bessel overflow regime: the true value equals the process variance
        # to ~1e-12 relative; the implementation must not return inf/nan.
        h = StrandHyperParams(2.0, 50.0, 1.0)
        value = matern_cov(1e-6, h)
        assert value == pytest.approx(2.0, rel=1e-10)

    def test_monotone_decay_in_distance(self):
        for nu in (0.3, 0.5, 1.5, 4.0, 20.0):
            h = StrandHyperParams(2.0, nu, 37.0)
            grid = np.linspace(0.0, 500.0, 200)
            values = matern_cov(grid, h)
            assert np.all(np.diff(values) <= 1e-15)
            assert np.all(values > 0)
            assert np.all(values <= 2.0)

    def test_scale_equivariance_in_variance(self):
        grid = np.linspace(0.1, 300.0, 50)
        a = matern_cov(grid, StrandHyperParams(1.0, 2.2, 40.0))
        b = matern_cov(grid, StrandHyperParams(13.7, 2.2, 40.0))
        np.testing.assert_allclose(b / 13.7, a, rtol=1e-12)

    def test_exponential_identity_tight(self):
        rho = 123.0
        h = StrandHyperParams(3.1, 0.5, rho)
        grid = np.linspace(0.0, 5 * rho, 100)
        np.testing.assert_allclose(matern_cov(grid, h), 3.1 * np.exp(-grid / rho), rtol=1e-10)

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(ValueError):
            StrandHyperParams(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            StrandHyperParams(1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            StrandHyperParams(1.0, 1.0, np.inf)

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            matern_cov(-1.0, StrandHyperParams(1.0, 1.0, 1.0))


class TestStrandCov:
    def test_single_coordinate(self):
        h = StrandHyperParams(2.5, 1.0, 10.0)
        cov, jitter = strand_cov([4.0], h)
        assert cov.tolist() == [[2.5]]
        assert jitter == 0.0

    def test_two_coordinate_symmetry(self):
        h = StrandHyperParams(1.5, 2.0, 25.0)
        cov, _ = strand_cov([10.0, 40.0], h)
        assert cov[0, 1] == cov[1, 0]
        assert cov[0, 1] == pytest.approx(matern_cov(30.0, h), rel=1e-12)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        coords = np.sort(rng.uniform(0, 1e4, size=10))
        h = StrandHyperParams(1.3, 2.5, 2e3)
        cov, _ = strand_cov(coords, h)
        expected = np.empty((10, 10))
        for i in range(10):
            for j in range(10):
                expected[i, j] = matern_oracle(abs(coords[i] - coords[j]), 1.3, 2.5, 2e3)
        assert np.max(np.abs(cov - expected)) < 1e-12

    def test_eigenvalues_nearly_nonnegative(self):
        rng = np.random.default_rng(11)
        coords = np.sort(rng.uniform(0, 1e5, size=30))
        h = StrandHyperParams(4.0, 1.5, 1e4)
        cov, _ = strand_cov(coords, h)
        assert np.linalg.eigvalsh(cov).min() >= -1e-8 * 4.0

    def test_jitter_escalation_and_budget(self):
        # Coincident-to-machine-precision coordinates force a singular Gram.
        h = StrandHyperParams(1.0, 1.5, 1e6)
        coords = [1000.0, 1000.0 + 1e-9, 1000.0 + 2e-9]
        cov, jitter = strand_cov(coords, h)
        assert jitter > 0.0
        np.linalg.cholesky(cov)  # certified PD after recorded jitter
        tight = JitterPolicy(initial=1e-30, growth=2.0, maximum=1e-29)
        with pytest.raises(NumericalError):
            strand_cov(coords, h, tight)

    def test_validation(self):
        h = StrandHyperParams(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            strand_cov([], h)
        with pytest.raises(ValueError):
            strand_cov([1.0, 1.0], h)


class TestPriorCovPsi:
    def test_identity_design_single_strand(self):
        ann = make_annotation([("Chr1+", 100.0, [("a", 10.0), ("b", 60.0)])])
        design = build_design_matrix(ann, ["a", "b"])
        h = [StrandHyperParams(2.0, 1.5, 50.0)]
        pc = prior_cov_psi(design, h)
        np.testing.assert_allclose(pc.psi_cov, pc.w_blocks[0], rtol=1e-14)

    def test_cross_strand_unit_sums_block_variances(self):
        ann = make_annotation([
            ("Chr1+", 100.0, [("a", 10.0)]),
            ("Chr2+", 100.0, [("a", 20.0), ("b", 70.0)]),
        ])
        design = build_design_matrix(ann, ["a", "b"])
        hs = [StrandHyperParams(2.0, 1.0, 50.0), StrandHyperParams(3.0, 1.0, 50.0)]
        pc = prior_cov_psi(design, hs)
        assert pc.psi_cov[0, 0] == pytest.approx(2.0 + 3.0, rel=1e-12)
        # a-b covariance comes only from the shared strand
        assert pc.psi_cov[0, 1] == pytest.approx(matern_cov(50.0, hs[1]), rel=1e-12)

    def test_independent_strands_have_zero_cross_covariance(self):
        ann = make_annotation([
            ("Chr1+", 100.0, [("a", 10.0)]),
            ("Chr2-", 100.0, [("b", 10.0)]),
        ])
        design = build_design_matrix(ann, ["a", "b"])
        hs = [StrandHyperParams(1.0, 1.0, 10.0)] * 2
        pc = prior_cov_psi(design, hs)
        assert pc.psi_cov[0, 1] == 0.0

    def test_dense_triple_product_oracle(self):
        rng = np.random.default_rng(9)
        spec = []
        names = []
        idx = 0
        for s in range(3):
            loci = []
            for _ in range(rng.integers(2, 5)):
                names.append(f"m{idx}")
                loci.append((f"m{idx}", float(rng.uniform(1, 1e4))))
                idx += 1
            loci.sort(key=lambda t: t[1])
            spec.append((f"Chr{s}+", 1e4, loci))
        # one multi-strand unit
        spec[0] = (spec[0][0], spec[0][1], list(spec[0][2]) + [(names[-1], 9999.0)])
        spec[0][2].sort(key=lambda t: t[1])
        ann = make_annotation(spec)
        design = build_design_matrix(ann, names)
        hs = [StrandHyperParams(float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 3)),
                                float(rng.uniform(1e2, 1e4))) for _ in range(3)]
        pc = prior_cov_psi(design, hs)
        w = np.zeros((design.n_loci, design.n_loci))
        for block, cols in zip(pc.w_blocks, design.strand_slices):
            w[cols, cols] = block
        dense = design.p.astype(float) @ w @ design.p.T.astype(float)
        np.testing.assert_allclose(pc.psi_cov, dense, atol=1e-12)

    def test_wrong_hyper_count(self):
        ann = make_annotation([("Chr1+", 10.0, [("a", 1.0)])])
        design = build_design_matrix(ann, ["a"])
        with pytest.raises(ValueError):
            prior_cov_psi(design, [])


class TestPriorDraws:
    def test_sampled_covariance_matches_target(self):
        ann = make_annotation([
            ("Chr1+", 1000.0, [(f"a{i}", 10.0 + 97.0 * i) for i in range(4)]),
            ("Chr2+", 1000.0, [(f"b{i}", 20.0 + 83.0 * i) for i in range(4)]),
        ])
        names = [f"a{i}" for i in range(4)] + [f"b{i}" for i in range(4)]
        design = build_design_matrix(ann, names)
        hs = [StrandHyperParams(2.0, 1.5, 400.0), StrandHyperParams(1.0, 0.8, 300.0)]
        pc = prior_cov_psi(design, hs)
        draws = sample_psi_prior(pc, 20000, np.random.default_rng(0))
        sample_corr = np.corrcoef(draws.T)
        sd = np.sqrt(np.diag(pc.psi_cov))
        target_corr = pc.psi_cov / np.outer(sd, sd)
        assert np.max(np.abs(sample_corr - target_corr)) < 0.03


class TestEstimatePriorCorrelation:
    def fixed_draw(self, hypers):
        return lambda rng: hypers

    def test_cross_strand_correlation_is_zero(self):
        ann = make_annotation([
            ("Chr1+", 100.0, [("a", 10.0)]),
            ("Chr2+", 100.0, [("b", 10.0)]),
        ])
        design = build_design_matrix(ann, ["a", "b"])
        draw = self.fixed_draw([StrandHyperParams(1.0, 1.0, 10.0)] * 2)
        corr = estimate_prior_correlation(design, draw, 1000, seed=0)
        assert corr[0, 1] == 0.0
        np.testing.assert_array_equal(np.diag(corr), [1.0, 1.0])

    def test_single_unit(self):
        ann = make_annotation([("Chr1+", 100.0, [("a", 10.0)])])
        design = build_design_matrix(ann, ["a"])
        draw = self.fixed_draw([StrandHyperParams(1.0, 1.0, 10.0)])
        corr = estimate_prior_correlation(design, draw, 1000, seed=0)
        assert corr.tolist() == [[1.0]]

    def test_point_mass_hyperprior_gives_analytic_correlation(self):
        h = StrandHyperParams(2.3, 1.2, 77.0)
        d = 31.0
        ann = make_annotation([("Chr1+", 200.0, [("a", 10.0), ("b", 10.0 + d)])])
        design = build_design_matrix(ann, ["a", "b"])
        corr = estimate_prior_correlation(design, self.fixed_draw([h]), 1000, seed=1)
        assert corr[0, 1] == pytest.approx(matern_cov(d, h) / h.varrho2, rel=1e-10)

    def test_requires_enough_draws(self):
        ann = make_annotation([("Chr1+", 100.0, [("a", 10.0)])])
        design = build_design_matrix(ann, ["a"])
        with pytest.raises(ValueError):
            estimate_prior_correlation(design, self.fixed_draw([StrandHyperParams(1, 1, 1)]), 10, seed=0)

    def test_deterministic_in_seed_and_threads(self, monkeypatch):
        ann = make_annotation([
            ("Chr1+", 500.0, [("a", 10.0), ("b", 200.0), ("c", 450.0)]),
        ])
        design = build_design_matrix(ann, ["a", "b", "c"])

        def draw(rng):
            return [StrandHyperParams(float(1.0 / rng.gamma(3.0, 1.0)), 1.0,
                                      float(np.exp(rng.normal(4.0, 0.5))))]

        first = estimate_prior_correlation(design, draw, 1200, seed=42)
        monkeypatch.setenv("STRANDGP_THREADS", "4")
        second = estimate_prior_correlation(design, draw, 1200, seed=42)
        np.testing.assert_array_equal(first, second)


class TestCholeskyWithJitter:
    def test_pd_matrix_untouched(self):
        mat = np.array([[2.0, 0.5], [0.5, 1.0]])
        chol, jitter = cholesky_with_jitter(mat, 2.0)
        assert jitter == 0.0
        np.testing.assert_allclose(chol @ chol.T, mat, rtol=1e-14)

    def test_singular_matrix_gets_jitter(self):
        mat = np.ones((3, 3))
        chol, jitter = cholesky_with_jitter(mat, 1.0)
        assert jitter > 0.0
        np.testing.assert_allclose(chol @ chol.T, mat + jitter * np.eye(3), rtol=1e-12)

    def test_budget_exhaustion(self):
        mat = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(NumericalError):
            cholesky_with_jitter(mat, 1.0)
