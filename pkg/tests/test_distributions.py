import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from seqrerand.distributions import (
    NoncentralChi2,
    TruncatedNoncentralChi2,
    chi2_cdf,
    chi2_quantile,
    conditional_second_moment,
    nc_chi2_cdf,
    nc_chi2_pdf,
    nc_chi2_quantile,
    nc_chi2_truncated_mean,
    poisson_window,
    sample_nc_chi2,
    sample_truncated,
    small_a_cdf_asymptote,
)
from seqrerand.errors import DomainError, UnderflowError


class TestCentral:
    def test_zero(self):
        for p in (1, 2, 7):
            assert chi2_cdf(0.0, p) == 0.0

    def test_closed_form_two_dof(self):
        x = np.linspace(0, 200, 401)
        np.testing.assert_allclose(chi2_cdf(x, 2), -np.expm1(-x / 2), atol=1e-12)

    def test_median_two_dof(self):
        assert chi2_cdf(1.3862944, 2) == pytest.approx(0.5, abs=1e-7)
        assert chi2_quantile(0.5, 2) == pytest.approx(2 * math.log(2), abs=1e-6)

    @pytest.mark.parametrize("p", [1, 2, 3, 5, 12])
    def test_small_argument_asymptote(self, p):
        x = 1e-6
        leading = x ** (p / 2) / (2 ** (p / 2) * math.gamma(p / 2 + 1))
        assert chi2_cdf(x, p) / leading == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("p", [1, 3, 12])
    def test_quantile_round_trip(self, p):
        u = np.array([1e-9, 1e-4, 0.01, 0.3, 0.5, 0.9, 0.999999])
        np.testing.assert_allclose(chi2_cdf(chi2_quantile(u, p), p), u, rtol=1e-9)

    def test_quantile_domain(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(DomainError):
                chi2_quantile(bad, 3)

    def test_dof_domain(self):
        with pytest.raises(DomainError):
            chi2_cdf(1.0, 0)
        with pytest.raises(DomainError):
            chi2_cdf(1.0, 2.5)


class TestNoncentral:
    def test_reduces_to_central(self):
        x = np.linspace(0, 60, 121)
        for p in (1, 4, 9):
            np.testing.assert_allclose(nc_chi2_cdf(x, p, 0.0), chi2_cdf(x, p), atol=1e-13)
            assert nc_chi2_quantile(0.37, p, 0.0) == chi2_quantile(0.37, p)

    @pytest.mark.parametrize("p,lam", [(1, 0.5), (3, 4.0), (5, 30.0), (12, 250.0), (2, 1500.0)])
    def test_against_scipy(self, p, lam):
        x = np.linspace(0.01, p + lam + 12 * math.sqrt(2 * (p + 2 * lam)), 60)
        np.testing.assert_allclose(nc_chi2_cdf(x, p, lam), stats.ncx2.cdf(x, p, lam), atol=1e-10)
        np.testing.assert_allclose(nc_chi2_pdf(x, p, lam), stats.ncx2.pdf(x, p, lam), rtol=1e-8, atol=1e-14)

    def test_monotone(self):
        x = np.linspace(0, 40, 200)
        F = nc_chi2_cdf(x, 5, 3.0)
        assert np.all(np.diff(F) >= 0) and F[0] == 0 and F[-1] <= 1
        lams = np.linspace(0, 20, 41)
        G = nc_chi2_cdf(7.0, 5, lams)
        assert np.all(np.diff(G) <= 0)

    def test_monte_carlo_ecdf(self):
        rng = np.random.default_rng(2024)
        draws = np.sort(sample_nc_chi2(5, 3.0, rng, 10**6))
        grid = np.quantile(draws, np.linspace(0.001, 0.999, 300))
        ecdf = np.searchsorted(draws, grid, side="right") / draws.size
        assert np.max(np.abs(ecdf - nc_chi2_cdf(grid, 5, 3.0))) < 4 / math.sqrt(10**6)

    def test_large_lambda_window_skips_underflow(self):
        lo, hi = poisson_window(5000.0)
        assert lo > 4000 and hi < 6000

    @settings(max_examples=60, deadline=None)
    @given(
        u=st.floats(1e-12, 1 - 1e-9),
        p=st.integers(1, 15),
        lam=st.floats(0, 200),
    )
    def test_quantile_round_trip(self, u, p, lam):
        x = nc_chi2_quantile(u, p, lam)
        assert nc_chi2_cdf(x, p, lam) == pytest.approx(u, rel=1e-8, abs=1e-12)

    def test_quantile_vectorised_over_lambda(self):
        rng = np.random.default_rng(0)
        u = rng.random(5000) ** 3
        lam = rng.random(5000) * 60
        x = nc_chi2_quantile(u, 5, lam)
        np.testing.assert_allclose(nc_chi2_cdf(x, 5, lam), u, rtol=1e-10)

    def test_quantile_increases_with_lambda(self):
        q = nc_chi2_quantile(0.01, 4, np.array([0.0, 0.5, 2.0, 10.0]))
        assert np.all(np.diff(q) > 0)

    def test_typed_wrapper(self):
        d = NoncentralChi2(3, 2.0)
        assert d.mean == 5.0
        assert d.cdf(d.quantile(0.4)) == pytest.approx(0.4)
        with pytest.raises(DomainError):
            NoncentralChi2(3, -1.0)


class TestTruncatedMean:
    def test_untruncated_limit(self):
        assert nc_chi2_truncated_mean(6, 0.0, 1e4) == pytest.approx(6.0, rel=1e-12)

    def test_small_threshold(self):
        assert nc_chi2_truncated_mean(2, 0.0, 1e-5) == pytest.approx(2 * 1e-5 / 4, rel=1e-3)

    def test_against_quadrature(self):
        p, lam, a = 5, 2.0, 1.0
        num, _ = integrate.quad(lambda y: y * stats.ncx2.pdf(y, p, lam), 0, a, epsabs=0, epsrel=1e-12)
        den, _ = integrate.quad(lambda y: stats.ncx2.pdf(y, p, lam), 0, a, epsabs=0, epsrel=1e-12)
        assert nc_chi2_truncated_mean(p, lam, a) == pytest.approx(num / den, rel=1e-6)

    def test_underflow(self):
        with pytest.raises(UnderflowError):
            nc_chi2_truncated_mean(50, 0.0, 1e-20)

    def test_wrapper(self):
        t = TruncatedNoncentralChi2(NoncentralChi2(4, 1.0), 2.0)
        assert 0 < t.mean < 2.0
        assert t.mass == pytest.approx(stats.ncx2.cdf(2.0, 4, 1.0), abs=1e-12)


class TestAsymptote:
    def test_two_dof(self):
        assert small_a_cdf_asymptote(2, 0.0, 0.3) == pytest.approx(0.15)

    @pytest.mark.parametrize("a", [1e-4, 1e-6])
    def test_ratio_tends_to_one(self, a):
        for p in (2, 5, 10):
            for lam in (0.0, 0.1):
                ratio = nc_chi2_cdf(a, p, lam) / small_a_cdf_asymptote(p, lam, a)
                assert ratio == pytest.approx(1.0, abs=1e-2)

    def test_lambda_factor(self):
        lam = 0.8
        r = small_a_cdf_asymptote(3, 2 * lam, 1e-3) / small_a_cdf_asymptote(3, lam, 1e-3)
        assert r == pytest.approx(math.exp(-lam / 2))


class TestSamplers:
    def test_moments(self):
        rng = np.random.default_rng(1)
        x = sample_nc_chi2(4, 2.5, rng, 10**6)
        se = x.std() / math.sqrt(x.size)
        assert abs(x.mean() - 6.5) < 5 * se
        y = sample_nc_chi2(3, 0.0, rng, 10**6)
        # chi2_p has fourth central moment 12 p^2 + 48 p
        mu4 = 12 * 9 + 48 * 3
        var_se = math.sqrt((mu4 - 36) / 10**6)
        assert abs(y.var() - 6.0) < 5 * var_se

    def test_ks_against_series(self):
        rng = np.random.default_rng(2)
        x = sample_nc_chi2(3, 1.7, rng, 10**5)
        ks = stats.kstest(x, lambda t: nc_chi2_cdf(t, 3, 1.7)).statistic
        assert ks < 2 / math.sqrt(10**5)

    def test_truncated_median(self):
        base = NoncentralChi2(4, 1.5)
        a = base.quantile(0.5)
        draws = sample_truncated(TruncatedNoncentralChi2(base, a), np.random.default_rng(3), 10**5)
        assert np.all(draws < a)
        assert np.median(draws) == pytest.approx(base.quantile(0.25), rel=0.02)

    def test_truncated_mean_matches_series(self):
        dist = TruncatedNoncentralChi2(NoncentralChi2(5, 2.0), 1.0)
        draws = sample_truncated(dist, np.random.default_rng(4), 10**5)
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - dist.mean) < 5 * se

    def test_truncated_underflow(self):
        with pytest.raises(UnderflowError):
            sample_truncated(TruncatedNoncentralChi2(NoncentralChi2(60), 1e-20), np.random.default_rng(0), 3)


class TestConditionalSecondMoment:
    def test_limit_half(self):
        assert conditional_second_moment(1.0, 1.0, 1e-10) == pytest.approx(0.5, abs=1e-8)

    def test_unconditional_limit(self):
        assert conditional_second_moment(1.0, 2.0, 1e4) == pytest.approx(1.0, abs=1e-12)

    def test_against_rejection(self):
        rng = np.random.default_rng(5)
        keep = []
        for _ in range(10):
            y = rng.standard_normal((2, 10**6))
            ok = (y[0] + 2 * y[1]) ** 2 < 1.0
            keep.append(y[0, ok] ** 2)
        v = np.concatenate(keep)
        se = v.std() / math.sqrt(v.size)
        assert abs(v.mean() - conditional_second_moment(1.0, 2.0, 1.0)) < 5 * se

    def test_domain(self):
        with pytest.raises(DomainError):
            conditional_second_moment(0.0, 1.0, 1.0)
