"""pCN sampler: quantile whitening, prior invariance, conjugate posterior and the VI comparison."""
import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from besov_vi import pexp
from besov_vi.forward.maps import linear_toy_map
from besov_vi.observation import Dataset, GaussianLikelihood
from besov_vi.pcn import ChainConfig, compare_vi_to_chain, run_chain, whiten, whiten_inverse
from besov_vi.prior import BesovPriorSpec
from besov_vi.vi import MeanFieldParams, PriorScales, fit

from test_vi import conjugate_toy


def _empty_lik(p=1.5, J=2):
    fm = linear_toy_map(j_max=4, family="db4")
    pr = PriorScales.from_spec(BesovPriorSpec(p=p, alpha=2.0, J=J), fm.basis)
    return GaussianLikelihood(Dataset.empty(), fm), pr, fm


class TestWhitening:
    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 3.0])
    def test_quantile_coupling(self, p):
        w = np.linspace(-6, 6, 1201)
        th = whiten_inverse(w, p, 0.7)
        np.testing.assert_allclose(pexp.PExpDist(p, 0.0, 0.7).cdf(th), special.ndtr(w), atol=1e-10, rtol=0)
        np.testing.assert_allclose(whiten(th, p, 0.7), w, atol=1e-10, rtol=0)
        assert np.all(np.diff(th) > 0)

    @given(st.floats(-8, 8), st.floats(1.0, 4.0), st.floats(0.01, 10))
    def test_round_trip(self, w, p, s):
        assert whiten(whiten_inverse(w, p, s), p, s) == pytest.approx(w, abs=1e-9)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(step=0.0), dict(step=1.5), dict(burn_in=100, iterations=100), dict(thin=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ChainConfig(**kw)

    def test_no_retained(self):
        fm = linear_toy_map(j_max=3)
        pr = PriorScales(2.0, np.zeros(fm.basis.size))
        with pytest.raises(ValueError):
            run_chain(GaussianLikelihood(Dataset.empty(), fm), pr, ChainConfig(step=0.5, iterations=10, burn_in=0))


class TestPriorInvariance:
    def test_constant_likelihood_accepts_everything(self):
        lik, pr, _ = _empty_lik()
        res = run_chain(lik, pr, ChainConfig(step=0.3, iterations=500, burn_in=0, seed=0))
        assert res.acceptance == 1.0 and not res.low_acceptance

    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0])
    def test_moments_without_data(self, p):
        lik, pr, _ = _empty_lik(p)
        res = run_chain(lik, pr, ChainConfig(step=1.0, iterations=20_000, burn_in=1, seed=1))
        keep = pr.retained
        sd = pr.sigma[keep] * math.sqrt(pexp.abs_moment(p, 1.0, 2.0))
        S = res.samples[:, keep]
        assert np.all(np.abs(S.mean(axis=0)) < 0.05 * sd)
        np.testing.assert_allclose(S.std(axis=0), sd, rtol=0.05)
        assert np.all(res.samples[:, ~keep] == 0)

    def test_marginal_ks(self):
        lik, pr, _ = _empty_lik(1.5)
        res = run_chain(lik, pr, ChainConfig(step=1.0, iterations=100_001, burn_in=1, seed=2))
        k = 3
        dist = pexp.PExpDist(1.5, 0.0, pr.sigma[k])
        assert stats.kstest(res.samples[:, k], dist.cdf).statistic <= 0.02

    def test_step_tuning_hits_target(self):
        lik, pr, mean, sd = conjugate_toy(200)
        res = run_chain(lik, pr, ChainConfig(iterations=2000, burn_in=100, seed=3))
        assert res.tuning and 0.1 < res.acceptance < 0.5


class TestConjugate:
    def test_posterior_moments(self):
        lik, pr, mean, sd = conjugate_toy(200)
        res = run_chain(lik, pr, ChainConfig(iterations=100_000, burn_in=2000, seed=4))
        x = res.samples[:, 0]
        assert x.mean() == pytest.approx(mean, rel=0.02)
        assert x.std() == pytest.approx(sd, rel=0.02)
        assert np.all(res.samples[:, 1:] == 0)

    def test_vi_agrees_with_chain(self):
        lik, pr, mean, sd = conjugate_toy(200)
        rep = fit(lik, pr, seed=0)
        res = run_chain(lik, pr, ChainConfig(iterations=100_000, burn_in=2000, seed=5))
        cmp = compare_vi_to_chain(rep, res)
        assert cmp.mean_max_rel < 0.03 and cmp.std_max_rel < 0.10


class TestComparison:
    def test_zero_discrepancy(self):
        # two-point samples a +- s have mean a and standard deviation s exactly
        q = 1.5
        a = np.array([0.3, -1.0, 0.0])
        s = np.array([0.2, 0.5, 0.1])
        keep = np.array([True, True, False])
        b = np.where(keep, s / math.sqrt(pexp.abs_moment(q, 1.0, 2.0)), 0)
        S = np.vstack([a + s, a - s])
        S[:, ~keep] = 0
        cmp = compare_vi_to_chain(MeanFieldParams(q, np.where(keep, a, 0), b, keep), S)
        assert cmp.mean_rel == 0 and cmp.mean_max_abs == 0
        assert cmp.std_rel < 1e-14 and cmp.std_max_rel < 1e-14

    def test_type_check(self):
        with pytest.raises(TypeError):
            compare_vi_to_chain(object(), np.zeros((2, 2)))

    def test_csv_header(self, tmp_path):
        lik, pr, fm = _empty_lik()
        res = run_chain(lik, pr, ChainConfig(step=0.5, iterations=20, burn_in=10, thin=2, seed=0))
        res.write_csv(tmp_path / "chain.csv", fm.basis)
        with open(tmp_path / "chain.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["c_-1_0", "c_0_0", "c_1_0"]
        assert len(rows) == 1 + 5
        np.testing.assert_array_equal(np.array(rows[1:], float), res.samples)
