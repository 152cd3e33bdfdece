"""Mean-field families, the ELBO, the optimizer, the oracle law and R(Q)."""
import math

import numpy as np
import pytest
from scipy import integrate

from besov_vi import pexp
from besov_vi.forward.maps import darcy_map, linear_toy_map
from besov_vi.observation import Dataset, GaussianLikelihood, simulate
from besov_vi.prior import BesovPriorSpec, sample_coefficients, smooth_theta0
from besov_vi.vi import (B_MIN, FitReport, MeanFieldParams, OptimizerConfig, PriorScales, elbo, elbo_and_grad,
                         evaluate_R, fit, kl_to_prior, oracle_QN, posterior_functionals)
from besov_vi.wavelets import CoeffTree, WaveletBasis


def conjugate_toy(N, seed=3, truth=0.7):
    """One Gaussian coefficient observed directly: returns (lik, prior, posterior mean, posterior sd)."""
    fm = linear_toy_map(j_max=4, family="db4")
    pr = PriorScales.from_spec(BesovPriorSpec(p=2.0, alpha=2.0, J=-1), fm.basis)
    th0 = np.zeros(fm.basis.size)
    th0[0] = truth
    data = simulate(th0, fm, N, np.random.default_rng(seed))
    prec = 1 / pr.sigma[0] ** 2 + N
    return GaussianLikelihood(data, fm), pr, data.Y.sum() / prec, prec ** -0.5


def _toy(p=1.5, J=3, N=100, seed=0):
    fm = linear_toy_map(j_max=5, family="db4")
    spec = BesovPriorSpec(p=p, alpha=2.0, J=J)
    pr = PriorScales.from_spec(spec, fm.basis)
    rng = np.random.default_rng(seed)
    th0 = sample_coefficients(spec, fm.basis, rng)
    return fm, pr, th0, GaussianLikelihood(simulate(th0, fm, N, rng), fm)


class TestParams:
    def test_b_floor_and_mask(self):
        keep = np.array([True, True, False])
        par = MeanFieldParams(2.0, [1.0, 2.0, 3.0], [0.0, 1.0, 5.0], keep)
        np.testing.assert_array_equal(par.b, [B_MIN, 1.0, 0.0])
        np.testing.assert_array_equal(par.a, [1.0, 2.0, 0.0])

    def test_samples_respect_mask(self, rng):
        keep = np.array([True, False, True])
        par = MeanFieldParams(1.0, [0.5, 0.0, -1.0], [1.0, 1.0, 2.0], keep)
        S = par.sample(rng, 1000)
        assert np.all(S[:, 1] == 0.0)

    def test_dict_round_trip(self):
        par = MeanFieldParams(1.5, [0.1, 0.2], [0.3, 0.4], [True, True])
        back = MeanFieldParams.from_dict(par.to_dict())
        np.testing.assert_array_equal(back.a, par.a)
        np.testing.assert_array_equal(back.b, par.b)
        assert back.q == par.q


class TestKLToPrior:
    def test_prior_is_zero(self):
        b = WaveletBasis(j_max=5, family="db4")
        pr = PriorScales.from_spec(BesovPriorSpec(p=1.5, alpha=2.0, J=3), b)
        assert kl_to_prior(MeanFieldParams.from_prior(pr), pr) == pytest.approx(0.0, abs=1e-12)

    def test_single_gaussian(self):
        pr = PriorScales(2.0, np.array([1.0, 0.0]))
        par = MeanFieldParams(2.0, [1.0, 0.0], [1.0, 0.0], pr.retained)
        assert kl_to_prior(par, pr) == pytest.approx(0.5, abs=1e-14)
        assert kl_to_prior(par, pr, method="quad") == pytest.approx(0.5, abs=1e-14)

    def test_padding_with_prior_components(self):
        pr1 = PriorScales(1.5, np.array([0.7]))
        par1 = MeanFieldParams(1.5, [0.3], [0.2], [True])
        pr2 = PriorScales(1.5, np.array([0.7, 0.4, 0.9]))
        par2 = MeanFieldParams(1.5, [0.3, 0.0, 0.0], [0.2, 0.4, 0.9], [True, True, True])
        assert kl_to_prior(par2, pr2) == pytest.approx(kl_to_prior(par1, pr1), abs=1e-12)

    @pytest.mark.parametrize("q,p", [(1.5, 1.5), (2.0, 1.2), (1.0, 1.0), (2.0, 2.0)])
    def test_fast_matches_quadrature(self, q, p, rng):
        n = 12
        pr = PriorScales(p, rng.uniform(0.2, 1.5, n))
        par = MeanFieldParams(q, rng.normal(0, 1, n), rng.uniform(0.05, 1.0, n), np.ones(n, bool))
        assert kl_to_prior(par, pr) == pytest.approx(kl_to_prior(par, pr, method="quad"), rel=1e-7)

    def test_two_coefficient_additivity(self):
        # the product-measure KL against a 2-D quadrature of q log(q / p)
        pr = PriorScales(1.5, np.array([1.0, 0.6]))
        par = MeanFieldParams(1.5, [0.4, -0.2], [0.5, 0.3], [True, True])
        qs = [pexp.PExpDist(1.5, a, b) for a, b in zip(par.a, par.b)]
        ps = [pexp.PExpDist(1.5, 0.0, s) for s in pr.sigma]

        def fn(y, x):
            lq = qs[0].log_density(x) + qs[1].log_density(y)
            lp = ps[0].log_density(x) + ps[1].log_density(y)
            return math.exp(lq) * (lq - lp)

        val = integrate.dblquad(fn, -6, 6, -4, 4, epsabs=1e-11, epsrel=1e-10)[0]
        assert kl_to_prior(par, pr) == pytest.approx(val, abs=1e-6)

    def test_marginal_kl_below_joint(self, rng):
        # data processing: a coordinate projection cannot increase the divergence
        n = 8
        pr = PriorScales(1.5, rng.uniform(0.2, 1.0, n))
        par = MeanFieldParams(1.5, rng.normal(0, 0.5, n), rng.uniform(0.1, 1.0, n), np.ones(n, bool))
        total = kl_to_prior(par, pr)
        for i in range(n):
            sub = kl_to_prior(MeanFieldParams(1.5, par.a[i:i + 1], par.b[i:i + 1], [True]),
                              PriorScales(1.5, pr.sigma[i:i + 1]))
            assert sub <= total + 1e-12

    def test_index_mismatch(self):
        pr = PriorScales(2.0, np.array([1.0, 0.0]))
        par = MeanFieldParams(2.0, [0.0, 0.0], [1.0, 1.0], [True, True])
        with pytest.raises(ValueError):
            kl_to_prior(par, pr)


class TestElbo:
    def test_empty_data(self, rng):
        fm = darcy_map(j_max=5, family="db4")
        pr = PriorScales.from_spec(BesovPriorSpec(p=1.5, alpha=2.0, J=2), fm.basis)
        lik = GaussianLikelihood(Dataset.empty(), fm)
        assert elbo(MeanFieldParams.from_prior(pr), lik, pr, 4, rng).value == pytest.approx(0.0, abs=1e-12)
        par = MeanFieldParams(1.5, np.where(pr.retained, 0.1, 0.0), pr.sigma * 0.5, pr.retained)
        est = elbo(par, lik, pr, 4, rng)
        assert est.value == pytest.approx(-kl_to_prior(par, pr)) and est.value < 0

    def test_conjugate_posterior_beats_prior(self):
        lik, pr, mean, sd = conjugate_toy(50)
        post = MeanFieldParams(2.0, np.where(pr.retained, mean, 0), np.where(pr.retained, sd, 0), pr.retained)
        prior = MeanFieldParams.from_prior(pr)
        e_post = elbo(post, lik, pr, 4000, np.random.default_rng(1)).value
        e_prior = elbo(prior, lik, pr, 4000, np.random.default_rng(1)).value
        assert e_post > e_prior

    def test_conjugate_elbo_is_evidence(self):
        # at the exact posterior the ELBO equals log evidence
        lik, pr, mean, sd = conjugate_toy(30)
        Y = lik.data.Y
        s2 = pr.sigma[0] ** 2
        N = len(Y)
        log_ev = (-0.5 * N * math.log(2 * math.pi) - 0.5 * math.log1p(N * s2)
                  - 0.5 * (np.sum(Y ** 2) - s2 * Y.sum() ** 2 / (1 + N * s2)))
        post = MeanFieldParams(2.0, np.where(pr.retained, mean, 0), np.where(pr.retained, sd, 0), pr.retained)
        est = elbo(post, lik, pr, 20_000, np.random.default_rng(2))
        assert abs(est.value - log_ev) < 4 * est.stderr + 1e-9

    def test_stderr_rate(self):
        fm, pr, th0, lik = _toy()
        par = MeanFieldParams.from_prior(pr)
        ns = [100, 1000, 10_000]
        se = [elbo(par, lik, pr, n, np.random.default_rng(n)).stderr for n in ns]
        slope = np.polyfit(np.log(ns), np.log(se), 1)[0]
        assert abs(slope + 0.5) <= 0.15

    @pytest.mark.parametrize("p", [1.5, 2.0])
    def test_gradient_matches_finite_differences(self, p):
        fm, pr, th0, lik = _toy(p=p)
        keep = pr.retained
        r = np.random.default_rng(4)
        par = MeanFieldParams(p, np.where(keep, th0 + 0.3 * pr.sigma * r.standard_normal(keep.size), 0),
                              0.6 * pr.sigma, keep)
        _, ga, gb = elbo_and_grad(par, lik, pr, 16, np.random.default_rng(7))
        idx = np.flatnonzero(keep)
        for j, i in enumerate(idx):
            for which, g in (("a", ga), ("b", gb)):
                h = 1e-6 * max(1.0, abs(getattr(par, which)[i]))

                def E(sgn):
                    a, b = par.a.copy(), par.b.copy()
                    (a if which == "a" else b)[i] += sgn * h
                    return elbo(MeanFieldParams(p, a, b, keep), lik, pr, 16, np.random.default_rng(7)).value

                fd = (E(1) - E(-1)) / (2 * h)
                assert abs(fd - g[j]) <= 1e-4 * max(abs(fd), 1e-2)

    def test_antithetic_needs_even(self, rng):
        fm, pr, th0, lik = _toy()
        with pytest.raises(ValueError):
            elbo_and_grad(MeanFieldParams.from_prior(pr), lik, pr, 3, rng, antithetic=True)


class TestFit:
    def test_recovers_prior_without_data(self):
        fm = darcy_map(j_max=6, family="db4")
        pr = PriorScales.from_spec(BesovPriorSpec(p=1.5, alpha=2.0, J=4), fm.basis)
        lik = GaussianLikelihood(Dataset.empty(), fm)
        init = MeanFieldParams(1.5, np.where(pr.retained, 0.2 * pr.sigma, 0), 2.0 * pr.sigma, pr.retained)
        rep = fit(lik, pr, init=init, seed=0)
        keep = pr.retained
        assert np.max(np.abs(rep.params.a[keep])) < 1e-3
        assert np.max(np.abs(rep.params.b[keep] / pr.sigma[keep] - 1)) < 0.02

    @pytest.mark.parametrize("N", [20, 200, 2000])
    def test_conjugate(self, N):
        lik, pr, mean, sd = conjugate_toy(N)
        rep = fit(lik, pr, seed=1)
        assert rep.params.a[0] == pytest.approx(mean, rel=0.02)
        assert rep.params.b[0] == pytest.approx(sd, rel=0.02)

    def test_deterministic(self, tmp_path):
        lik, pr, _, _ = conjugate_toy(40)
        cfg = OptimizerConfig(max_iter=600, min_iter=200, polish_iter=200)
        r1 = fit(lik, pr, config=cfg, seed=5)
        r2 = fit(lik, pr, config=cfg, seed=5)
        r1.write_json(tmp_path / "a.json", include_wall_time=False)
        r2.write_json(tmp_path / "b.json", include_wall_time=False)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        back = FitReport.read_json(tmp_path / "a.json")
        np.testing.assert_array_equal(back.params.a, r1.params.a)
        assert back.selected == r1.selected

    def test_fitted_beats_prior_beats_random(self):
        fm, pr, th0, lik = _toy(p=2.0, J=2, N=200, seed=2)
        rep = fit(lik, pr, seed=0)
        keep = pr.retained
        r = np.random.default_rng(9)
        for trial in range(10):
            seed = 100 + trial
            e_fit = elbo(rep.params, lik, pr, 2000, np.random.default_rng(seed)).value
            e_prior = elbo(MeanFieldParams.from_prior(pr), lik, pr, 2000, np.random.default_rng(seed)).value
            rand = MeanFieldParams(2.0, np.where(keep, 3 * pr.sigma * r.standard_normal(keep.size), 0),
                                   pr.sigma * np.exp(r.normal(0, 1, keep.size)), keep)
            e_rand = elbo(rand, lik, pr, 2000, np.random.default_rng(seed)).value
            assert e_fit >= e_prior >= e_rand


class TestOracle:
    def test_scale(self):
        b = WaveletBasis(j_max=6, family="db4")
        par, pr = oracle_QN(np.zeros(b.size), b, 2.0, 1.0, 1.0, 1000, J=3)
        low = b.levels <= 3
        np.testing.assert_allclose(par.b[low], 2.0 ** (-3 * 3.5), rtol=1e-14)
        np.testing.assert_array_equal(par.a, 0.0)
        # above J the oracle keeps the prior scales exactly
        np.testing.assert_array_equal(par.b[~low], pr.sigma[~low])

    def test_truncated_variant(self):
        b = WaveletBasis(j_max=6, family="db4")
        th0 = smooth_theta0(b)
        par, pr = oracle_QN(th0, b, 2.0, 1.0, 1.0, 1000, J=2, variant="truncated")
        assert np.all(pr.sigma[b.levels > 2] == 0) and np.all(par.b[b.levels > 2] == 0)
        np.testing.assert_array_equal(par.a[b.levels <= 2], th0.values[b.levels <= 2])

    def test_level_range(self):
        b = WaveletBasis(j_max=4, family="db4")
        with pytest.raises(ValueError):
            oracle_QN(np.zeros(b.size), b, 2.0, 1.0, 1.0, 100, J=4)


class TestR:
    def test_prior_on_linear_toy(self):
        fm = linear_toy_map(j_max=5, family="db4")
        pr = PriorScales.from_spec(BesovPriorSpec(p=2.0, alpha=2.0, J=3, rho=0.8), fm.basis)
        R, kl, dist, se = evaluate_R(MeanFieldParams.from_prior(pr), pr, np.zeros(fm.basis.size), fm, 100,
                                     20_000, np.random.default_rng(0))
        assert kl == pytest.approx(0.0, abs=1e-12)
        assert abs(R - 0.5 * np.sum(pr.sigma ** 2)) < 4 * se

    def test_nonnegative(self, rng):
        fm, pr, th0, lik = _toy()
        for _ in range(5):
            par = MeanFieldParams(1.5, np.where(pr.retained, pr.sigma * rng.normal(size=pr.sigma.size), 0),
                                  pr.sigma * rng.uniform(0.1, 2, pr.sigma.size), pr.retained)
            assert evaluate_R(par, pr, th0, fm, 50, 50, rng)[0] >= 0


class TestFunctionals:
    def test_concentrated_at_truth(self, rng):
        fm = darcy_map(j_max=6, family="db4")
        th0 = smooth_theta0(fm.basis).values
        par = MeanFieldParams(1.0, th0, np.full(th0.size, B_MIN), np.ones(th0.size, bool))
        out = posterior_functionals(par, th0, fm, 2.0, 50, rng)
        assert out["prediction"] < 1e-6 and out["parameter"] < 1e-6

    def test_linear_toy_closed_form(self):
        fm = linear_toy_map(j_max=4, family="db4")
        r = np.random.default_rng(1)
        n = fm.basis.size
        th0, a = r.normal(size=(2, n))
        b = r.uniform(0.1, 0.5, n)
        q = 1.5
        out = posterior_functionals(MeanFieldParams(q, a, b, np.ones(n, bool)), th0, fm, 2.0, 40_000,
                                    np.random.default_rng(2))
        exact = np.sum((a - th0) ** 2) + np.sum(b ** 2) * pexp.abs_moment(q, 1.0, 2.0)
        assert out["prediction"] == pytest.approx(exact, rel=0.01)
        assert out["parameter"] == pytest.approx(exact, rel=0.01)

    def test_monotone_in_scale(self):
        fm = linear_toy_map(j_max=4, family="db4")
        n = fm.basis.size
        th0 = np.random.default_rng(3).normal(size=n)
        vals = [posterior_functionals(MeanFieldParams(2.0, th0, np.full(n, s), np.ones(n, bool)), th0, fm, 2.0,
                                      500, np.random.default_rng(4))["prediction"] for s in (0.1, 0.2, 0.4, 0.8)]
        assert np.all(np.diff(vals) > 0)

    def test_tau_positive(self, rng):
        fm = linear_toy_map(j_max=3)
        par = MeanFieldParams(2.0, np.zeros(8), np.ones(8), np.ones(8, bool))
        with pytest.raises(ValueError):
            posterior_functionals(par, np.zeros(8), fm, 0.0, 10, rng)
