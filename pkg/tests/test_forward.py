"""Links, Darcy and subdiffusion solvers, forward maps and condition probes."""
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg, special

from besov_vi.forward import darcy, subdiffusion
from besov_vi.forward.links import LinkFunction, link_apply, link_inverse
from besov_vi.forward.maps import darcy_map, forward_apply, linear_toy_map, subdiffusion_map
from besov_vi.forward.probes import pair_distances, probe_conditions
from besov_vi.prior import BesovPriorSpec, sample_coefficients
from besov_vi.wavelets import CoeffTree


def _ml_series(beta, z, terms=200):
    """Mittag-Leffler E_beta(z) by its power series in arbitrary precision."""
    with mpmath.workdps(60):
        z = mpmath.mpf(z)
        return float(mpmath.fsum(z ** k / mpmath.gamma(beta * k + 1) for k in range(terms)))


class TestLinks:
    @pytest.mark.parametrize("link", [LinkFunction("logistic", m0=2.0), LinkFunction("logistic", m0=7.5),
                                      LinkFunction("darcy-softplus", k_min=0.0),
                                      LinkFunction("darcy-softplus", k_min=0.5)])
    def test_unit_at_zero(self, link):
        assert link_apply(link, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_logistic_limits(self):
        link = LinkFunction("logistic", m0=2.0)
        assert abs(link.apply(50.0) - 2.0) < 1e-6
        assert abs(link.apply(-50.0)) < 1e-6

    def test_softplus_closed_form(self):
        t = np.linspace(-5, 5, 11)
        ref = np.log1p(np.exp(t * math.log(2))) / math.log(2)
        np.testing.assert_allclose(LinkFunction("darcy-softplus").apply(t), ref, rtol=1e-14)

    @pytest.mark.parametrize("link", [LinkFunction("logistic", m0=3.0), LinkFunction("darcy-softplus", k_min=0.3)])
    def test_increasing_and_range(self, link):
        t = np.linspace(-30, 30, 10_000)
        assert np.all(link.derivative(t) > 0)
        f = link.apply(t)
        lo, hi = link.range
        assert np.all(f > lo) and np.all(f < hi)
        h = 1e-6
        s = np.linspace(-8, 8, 33)
        np.testing.assert_allclose(link.derivative(s), (link.apply(s + h) - link.apply(s - h)) / (2 * h),
                                   rtol=1e-6, atol=1e-9)

    @given(st.floats(-20, 20), st.floats(1.1, 10), st.floats(0, 0.9))
    def test_inverse(self, t, m0, k_min):
        for link in (LinkFunction("logistic", m0=m0), LinkFunction("darcy-softplus", k_min=k_min)):
            assert link_inverse(link, link_apply(link, t)) == pytest.approx(t, abs=1e-10 * max(1.0, abs(t)) * 100)

    def test_inverse_central_range(self):
        link = LinkFunction("logistic", m0=2.0)
        f = np.linspace(0.01, 1.99, 999)
        np.testing.assert_allclose(link.apply(link.inverse(f)), f, atol=1e-10)
        np.testing.assert_allclose(link.inverse(link.apply(link.inverse(f))), link.inverse(f), atol=1e-10)

    def test_inverse_domain(self):
        with pytest.raises(ValueError):
            LinkFunction("logistic", m0=2.0).inverse(2.0)
        with pytest.raises(ValueError):
            LinkFunction("darcy-softplus", k_min=0.5).inverse(0.5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LinkFunction("darcy-softplus", k_min=1.0)
        with pytest.raises(ValueError):
            LinkFunction("logistic", m0=1.0)


class TestDarcy:
    def _analytic_error(self, n):
        prob = darcy.DarcyProblem(d=1, n=n, g=-1.0)
        u = darcy.solve_darcy(prob, np.ones(n))
        x = (np.arange(n) + 0.5) / n
        return np.max(np.abs(u - x * (1 - x) / 2))

    def test_analytic(self):
        assert self._analytic_error(1024) < 1e-5

    def test_second_order(self):
        ns = [64, 128, 256, 512, 1024]
        errs = [self._analytic_error(n) for n in ns]
        order = -np.polyfit(np.log2(ns), np.log2(errs), 1)[0]
        assert 1.8 <= order <= 2.2

    @pytest.mark.parametrize("d,n", [(1, 128), (2, 32)])
    def test_zero_source_and_linearity(self, d, n, rng):
        prob = darcy.DarcyProblem(d=d, n=n, g=0.0)
        f = np.exp(rng.normal(0, 0.5, (n,) * d))
        np.testing.assert_array_equal(darcy.solve_darcy(prob, f), 0.0)
        g1, g2 = rng.normal(size=(2,) + (n,) * d)
        u12 = darcy.solve_darcy(prob, f, g1 + g2)
        assert np.max(np.abs(u12 - darcy.solve_darcy(prob, f, g1) - darcy.solve_darcy(prob, f, g2))) < 1e-10

    @pytest.mark.parametrize("d,n", [(1, 256), (2, 32)])
    def test_residual(self, d, n, rng):
        prob = darcy.DarcyProblem(d=d, n=n, g=-8.0, k_min=0.5)
        f = 0.6 + np.exp(rng.normal(0, 0.5, (n,) * d))
        u = darcy.solve_darcy(prob, f)
        assert darcy.residual(prob, f, u) < 1e-10 * max(1.0, np.max(np.abs(prob.source())))

    def test_one_d_matches_sparse_assembly(self, rng):
        n = 64
        prob = darcy.DarcyProblem(d=1, n=n, g=-3.0)
        f = np.exp(rng.normal(0, 0.7, n))
        A = darcy.assemble(prob, f).toarray()
        np.testing.assert_allclose(darcy.solve_darcy(prob, f), np.linalg.solve(A, prob.source()), rtol=1e-10)

    def test_ellipticity_margin(self):
        prob = darcy.DarcyProblem(d=1, n=16, k_min=0.5)
        with pytest.raises(darcy.ConditioningError):
            darcy.solve_darcy(prob, np.full(16, 0.5))
        with pytest.raises(darcy.ConditioningError):
            darcy.solve_darcy(prob, np.full(16, np.nan))

    def test_grid_power_of_two(self):
        with pytest.raises(ValueError):
            darcy.DarcyProblem(n=100)

    @pytest.mark.parametrize("d,n", [(1, 64), (2, 16)])
    def test_adjoint(self, d, n, rng):
        prob = darcy.DarcyProblem(d=d, n=n, g=-8.0)
        f = np.exp(rng.normal(0, 0.4, n ** d))
        ubar = rng.normal(size=n ** d)
        u, vjp = darcy.solve_with_adjoint(prob, f)
        grad = vjp(ubar)
        for k in rng.choice(n ** d, 6, replace=False):
            e = np.zeros_like(f)
            e[k] = 1e-6
            fd = (np.dot(ubar, darcy.solve_darcy(prob, f + e).ravel())
                  - np.dot(ubar, darcy.solve_darcy(prob, f - e).ravel())) / 2e-6
            assert np.ravel(grad)[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def _sine_problem(n, m, beta=0.5, T=0.1):
    x = (np.arange(n) + 0.5) / n
    prob = subdiffusion.SubdiffusionProblem(n=n, m=m, beta=beta, T=T, f=0.0, u0=np.sin(np.pi * x),
                                            a0=0.0, a1=0.0)
    return prob, x


class TestSubdiffusion:
    def test_oracle_routes_agree(self):
        # E_{1/2}(-z) = exp(z^2) erfc(z)
        for z in [0.1, 0.5, 1.0, 2.0, 3.0]:
            assert _ml_series(0.5, -z) == pytest.approx(special.erfcx(z), rel=1e-12)

    def test_mittag_leffler(self):
        prob, x = _sine_problem(256, 2048)
        u = subdiffusion.solve_subdiffusion(prob, np.zeros(256))
        exact = _ml_series(0.5, -np.pi ** 2 * math.sqrt(0.1)) * np.sin(np.pi * x)
        assert np.max(np.abs(u - exact)) < 2e-3

    def test_error_decreases_in_m(self):
        exact_amp = special.erfcx(np.pi ** 2 * math.sqrt(0.1))
        errs = []
        for m in [64, 128, 256, 512]:
            prob, x = _sine_problem(256, m)
            u = subdiffusion.solve_subdiffusion(prob, np.zeros(256))
            errs.append(np.max(np.abs(u - exact_amp * np.sin(np.pi * x))))
        assert np.all(np.diff(errs) < 0)

    def test_stationary(self, rng):
        n = 64
        q = rng.uniform(0, 1.5, n)
        base = subdiffusion.SubdiffusionProblem(n=n, m=10, f=1.0, u0=1.0, a0=1.0, a1=1.5)
        diag, off, load = subdiffusion.laplacian_bands(base)
        A = np.diag(diag + q) + np.diag(off, 1) + np.diag(off, -1)
        u_star = linalg.solve(A, 1.0 + load)
        for T in [0.01, 1.0, 10.0]:
            prob = subdiffusion.SubdiffusionProblem(n=n, m=40, T=T, f=1.0, u0=u_star, a0=1.0, a1=1.5)
            assert np.max(np.abs(subdiffusion.solve_subdiffusion(prob, q) - u_star)) < 1e-10

    def test_monotone_damping(self, rng):
        n = 64
        prob, _ = _sine_problem(n, 64, T=0.5)
        for _ in range(10):
            q1 = rng.uniform(0, 1.0, n)
            q2 = q1 + rng.uniform(0, 0.9, n)
            u1 = subdiffusion.solve_subdiffusion(prob, q1)
            u2 = subdiffusion.solve_subdiffusion(prob, q2)
            assert np.linalg.norm(u2) <= np.linalg.norm(u1) + 1e-14

    def test_domain(self):
        prob = subdiffusion.SubdiffusionProblem(n=8, m=4, m0=2.0)
        with pytest.raises(ValueError):
            subdiffusion.solve_subdiffusion(prob, np.full(8, 2.0))
        with pytest.raises(ValueError):
            subdiffusion.solve_subdiffusion(prob, np.full(8, -0.1))
        with pytest.raises(ValueError):
            subdiffusion.SubdiffusionProblem(beta=1.0)
        with pytest.raises(ValueError):
            subdiffusion.SubdiffusionProblem(T=0.0)

    def test_adjoint(self, rng):
        n = 32
        prob = subdiffusion.SubdiffusionProblem(n=n, m=20, T=0.5)
        q = rng.uniform(0.2, 1.5, n)
        ubar = rng.normal(size=n)
        _, vjp = subdiffusion.solve_with_adjoint(prob, q)
        grad = vjp(ubar)
        for k in range(0, n, 5):
            e = np.zeros(n)
            e[k] = 1e-6
            fd = (np.dot(ubar, subdiffusion.solve_subdiffusion(prob, q + e))
                  - np.dot(ubar, subdiffusion.solve_subdiffusion(prob, q - e))) / 2e-6
            assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-10)


class TestForwardMap:
    def test_zero_theta_is_unit_coefficient(self):
        fm = darcy_map(j_max=7, family="db4")
        out = forward_apply(fm, CoeffTree.zeros(fm.basis))
        np.testing.assert_allclose(out, darcy.solve_darcy(fm.problem, np.ones(fm.n)), rtol=1e-14)

    @pytest.mark.parametrize("make", [lambda: darcy_map(j_max=6, family="db4"),
                                      lambda: subdiffusion_map(j_max=5, family="db4", m=16),
                                      lambda: darcy_map(d=2, j_max=4)])
    def test_deterministic(self, make, rng):
        fm = make()
        th = 0.3 * rng.standard_normal(fm.basis.size)
        assert fm.apply(th).tobytes() == fm.apply(th.copy()).tobytes()

    def test_continuity(self, rng):
        fm = darcy_map(j_max=7, family="db4")
        th = 0.5 * rng.standard_normal(fm.basis.size) * fm.basis.level_factor(-2.0)
        delta = rng.standard_normal(fm.basis.size) * fm.basis.level_factor(-2.0)
        g0 = fm.node_values(fm.apply(th))
        ratios = [fm.l2_lambda(fm.node_values(fm.apply(th + s * delta)) - g0) / s for s in (1e-2, 1e-3, 1e-4)]
        assert max(ratios) / min(ratios) < 1.2

    @pytest.mark.parametrize("make", [lambda: darcy_map(j_max=6, family="db4"),
                                      lambda: subdiffusion_map(j_max=5, family="db4", m=16),
                                      lambda: darcy_map(d=2, j_max=4, family="db2"),
                                      lambda: linear_toy_map(j_max=5)])
    def test_vjp(self, make, rng):
        fm = make()
        th = 0.3 * rng.standard_normal(fm.basis.size) * fm.basis.level_factor(-1.0)
        out, vjp = fm.apply_with_vjp(th)
        nbar = rng.normal(size=fm.node_values(out).shape)
        grad = vjp(fm.node_values_vjp(nbar))

        def J(t):
            return np.sum(nbar * fm.node_values(fm.apply(t)))

        scale = np.max(np.abs(grad))
        for k in rng.choice(fm.basis.size, 5, replace=False):
            e = np.zeros(fm.basis.size)
            e[k] = 1e-6
            fd = (J(th + e) - J(th - e)) / 2e-6
            assert abs(grad[k] - fd) <= 1e-6 * scale

    def test_grid_mismatch(self):
        from besov_vi.forward.maps import ForwardMap
        from besov_vi.wavelets import WaveletBasis
        with pytest.raises(ValueError):
            ForwardMap("darcy", WaveletBasis(j_max=5), LinkFunction(), darcy.DarcyProblem(n=64))

    def test_linear_toy_l2_is_coefficient_norm(self, rng):
        fm = linear_toy_map(j_max=6, family="db4")
        th = rng.standard_normal(fm.basis.size)
        assert fm.l2_lambda(fm.node_values(fm.apply(th))) == pytest.approx(np.linalg.norm(th), rel=1e-12)

    def test_interpolation_at_nodes(self, rng):
        fm = darcy_map(j_max=5, family="db4")
        th = 0.3 * rng.standard_normal(fm.basis.size)
        nodes = fm.nodes()
        np.testing.assert_allclose(fm.predict(th, nodes), fm.node_values(fm.apply(th)), atol=1e-14)


class TestProbes:
    fm = darcy_map(j_max=7, family="db4")
    spec = BesovPriorSpec(p=1.5, alpha=2.0)

    def test_identical_pair(self, rng):
        th = sample_coefficients(self.spec, self.fm.basis, rng)
        dg, dth, df, _ = pair_distances(self.fm, th, th, 1.0)
        assert dg == 0.0 and dth == 0.0 and df == 0.0

    def test_lipschitz_and_stability(self):
        rep = probe_conditions(self.fm, self.spec, 100, np.random.default_rng(5))
        assert np.isfinite(rep.max_ratio)
        assert rep.max_ratio <= 10 * rep.median_ratio
        assert rep.stability_spearman > 0.8

    def test_needs_pairs(self, rng):
        with pytest.raises(ValueError):
            probe_conditions(self.fm, self.spec, 5, rng)
