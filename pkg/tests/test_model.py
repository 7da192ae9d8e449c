import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from jointsurv.data import SurvivalRecord
from jointsurv.model import (
    MAX_EXPONENT,
    CohortArrays,
    JointModelSpec,
    ModelError,
    association_hr,
    cumulative_hazard,
    fit_weibull_mle,
    joint_hazard,
    log_posterior,
    log_prior,
    longitudinal_loglik,
    make_state,
    survival_loglik,
)
from jointsurv.model import survival_terms, longitudinal_terms_from_stats, link_coefficients

from conftest import build_cohort


@pytest.fixture(scope="module")
def cohort():
    return build_cohort([
        ("P1", 20.0, 1, "a", [(0.0, 30.0), (3.0, 28.0), (9.0, 33.0)]),
        ("P2", 14.5, 0, "a", [(0.0, 44.0), (6.0, 40.0)]),
        ("P3", 8.0, 1, "b", [(0.0, 21.0), (2.0, 22.5), (5.0, 24.0)]),
        ("P4", 32.0, 0, "b", [(0.0, 55.0)]),
        ("P5", 26.0, 1, "c", [(0.0, 18.0), (4.0, 16.0), (12.0, 15.0), (20.0, 13.0)]),
    ])


@pytest.fixture(scope="module")
def arrays(cohort):
    return CohortArrays.ensure(cohort)


class TestCumulativeHazard:
    def test_kappa1_current_value_closed_form(self, cohort, arrays):
        """kappa = 1, current-value link, zero random effects: the cumulative
        hazard is exp(phi0) e^(a b0) (e^(a b1 t) - 1) / (a b1)."""
        spec = JointModelSpec()
        beta0, beta1, alpha, phi0 = 30.0, 0.5, 0.02, -4.0
        phi = np.zeros(arrays.n_groups)
        phi[0] = phi0
        state = make_state(arrays, spec, beta0=beta0, beta1=beta1, kappa=1.0,
                           phi=phi, alpha=alpha)
        for t in [1.0, 6.0, 12.0, 60.0, 600.0]:
            got = cumulative_hazard(state, arrays, patient=0, t=t)
            want = math.exp(phi0) * math.exp(alpha * beta0) * math.expm1(alpha * beta1 * t) / (alpha * beta1)
            assert got == pytest.approx(want, rel=1e-8)

    def test_quadrature_against_adaptive_integration(self, cohort, arrays):
        """For non-integer shape the integrand t^(kappa-1) e^(C+Dt) has an
        algebraic endpoint singularity, so fixed Gauss-Legendre carries a
        known bias that must shrink as nodes are added; at kappa = 1 the
        integrand is entire and 15 nodes are essentially exact."""
        spec = JointModelSpec()
        rng = np.random.default_rng(42)
        for kappa, envelope in [(0.7, 2e-2), (1.0, 1e-10), (1.5, 1e-3), (2.3, 1e-4)]:
            state = make_state(
                arrays, spec,
                beta0=rng.uniform(20, 40), beta1=rng.uniform(0.1, 0.9),
                kappa=kappa, alpha=rng.uniform(-0.03, 0.03),
                phi=np.append(rng.uniform(-6, -3), rng.uniform(-0.5, 0.5, arrays.n_groups - 1)),
                b0=rng.normal(0, 4, arrays.n_patients),
                b1=rng.normal(0, 0.05, arrays.n_patients),
            )
            pat = int(rng.integers(arrays.n_patients))
            t = float(rng.uniform(10, 80))
            want, _ = integrate.quad(
                lambda s: joint_hazard(state, arrays, pat, s), 0.0, t,
                epsabs=1e-13, epsrel=1e-13, limit=400)
            err15 = abs(cumulative_hazard(state, arrays, pat, t, n_quadrature=15) - want) / want
            err60 = abs(cumulative_hazard(state, arrays, pat, t, n_quadrature=60) - want) / want
            assert err15 < envelope, (kappa, err15)
            if err15 > 1e-9:
                assert err60 < err15 / 2, (kappa, err15, err60)

    def test_slope_link_closed_form(self, cohort, arrays):
        # slope link has no time-varying term: H(t) = exp(C) t^kappa exactly
        spec = JointModelSpec(functional="slope")
        state = make_state(arrays, spec, beta1=0.4, kappa=1.7, alpha=0.8)
        c, d = link_coefficients(state, arrays)
        assert np.all(d == 0.0)
        got = cumulative_hazard(state, arrays, patient=2, t=30.0)
        assert got == pytest.approx(math.exp(c[2]) * 30.0 ** 1.7, rel=1e-12)

    def test_hazard_positive_and_increasing_h(self, arrays):
        spec = JointModelSpec()
        state = make_state(arrays, spec, alpha=0.01)
        ts = [0.5, 1.0, 5.0, 20.0]
        values = [cumulative_hazard(state, arrays, 0, t) for t in ts]
        assert all(v > 0 for v in values)
        assert all(b > a for a, b in zip(values, values[1:]))


class TestLikelihoods:
    def test_exponential_survival_oracle(self, arrays):
        """kappa = 1, alpha = 0: Weibull PH reduces to the exponential model
        whose log-likelihood is sum(d_i xb_i - exp(xb_i) t_i)."""
        spec = JointModelSpec()
        phi = np.array([-3.5, 0.4, -0.2])
        state = make_state(arrays, spec, kappa=1.0, alpha=0.0, phi=phi)
        got = survival_loglik(state, arrays)
        xb = arrays.x_design @ phi
        want = float(np.sum(arrays.event * xb - np.exp(xb) * arrays.os_time))
        assert got == pytest.approx(want, rel=1e-12)

    def test_longitudinal_loglik_scipy_oracle(self, arrays):
        spec = JointModelSpec()
        rng = np.random.default_rng(5)
        b0 = rng.normal(0, 3, arrays.n_patients)
        b1 = rng.normal(0, 0.04, arrays.n_patients)
        state = make_state(arrays, spec, beta0=28.0, beta1=0.3, sigma=4.5, b0=b0, b1=b1)
        got = longitudinal_loglik(state, arrays)
        want = 0.0
        for i in range(arrays.n_patients):
            sel = arrays.rec_pid == i
            mean = 28.0 + b0[i] + (0.3 + b1[i]) * arrays.rec_t[sel]
            want += float(np.sum(stats.norm.logpdf(arrays.rec_y[sel], mean, 4.5)))
        assert got == pytest.approx(want, rel=1e-12)

    def test_sufficient_stats_match_direct_residuals(self, arrays, rng):
        # the cached per-patient sums must reproduce the naive residual sum
        beta0 = rng.uniform(10, 50)
        beta1 = rng.uniform(-0.5, 0.9)
        b0 = rng.normal(0, 5, arrays.n_patients)
        b1 = rng.normal(0, 0.1, arrays.n_patients)
        terms = longitudinal_terms_from_stats(arrays, beta0, beta1, 3.0, b0, b1)
        for i in range(arrays.n_patients):
            sel = arrays.rec_pid == i
            resid = arrays.rec_y[sel] - (beta0 + b0[i] + (beta1 + b1[i]) * arrays.rec_t[sel])
            n_i = int(np.sum(sel))
            want = -0.5 * n_i * math.log(2 * math.pi * 9.0) - 0.5 * float(resid @ resid) / 9.0
            assert terms[i] == pytest.approx(want, rel=1e-10)

    def test_exponent_cap_counts(self, arrays):
        # absurd linear predictors hit the overflow guard and are counted
        c = np.full(arrays.n_patients, 800.0)
        d = np.zeros(arrays.n_patients)
        terms, ncap = survival_terms(arrays, 1.0, c, d)
        assert ncap > 0
        assert np.all(np.isfinite(terms))

    def test_max_exponent_is_conservative(self):
        assert np.isfinite(math.exp(MAX_EXPONENT))


class TestPriors:
    def test_out_of_support_states(self, arrays):
        spec = JointModelSpec()
        inside = make_state(arrays, spec)
        assert np.isfinite(log_prior(inside, spec))
        # constructible states outside the prior support score -inf
        for kw in [dict(beta0=61.0), dict(beta0=-0.5), dict(beta1=1.5),
                   dict(sigma=25.0), dict(omega0=20.5)]:
            state = make_state(arrays, spec, **kw)
            assert log_prior(state, spec) == -math.inf, kw
        # scale parameters that are nonsense are rejected at construction
        for kw in [dict(sigma=-1.0), dict(kappa=-0.2)]:
            with pytest.raises(ModelError):
                make_state(arrays, spec, **kw)

    def test_widened_slope_prior(self, arrays):
        narrow = JointModelSpec()
        wide = JointModelSpec(widen_slope_prior=True)
        state = make_state(arrays, narrow, beta1=-0.4)
        assert log_prior(state, narrow) == -math.inf
        assert np.isfinite(log_prior(state, wide))

    def test_kappa_exponential_prior_value(self, arrays):
        spec = JointModelSpec()
        s1 = make_state(arrays, spec, kappa=1.0)
        s2 = make_state(arrays, spec, kappa=2.0)
        got = log_prior(s2, spec) - log_prior(s1, spec)
        want = stats.expon.logpdf(2.0, scale=1 / 0.003) - stats.expon.logpdf(1.0, scale=1 / 0.003)
        assert got == pytest.approx(want, rel=1e-12)

    def test_random_effects_gaussian(self, arrays):
        spec = JointModelSpec()
        base = make_state(arrays, spec)
        moved = make_state(arrays, spec, b0=np.eye(arrays.n_patients)[0] * 4.0)
        got = log_prior(moved, spec) - log_prior(base, spec)
        want = stats.norm.logpdf(4.0, 0, 8.0) - stats.norm.logpdf(0.0, 0, 8.0)
        assert got == pytest.approx(want, rel=1e-12)

    def test_exchangeable_prior_shrinks_to_mean(self, arrays):
        spec = JointModelSpec(association="exchangeable")
        tight = make_state(arrays, spec, alpha=0.01, alpha_k=np.full(arrays.n_groups, 0.01), tau=0.2)
        spread = make_state(arrays, spec, alpha=0.01,
                            alpha_k=np.array([0.01, 0.3, -0.2]), tau=0.2)
        assert log_prior(tight, spec) > log_prior(spread, spec)


class TestLogPosteriorGradient:
    def _vector_view(self, arrays, spec, rng):
        values = dict(
            beta0=rng.uniform(20, 40), beta1=rng.uniform(0.1, 0.8),
            sigma=rng.uniform(2, 8), omega0=rng.uniform(4, 12), omega1=rng.uniform(0.02, 0.2),
            kappa=rng.uniform(0.7, 1.8), alpha=rng.uniform(-0.02, 0.02),
            phi=np.append(rng.uniform(-5, -3), rng.uniform(-0.4, 0.4, arrays.n_groups - 1)),
            b0=rng.normal(0, 2, arrays.n_patients), b1=rng.normal(0, 0.03, arrays.n_patients),
        )

        def f(adjust):
            kw = {k: (np.array(v, dtype=float, copy=True) if isinstance(v, np.ndarray) else v)
                  for k, v in values.items()}
            for key, idx, delta in adjust:
                if idx is None:
                    kw[key] = kw[key] + delta
                else:
                    kw[key][idx] += delta
            return log_posterior(make_state(arrays, spec, **kw), arrays, spec)

        coords = [("beta0", None), ("beta1", None), ("sigma", None), ("omega0", None),
                  ("omega1", None), ("kappa", None), ("alpha", None),
                  ("phi", 0), ("phi", 1), ("b0", 0), ("b1", 2)]
        return f, coords

    def test_richardson_consistency(self, arrays):
        """Central differences at shrinking step sizes must agree after
        Richardson extrapolation: catches kinks and caching errors."""
        spec = JointModelSpec()
        rng = np.random.default_rng(11)
        for _ in range(3):
            f, coords = self._vector_view(arrays, spec, rng)
            for key, idx in coords:
                h = 1e-4

                def central(step):
                    return (f([(key, idx, step)]) - f([(key, idx, -step)])) / (2 * step)

                d1, d2, d3 = central(h), central(h / 2), central(h / 4)
                r1 = (4 * d2 - d1) / 3
                r2 = (4 * d3 - d2) / 3
                assert r2 == pytest.approx(r1, rel=1e-4, abs=1e-6), (key, idx)


class TestWeibullMle:
    def test_exponential_no_censoring_oracle(self):
        rng = np.random.default_rng(3)
        times = rng.exponential(12.0, 300)
        records = [SurvivalRecord(f"P{i:03d}", float(t), True, "g") for i, t in enumerate(times)]
        fit = fit_weibull_mle(records, fix_shape=1.0)
        lam_hat = len(times) / float(np.sum(times))
        assert fit.shape == 1.0
        assert fit.shape_fixed
        assert fit.phi[0] == pytest.approx(math.log(lam_hat), abs=1e-6)

    def test_matches_generic_optimizer(self):
        rng = np.random.default_rng(9)
        n = 150
        groups = rng.choice(["a", "b", "c"], n)
        lam = {"a": 0.05, "b": 0.08, "c": 0.03}
        times = np.array([rng.weibull(1.4) / lam[g] ** (1 / 1.4) for g in groups])
        cens = rng.uniform(5, 60, n)
        records = [
            SurvivalRecord(f"P{i:03d}", float(min(t, c)), bool(t <= c), str(g))
            for i, (t, c, g) in enumerate(zip(times, cens, groups))
        ]
        fit = fit_weibull_mle(records, tumour_groups=("a", "b", "c"))

        t_obs = np.array([r.os_time for r in records])
        d = np.array([float(r.event) for r in records])
        x = np.zeros((n, 3))
        x[:, 0] = 1.0
        for j, g in enumerate(("a", "b", "c")):
            if j > 0:
                x[:, j] = [1.0 if r.tumour_group == g else 0.0 for r in records]

        def negll(theta):
            k = math.exp(theta[0])
            xb = x @ theta[1:]
            return -float(np.sum(d * (math.log(k) + (k - 1) * np.log(t_obs) + xb)
                                 - np.exp(xb) * t_obs ** k))

        best = None
        for start in ([0.0, -3.0, 0.0, 0.0], [0.3, -2.0, 0.5, -0.5]):
            res = optimize.minimize(negll, start, method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
            if best is None or res.fun < best.fun:
                best = res
        assert -fit.loglik == pytest.approx(best.fun, abs=1e-6)
        assert fit.shape == pytest.approx(math.exp(best.x[0]), rel=1e-4)
        np.testing.assert_allclose(fit.phi, best.x[1:], rtol=2e-4, atol=2e-4)

    def test_covariance_sane(self):
        rng = np.random.default_rng(21)
        times = rng.weibull(1.2, 200) * 20
        records = [SurvivalRecord(f"P{i:03d}", float(t), True, "g") for i, t in enumerate(times)]
        fit = fit_weibull_mle(records)
        assert fit.cov.shape == (2, 2)
        assert np.all(np.linalg.eigvalsh(fit.cov) > 0)

    def test_all_censored_rejected(self):
        records = [SurvivalRecord(f"P{i}", 5.0 + i, False, "g") for i in range(10)]
        with pytest.raises(ModelError):
            fit_weibull_mle(records)


class TestSpecAndNaming:
    def test_association_hr_per_10mm(self):
        # 10-mm increase in SLD; alpha = ln(1.09)/10 gives HR 1.09
        assert association_hr(math.log(1.09) / 10.0) == pytest.approx(1.09, rel=1e-12)
        assert association_hr(0.0) == 1.0

    def test_spec_roundtrip(self):
        spec = JointModelSpec(association="exchangeable", functional="slope",
                              random_slope=False, widen_slope_prior=True)
        again = JointModelSpec.from_dict(spec.to_dict())
        assert again == spec

    def test_spec_aliases_and_unknown_keys(self):
        assert JointModelSpec.from_dict({"functional": "current"}).functional == "current_value"
        with pytest.raises(ModelError):
            JointModelSpec.from_dict({"assocation": "common"})

    def test_invalid_options_rejected(self):
        with pytest.raises(ModelError):
            JointModelSpec(association="shared")
        with pytest.raises(ModelError):
            JointModelSpec(functional="acceleration")
