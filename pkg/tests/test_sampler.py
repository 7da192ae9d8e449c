import math

import numpy as np
import pytest
from scipy import stats

from jointsurv.model import (
    JointModelSpec,
    ModelError,
    PriorSpec,
    longitudinal_loglik,
    make_state,
    survival_loglik,
)
from jointsurv.sampler import (
    DrawDecoder,
    McmcConfig,
    NumericalError,
    PosteriorSamples,
    SamplerError,
    columns_matching,
    diagnostics_report,
    dic,
    initialize_chain,
    mcse_ratio_from_chains,
    parameter_names,
    rw_metropolis,
    run_chains,
    split_rhat,
)
from jointsurv.model import CohortArrays, log_posterior

from conftest import build_cohort


def small_cohort():
    return build_cohort([
        ("P1", 18.0, 1, "a", [(0.0, 30.0), (2.0, 31.0), (6.0, 34.0), (12.0, 36.0)]),
        ("P2", 14.0, 0, "a", [(0.0, 44.0), (5.0, 46.5)]),
        ("P3", 9.0, 1, "b", [(0.0, 21.0), (3.0, 22.0), (7.0, 25.0)]),
        ("P4", 30.0, 0, "b", [(0.0, 50.0), (10.0, 57.0), (20.0, 62.0)]),
        ("P5", 22.0, 1, "a", [(0.0, 18.0), (6.0, 21.0), (15.0, 27.0)]),
        ("P6", 11.0, 0, "b", [(0.0, 35.0), (4.0, 36.5)]),
    ])


class TestRwMetropolis:
    def test_normal_target_recovery(self):
        rng = np.random.default_rng(0)
        logpdf = lambda x: stats.norm.logpdf(x, 3.0, 2.0)
        samples, acc, sd = rw_metropolis(logpdf, 0.0, 40000, rng, proposal_sd=1.0, adapt=2000)
        assert samples.mean() == pytest.approx(3.0, abs=0.1)
        assert samples.std() == pytest.approx(2.0, abs=0.15)
        assert acc == pytest.approx(0.44, abs=0.08)

    def test_vector_target(self):
        rng = np.random.default_rng(1)
        cov_diag = np.array([1.0, 4.0])
        logpdf = lambda x: -0.5 * float(np.sum(x**2 / cov_diag))
        samples, acc, _ = rw_metropolis(logpdf, np.zeros(2), 60000, rng,
                                        proposal_sd=0.8, adapt=3000, target=0.23)
        assert samples.shape == (60000, 2)
        np.testing.assert_allclose(samples.std(axis=0), [1.0, 2.0], rtol=0.12)
        assert acc == pytest.approx(0.23, abs=0.06)

    def test_requires_finite_start(self):
        rng = np.random.default_rng(2)
        with pytest.raises(SamplerError):
            rw_metropolis(lambda x: -math.inf, 0.0, 10, rng)


class TestNames:
    def test_default_layout(self):
        arrays = CohortArrays.ensure(small_cohort())
        names = parameter_names(arrays, JointModelSpec())
        assert names[:4] == ("beta0", "beta1", "sigma", "omega0")
        assert "omega1" in names
        assert "kappa" in names and "alpha" in names
        assert "phi[intercept]" in names and "phi[b]" in names
        assert "b0[P1]" in names and "b1[P6]" in names
        assert "tau" not in names

    def test_exchangeable_layout(self):
        arrays = CohortArrays.ensure(small_cohort())
        names = parameter_names(arrays, JointModelSpec(association="exchangeable"))
        assert "alpha" in names and "alpha[a]" in names and "alpha[b]" in names
        assert "tau" in names

    def test_independent_layout(self):
        arrays = CohortArrays.ensure(small_cohort())
        names = parameter_names(arrays, JointModelSpec(association="independent"))
        assert "alpha" not in names
        assert "alpha[a]" in names and "tau" not in names

    def test_no_random_slope(self):
        arrays = CohortArrays.ensure(small_cohort())
        names = parameter_names(arrays, JointModelSpec(random_slope=False))
        assert "omega1" not in names
        assert not [n for n in names if n.startswith("b1[")]

    def test_group_intercepts(self):
        arrays = CohortArrays.ensure(small_cohort())
        names = parameter_names(arrays, JointModelSpec(group_intercepts=True))
        assert "beta0[a]" in names and "beta0[b]" in names and "beta0" not in names

    def test_columns_matching(self):
        names = ("beta0", "b0[P1]", "b0[P2]", "b1[P1]")
        assert columns_matching(names, "b0") == [1, 2]
        assert columns_matching(names, "beta0") == [0]


@pytest.fixture(scope="module")
def fitted():
    cohort = small_cohort()
    spec = JointModelSpec()
    config = McmcConfig(n_chains=2, burn_in=300, estimation=900, thin=3, seed=5)
    return cohort, spec, run_chains(spec, cohort, config)


class TestRunChains:
    def test_shapes_and_seeds(self, fitted):
        cohort, spec, samples = fitted
        assert samples.n_chains == 2
        assert all(chain.draws.shape == (300, len(samples.param_names))
                   for chain in samples.chains)
        assert [c.seed for c in samples.chains] == [5, 6]

    def test_draws_respect_support(self, fitted):
        _, _, samples = fitted
        for name, lo, hi in [("beta0", 0, 60), ("beta1", 0, 1), ("sigma", 0, 20),
                             ("omega0", 0, 20), ("omega1", 0, 20), ("kappa", 0, np.inf)]:
            x = samples.pooled(name)
            assert np.all(x > lo) and np.all(x < hi), name

    def test_acceptance_rates_near_targets(self, fitted):
        _, _, samples = fitted
        for chain in samples.chains:
            assert 0.1 < chain.acceptance["beta1"] < 0.9
            assert 0.05 < chain.acceptance["survival"] < 0.6

    def test_proposal_scales_frozen_after_burnin(self, fitted):
        _, _, samples = fitted
        for chain in samples.chains:
            end, final = chain.proposal_sds_burn_end, chain.proposal_sds_final
            assert set(end) == set(final)
            for key in end:
                np.testing.assert_array_equal(np.asarray(end[key]), np.asarray(final[key]))

    def test_determinism(self):
        cohort = small_cohort()
        spec = JointModelSpec()
        config = McmcConfig(n_chains=1, burn_in=100, estimation=200, seed=9)
        a = run_chains(spec, cohort, config)
        b = run_chains(spec, cohort, config)
        np.testing.assert_array_equal(a.chains[0].draws, b.chains[0].draws)

    def test_posterior_summaries(self, fitted):
        _, _, samples = fitted
        mean = samples.posterior_mean("sigma")
        lo, hi = samples.credible_interval("sigma")
        assert lo < mean < hi
        with pytest.raises(ModelError):
            samples.index("not_a_parameter")

    def test_monitor_subset(self):
        cohort = small_cohort()
        spec = JointModelSpec()
        config = McmcConfig(n_chains=1, burn_in=100, estimation=200, seed=2,
                            monitor=("beta0", "beta1", "sigma"))
        samples = run_chains(spec, cohort, config)
        assert samples.param_names == ("beta0", "beta1", "sigma")
        report = diagnostics_report(samples, cohort=cohort, spec=spec)
        assert report.dic is None  # deviance needs the dropped columns

    def test_initialize_chain_finite(self):
        cohort = small_cohort()
        for spec in [JointModelSpec(), JointModelSpec(association="exchangeable"),
                     JointModelSpec(association="independent"),
                     JointModelSpec(functional="slope")]:
            state = initialize_chain(spec, cohort, seed=1)
            arrays = CohortArrays.ensure(cohort)
            assert np.isfinite(log_posterior(state, arrays, spec))


class TestFactorisation:
    def test_alpha_fixed_zero_decouples_longitudinal(self):
        """With the association pinned at zero the biomarker submodel must be
        untouched by the survival data: identical longitudinal chains on two
        cohorts that differ only in outcomes."""
        base = [
            ("P1", 18.0, 1, "a", [(0.0, 30.0), (2.0, 31.0), (6.0, 34.0)]),
            ("P2", 14.0, 0, "a", [(0.0, 44.0), (5.0, 46.5)]),
            ("P3", 9.0, 1, "b", [(0.0, 21.0), (3.0, 22.0), (7.0, 25.0)]),
            ("P4", 30.0, 0, "b", [(0.0, 50.0), (10.0, 57.0)]),
        ]
        flipped = [(pid, os_t * 2.0, 1 - ev, g, visits) for pid, os_t, ev, g, visits in base]
        spec = JointModelSpec(priors=PriorSpec(alpha_fixed=0.0))
        config = McmcConfig(n_chains=1, burn_in=200, estimation=400, seed=4)
        sa = run_chains(spec, build_cohort(base), config)
        sb = run_chains(spec, build_cohort(flipped), config)
        for name in ["beta0", "beta1", "sigma", "omega0", "omega1", "b0[P1]", "b1[P3]"]:
            np.testing.assert_array_equal(sa.pooled(name), sb.pooled(name), err_msg=name)
        # while the survival block did respond to the changed outcomes
        assert not np.array_equal(sa.pooled("kappa"), sb.pooled("kappa"))

    def test_alpha_fixed_column_constant(self):
        cohort = small_cohort()
        spec = JointModelSpec(priors=PriorSpec(alpha_fixed=0.01))
        config = McmcConfig(n_chains=1, burn_in=50, estimation=100, seed=8)
        samples = run_chains(spec, cohort, config)
        np.testing.assert_array_equal(samples.pooled("alpha"), np.full(100, 0.01))


class TestDiagnostics:
    def test_split_rhat_mixed_chains(self, rng):
        chains = [rng.normal(0, 1, 4000) for _ in range(3)]
        assert split_rhat(chains) < 1.02

    def test_split_rhat_separated_chains(self, rng):
        chains = [rng.normal(0, 1, 4000), rng.normal(10, 1, 4000)]
        assert split_rhat(chains) > 3.0

    def test_split_rhat_within_chain_drift(self, rng):
        # a trend inside the chains is caught by splitting each in half,
        # even when the chains agree with each other
        drifting = np.concatenate([rng.normal(0, 1, 2000), rng.normal(8, 1, 2000)])
        assert split_rhat([drifting, drifting.copy()]) > 2.0

    def test_single_chain_rejected(self, rng):
        with pytest.raises(ModelError):
            split_rhat([rng.normal(0, 1, 100)])

    def test_constant_chain_flagged(self):
        value, flagged = __import__("jointsurv.sampler", fromlist=["x"])._split_rhat_flagged(
            [np.ones(100), np.ones(100)])
        assert value == 1.0
        assert flagged

    def test_mcse_ratio_iid(self, rng):
        n = 10000
        chains = [rng.normal(0, 1, n) for _ in range(3)]
        ratio = mcse_ratio_from_chains(chains)
        expected = 1.0 / math.sqrt(3 * n)
        assert 0.5 * expected < ratio < 1.5 * expected

    def test_mcse_correlated_larger(self, rng):
        n = 10000
        rho = 0.95
        x = np.empty(n)
        x[0] = rng.normal()
        noise = rng.normal(0, math.sqrt(1 - rho**2), n)
        for i in range(1, n):
            x[i] = rho * x[i - 1] + noise[i]
        assert mcse_ratio_from_chains([x]) > 3.0 / math.sqrt(n)

    def test_mcse_too_short(self):
        with pytest.raises(NumericalError):
            mcse_ratio_from_chains([np.arange(50.0)])

    def test_report_flags(self, s4_samples, s4_cohort):
        report = diagnostics_report(s4_samples, cohort=s4_cohort)
        doc = report.to_dict()
        assert doc["schema_version"] == "1"
        assert set(doc["rhat"]) == set(s4_samples.param_names)
        assert doc["dic"]["pd"] > 0
        assert isinstance(doc["flags"]["rhat_ok"], bool)
        assert doc["flags"]["rhat_threshold"] == 1.05
        assert doc["flags"]["mcse_threshold"] == 0.05


class TestDic:
    def test_deviance_matches_direct_loglik(self, s4_samples, s4_cohort):
        spec = JointModelSpec()
        arrays = CohortArrays.ensure(s4_cohort)
        decoder = DrawDecoder(s4_samples.param_names, arrays, spec)
        row = s4_samples.stacked()[17]

        idx = {name: j for j, name in enumerate(s4_samples.param_names)}
        state = make_state(
            arrays, spec,
            beta0=row[idx["beta0"]], beta1=row[idx["beta1"]], sigma=row[idx["sigma"]],
            omega0=row[idx["omega0"]], omega1=row[idx["omega1"]], kappa=row[idx["kappa"]],
            phi=np.array([row[idx[f"phi[{g}]"]] for g in ("intercept",) + arrays.tumour_groups[1:]]),
            alpha=row[idx["alpha"]],
            b0=np.array([row[idx[f"b0[{p}]"]] for p in arrays.patient_ids]),
            b1=np.array([row[idx[f"b1[{p}]"]] for p in arrays.patient_ids]),
        )
        want = -2.0 * (longitudinal_loglik(state, arrays) + survival_loglik(state, arrays))
        assert decoder.deviance(row) == pytest.approx(want, rel=1e-10)

    def test_identical_draws_zero_pd(self, s4_samples, s4_cohort):
        frozen = PosteriorSamples(
            param_names=s4_samples.param_names,
            chains=[type(c)(seed=c.seed, draws=np.repeat(c.draws[:1], 50, axis=0),
                            acceptance=c.acceptance, cap_events=0,
                            proposal_sds_burn_end=c.proposal_sds_burn_end,
                            proposal_sds_final=c.proposal_sds_final)
                    for c in s4_samples.chains[:1]],
            spec=s4_samples.spec, config=s4_samples.config,
            tumour_groups=s4_samples.tumour_groups, patient_ids=s4_samples.patient_ids,
        )
        result = dic(frozen, s4_cohort)
        assert result.pd == pytest.approx(0.0, abs=1e-8)
        assert result.dic == pytest.approx(result.dbar, abs=1e-6)

    def test_pd_positive_on_real_samples(self, s4_samples, s4_cohort):
        result = dic(s4_samples, s4_cohort)
        assert result.pd > 0
        assert result.dic == pytest.approx(result.dbar + result.pd, rel=1e-12)

    def test_missing_parameter_rejected(self, s4_samples, s4_cohort):
        arrays = CohortArrays.ensure(s4_cohort)
        with pytest.raises(ModelError, match="lack"):
            DrawDecoder(("beta0", "beta1"), arrays, JointModelSpec())


class TestCsvRoundtrip:
    def test_roundtrip(self, s4_samples, tmp_path):
        path = tmp_path / "post.csv"
        s4_samples.to_csv(path, manifest_hash="deadbeef")
        text = path.read_text()
        assert text.startswith("# manifest_hash=deadbeef\n")
        again = PosteriorSamples.from_csv(path)
        assert again.param_names == s4_samples.param_names
        assert again.n_chains == s4_samples.n_chains
        for a, b in zip(again.chains, s4_samples.chains):
            np.testing.assert_array_equal(a.draws, b.draws)

    def test_iteration_column_respects_thinning(self, tmp_path):
        cohort = small_cohort()
        config = McmcConfig(n_chains=1, burn_in=60, estimation=120, thin=6, seed=3)
        samples = run_chains(JointModelSpec(), cohort, config)
        path = tmp_path / "p.csv"
        samples.to_csv(path)
        lines = path.read_text().splitlines()
        first = lines[1].split(",")[:2]
        second = lines[2].split(",")[:2]
        assert first == ["1", "6"]
        assert second == ["1", "12"]

    def test_malformed_csv_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("chain,iteration,beta0\n1,1,notanumber\n")
        with pytest.raises(ModelError):
            PosteriorSamples.from_csv(bad)


class TestMcmcConfig:
    def test_presets(self):
        smoke = McmcConfig.smoke()
        assert (smoke.burn_in, smoke.estimation) == (2000, 5000)
        paper = McmcConfig.paper()
        assert (paper.burn_in, paper.estimation) == (50000, 150000)
        scaled = McmcConfig.smoke(scale=5)
        assert (scaled.burn_in, scaled.estimation) == (10000, 25000)

    def test_validation(self):
        with pytest.raises(ModelError):
            McmcConfig(n_chains=0)
        with pytest.raises(ModelError):
            McmcConfig(thin=7, estimation=100)
        with pytest.raises(ModelError):
            McmcConfig(n_chains=2, seeds=(1, 1))

    def test_roundtrip(self):
        config = McmcConfig(n_chains=2, burn_in=10, estimation=20, monitor=("beta0",))
        assert McmcConfig.from_dict(config.to_dict()) == config
        with pytest.raises(ModelError):
            McmcConfig.from_dict({"nchains": 3})
