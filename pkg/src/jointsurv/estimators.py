"""Estimator facades with the scikit-learn fit/predict idiom.

These wrap the functional core (sampler, extrapolation, Kaplan-Meier) in
objects with constructor parameters, `fit(X)`, and `get_params`, so they
compose with scikit-learn tooling such as cloning and grid iteration. X is a
CohortDataset (or, for the survival-only estimators, a list of
SurvivalRecord) rather than a feature matrix.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .data import CohortDataset, kaplan_meier, observed_rmst
from .extrapolate import (
    DEFAULT_HORIZON,
    ExtrapolationResult,
    predict_cohort,
    weibull_extrapolation,
)
from .model import JointModelSpec, ModelError, PriorSpec, fit_weibull_mle
from .sampler import McmcConfig, PosteriorSamples, diagnostics_report, run_chains


def _survival_records(X):
    if isinstance(X, CohortDataset):
        return X.survival_records()
    return list(X)


class JointSurvivalModel(BaseEstimator):
    """Bayesian joint model of SLD trajectories and overall survival.

    Defaults run a desk-scale chain (2,000 burn-in, 5,000 estimation); raise
    `burn_in` and `estimation` for production fits.
    """

    def __init__(self, association="common", functional="current_value",
                 n_quadrature=15, random_slope=True, group_intercepts=False,
                 widen_slope_prior=False, priors=None,
                 n_chains=3, burn_in=2000, estimation=5000, thin=1, seed=1,
                 adapt_window=50, monitor=None):
        self.association = association
        self.functional = functional
        self.n_quadrature = n_quadrature
        self.random_slope = random_slope
        self.group_intercepts = group_intercepts
        self.widen_slope_prior = widen_slope_prior
        self.priors = priors
        self.n_chains = n_chains
        self.burn_in = burn_in
        self.estimation = estimation
        self.thin = thin
        self.seed = seed
        self.adapt_window = adapt_window
        self.monitor = monitor

    def _spec(self) -> JointModelSpec:
        spec = JointModelSpec(
            association=self.association,
            functional=self.functional,
            n_quadrature=self.n_quadrature,
            random_slope=self.random_slope,
            group_intercepts=self.group_intercepts,
            widen_slope_prior=self.widen_slope_prior,
            priors=self.priors if self.priors is not None else PriorSpec(),
        )
        spec.validate()
        return spec

    def _config(self) -> McmcConfig:
        config = McmcConfig(
            n_chains=self.n_chains, burn_in=self.burn_in, estimation=self.estimation,
            thin=self.thin, seed=self.seed, adapt_window=self.adapt_window,
            monitor=self.monitor,
        )
        config.validate()
        return config

    def fit(self, X: CohortDataset, y=None, stream_path=None, manifest_hash=None):
        """Run the MCMC on a cohort. y is ignored (scikit-learn signature)."""
        if not isinstance(X, CohortDataset):
            raise ModelError("JointSurvivalModel.fit expects a CohortDataset")
        self.spec_ = self._spec()
        self.config_ = self._config()
        self.cohort_ = X
        self.samples_ = run_chains(self.spec_, X, self.config_,
                                   stream_path=stream_path, manifest_hash=manifest_hash)
        return self

    def _check_fitted(self) -> PosteriorSamples:
        if not hasattr(self, "samples_"):
            raise ModelError("this JointSurvivalModel is not fitted yet")
        return self.samples_

    def predict_survival(self, horizon=DEFAULT_HORIZON, seed=0, max_draws=4000,
                         grid=None, **kwargs) -> ExtrapolationResult:
        """Posterior-predictive extrapolation for the fitted cohort."""
        samples = self._check_fitted()
        return predict_cohort(samples, self.cohort_, spec=self.spec_, seed=seed,
                              horizon=horizon, max_draws=max_draws, grid=grid, **kwargs)

    def diagnostics(self, include_dic=True):
        samples = self._check_fitted()
        cohort = self.cohort_ if include_dic else None
        return diagnostics_report(samples, cohort=cohort, spec=self.spec_)

    def posterior_mean(self, parameter: str) -> float:
        return self._check_fitted().posterior_mean(parameter)

    def credible_interval(self, parameter: str, level: float = 0.95):
        return self._check_fitted().credible_interval(parameter, level=level)


class WeibullSurvivalModel(BaseEstimator):
    """Standard Weibull proportional hazards comparator (maximum likelihood)."""

    def __init__(self, fix_shape=None, n_boot=2000, seed=0):
        self.fix_shape = fix_shape
        self.n_boot = n_boot
        self.seed = seed

    def fit(self, X, y=None):
        """X: CohortDataset or iterable of SurvivalRecord."""
        records = _survival_records(X)
        groups = X.tumour_groups if isinstance(X, CohortDataset) else None
        self.fit_ = fit_weibull_mle(records, tumour_groups=groups, fix_shape=self.fix_shape)
        self.cohort_ = X if isinstance(X, CohortDataset) else None
        return self

    def _check_fitted(self):
        if not hasattr(self, "fit_"):
            raise ModelError("this WeibullSurvivalModel is not fitted yet")
        return self.fit_

    def predict_survival(self, cohort=None, horizon=DEFAULT_HORIZON,
                         grid=None, **kwargs) -> ExtrapolationResult:
        fit = self._check_fitted()
        cohort = cohort if cohort is not None else self.cohort_
        if cohort is None:
            raise ModelError("predict_survival needs a cohort for the patient mix")
        return weibull_extrapolation(fit, cohort, horizon=horizon, grid=grid,
                                     n_boot=self.n_boot, seed=self.seed, **kwargs)

    @property
    def shape_(self) -> float:
        return self._check_fitted().shape

    @property
    def loglik_(self) -> float:
        return self._check_fitted().loglik


class KaplanMeierEstimator(BaseEstimator):
    """Product-limit estimator with restricted-mean summaries."""

    def fit(self, X, y=None):
        self.curve_ = kaplan_meier(_survival_records(X))
        return self

    def _check_fitted(self):
        if not hasattr(self, "curve_"):
            raise ModelError("this KaplanMeierEstimator is not fitted yet")
        return self.curve_

    def survival_at(self, t: float) -> float:
        return self._check_fitted().survival_at(t)

    def rmst(self, horizon: float):
        return observed_rmst(self._check_fitted(), horizon)
