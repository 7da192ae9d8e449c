"""Adaptive Metropolis-within-Gibbs sampling for the joint model.

One sweep updates, in fixed order: the longitudinal fixed effects (beta0,
beta1), the variance components (log scale), every patient's (b0_i, b1_i)
block simultaneously (they are conditionally independent), the survival
block (ln kappa, phi) jointly, and the association parameters. Gaussian
random-walk proposals are tuned by Robbins-Monro adaptation toward 0.44
acceptance for scalar sites and 0.23 for multivariate blocks; adaptation is
frozen when burn-in ends so the retained chain is Markov.

Per-patient likelihood terms are cached and only the terms a block touches
are recomputed, which keeps a sweep at O(n) likelihood work plus one
quadrature pass per block that moves the hazard.

This module also carries the convergence diagnostics (split R-hat,
batch-means MCSE) and the conditional DIC used for model comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    LOG_2PI,
    AssociationParams,
    CohortArrays,
    JointModelSpec,
    LongitudinalParams,
    ModelError,
    NumericalError,
    ParameterState,
    SurvivalParams,
    log_posterior,
    log_prior,
    longitudinal_terms_from_stats,
    survival_terms,
)

SCHEMA_VERSION = "1"


class SamplerError(NumericalError):
    """Raised when a chain cannot be initialised or leaves the support."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class McmcConfig:
    """MCMC run settings.

    ``seeds`` overrides the derived per-chain seeds (seed, seed+1, ...).
    ``monitor`` restricts the recorded parameters (default: all, including
    random effects, which the DIC and extrapolation need).
    """

    n_chains: int = 3
    burn_in: int = 50000
    estimation: int = 150000
    thin: int = 1
    seed: int = 1
    seeds: tuple[int, ...] | None = None
    adapt_window: int = 50
    target_scalar: float = 0.44
    target_block: float = 0.23
    monitor: tuple[str, ...] | None = None
    stream_every: int = 1000
    rhat_threshold: float = 1.05
    mcse_threshold: float = 0.05

    def __post_init__(self):
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
        if self.monitor is not None:
            self.monitor = tuple(self.monitor)
        self.validate()

    @classmethod
    def smoke(cls, scale: int = 1, **kwargs) -> "McmcConfig":
        """Desk-scale settings (2,000 burn-in / 5,000 estimation at scale 1)."""
        return cls(burn_in=2000 * scale, estimation=5000 * scale, **kwargs)

    @classmethod
    def paper(cls, **kwargs) -> "McmcConfig":
        """Full-scale settings: 50,000 burn-in / 150,000 estimation, 3 chains."""
        return cls(burn_in=50000, estimation=150000, **kwargs)

    def effective_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(self.seeds)
        return tuple(self.seed + i for i in range(self.n_chains))

    @property
    def n_kept(self) -> int:
        return self.estimation // self.thin

    def validate(self) -> None:
        if self.n_chains < 1:
            raise ModelError("n_chains must be at least 1")
        if self.estimation <= 0:
            raise ModelError("estimation iterations must be positive")
        if self.burn_in < 0:
            raise ModelError("burn_in must be nonnegative")
        if self.thin < 1 or self.estimation % self.thin != 0:
            raise ModelError("thin must be >= 1 and divide the estimation iterations")
        seeds = self.effective_seeds()
        if len(seeds) != self.n_chains or len(set(seeds)) != self.n_chains:
            raise ModelError("need one distinct seed per chain")
        if self.adapt_window < 1:
            raise ModelError("adapt_window must be positive")
        if not (0.0 < self.target_scalar < 1.0 and 0.0 < self.target_block < 1.0):
            raise ModelError("target acceptance rates must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = {
            "n_chains": self.n_chains,
            "burn_in": self.burn_in,
            "estimation": self.estimation,
            "thin": self.thin,
            "seed": self.seed,
            "adapt_window": self.adapt_window,
            "target_scalar": self.target_scalar,
            "target_block": self.target_block,
            "stream_every": self.stream_every,
            "rhat_threshold": self.rhat_threshold,
            "mcse_threshold": self.mcse_threshold,
        }
        if self.seeds is not None:
            d["seeds"] = list(self.seeds)
        if self.monitor is not None:
            d["monitor"] = list(self.monitor)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "McmcConfig":
        d = dict(d)
        if "seeds" in d and d["seeds"] is not None:
            d["seeds"] = tuple(d["seeds"])
        if "monitor" in d and d["monitor"] is not None:
            d["monitor"] = tuple(d["monitor"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelError(f"unknown MCMC options: {sorted(unknown)}")
        config = cls(**d)
        config.validate()
        return config


# ---------------------------------------------------------------------------
# Parameter naming


def parameter_names(arrays: CohortArrays, spec: JointModelSpec) -> tuple[str, ...]:
    """Canonical parameter order used for draws, CSV export, and reports."""
    names: list[str] = []
    if spec.group_intercepts:
        names += [f"beta0[{g}]" for g in arrays.tumour_groups]
    else:
        names.append("beta0")
    names += ["beta1", "sigma", "omega0"]
    if spec.random_slope:
        names.append("omega1")
    names.append("kappa")
    names += [f"phi[{nm}]" for nm in arrays.phi_names]
    if spec.association == "common":
        names.append("alpha")
    elif spec.association == "exchangeable":
        names.append("alpha")
        names += [f"alpha[{g}]" for g in arrays.tumour_groups]
        names.append("tau")
    else:
        names += [f"alpha[{g}]" for g in arrays.tumour_groups]
    names += [f"b0[{pid}]" for pid in arrays.patient_ids]
    if spec.random_slope:
        names += [f"b1[{pid}]" for pid in arrays.patient_ids]
    return tuple(names)


def columns_matching(names, prefix: str) -> list[int]:
    """Indices of `prefix` itself plus any `prefix[...]` entries, in order."""
    return [i for i, nm in enumerate(names) if nm == prefix or nm.startswith(prefix + "[")]


# ---------------------------------------------------------------------------
# Initial values


def initialize_chain(spec: JointModelSpec, cohort, seed: int) -> ParameterState:
    """Overdispersed in-support starting state with a finite log posterior.

    Longitudinal parameters start at their uniform-prior midpoints jittered
    by +/-20%, the shape at 1 (jittered), all log-hazard coefficients at -5
    (jittered, a low hazard), associations near 0, and random effects at 0.
    """
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    rng = np.random.default_rng(seed)
    return _initial_state(spec, arrays, rng)


def _initial_state(spec: JointModelSpec, arrays: CohortArrays, rng) -> ParameterState:
    pr = spec.priors
    n, k, p = arrays.n_patients, arrays.n_groups, len(arrays.phi_names)

    def jitter(value):
        return value * (1.0 + rng.uniform(-0.2, 0.2))

    for _ in range(100):
        mid0 = 0.5 * (pr.beta0_bounds[0] + pr.beta0_bounds[1])
        beta0 = np.array([jitter(mid0) for _ in range(k)]) if spec.group_intercepts else jitter(mid0)
        b1lo, b1hi = spec.beta1_bounds
        beta1 = jitter(0.5 * (b1lo + b1hi))
        sigma = jitter(0.5 * (pr.sigma_bounds[0] + pr.sigma_bounds[1]))
        mid_omega = 0.5 * (pr.omega_bounds[0] + pr.omega_bounds[1])
        omega0 = jitter(mid_omega)
        omega1 = jitter(mid_omega) if spec.random_slope else 0.0
        kappa = jitter(1.0)
        phi = np.array([jitter(-5.0) for _ in range(p)])

        alpha = None
        alpha_k = None
        tau = None
        if pr.alpha_fixed is not None:
            alpha = pr.alpha_fixed
        elif spec.association in ("common", "exchangeable"):
            alpha = rng.uniform(-0.01, 0.01)
        if spec.association in ("exchangeable", "independent"):
            alpha_k = np.array([rng.uniform(-0.01, 0.01) for _ in range(k)])
        if spec.association == "exchangeable":
            tau = jitter(0.3)

        state = ParameterState(
            longitudinal=LongitudinalParams(
                beta0=beta0, beta1=beta1, sigma=sigma, omega0=omega0, omega1=omega1,
                b0=np.zeros(n), b1=np.zeros(n),
            ),
            survival=SurvivalParams(shape=kappa, phi=phi),
            association=AssociationParams(
                structure=spec.association, functional=spec.functional,
                alpha=alpha, alpha_k=alpha_k, tau=tau,
            ),
        )
        if np.isfinite(log_posterior(state, arrays, spec)):
            return state
    raise SamplerError("could not find a finite-posterior initial state in 100 attempts")


# ---------------------------------------------------------------------------
# Sweep engine

_B0_REF = 1.0  # base proposal scale for b0_i (mm)
_B1_REF = 0.025  # base proposal scale for b1_i (mm/month); adapted jointly


class _Sweeper:
    """Mutable chain state with cached per-patient likelihood terms."""

    def __init__(self, arrays: CohortArrays, spec: JointModelSpec, state: ParameterState,
                 rng, target_scalar: float = 0.44, target_block: float = 0.23):
        self.arrays = arrays
        self.spec = spec
        self.rng = rng
        self.t_scalar = target_scalar
        self.t_block = target_block
        self.functional = spec.functional
        self.structure = spec.association
        self.alpha_is_fixed = spec.priors.alpha_fixed is not None

        lon, surv, assoc = state.longitudinal, state.survival, state.association
        self.beta0 = lon.beta0.copy() if np.ndim(lon.beta0) > 0 else float(lon.beta0)
        self.beta1 = float(lon.beta1)
        self.sigma = float(lon.sigma)
        self.omega0 = float(lon.omega0)
        self.omega1 = float(lon.omega1)
        self.b0 = np.array(lon.b0, dtype=float)
        self.b1 = np.array(lon.b1, dtype=float)
        self.kappa = float(surv.shape)
        self.phi = np.array(surv.phi, dtype=float)
        self.alpha = None if assoc.alpha is None else float(assoc.alpha)
        self.alpha_k = None if assoc.alpha_k is None else np.array(assoc.alpha_k, dtype=float)
        self.tau = None if assoc.tau is None else float(assoc.tau)

        n, k = arrays.n_patients, arrays.n_groups
        self._zeros = np.zeros(n)
        # log proposal scales
        self.lsd = {
            "beta1": math.log(0.02),
            "sigma": math.log(0.1),
            "omega0": math.log(0.2),
            "omega1": math.log(0.2),
            "survival": math.log(0.1),
            "alpha": math.log(0.005),
            "tau": math.log(0.3),
        }
        self.lsd_beta0 = np.full(k, math.log(0.5)) if spec.group_intercepts else math.log(0.5)
        self.lsd_b = np.zeros(n)
        self.lsd_alpha_k = np.full(k, math.log(0.005))

        self.cap_events = 0
        self.reset_acceptance()
        self.refresh()

    # -- caches ------------------------------------------------------------

    def _b0pop(self):
        if np.ndim(self.beta0) > 0:
            return self.beta0[self.arrays.group_idx]
        return self.beta0

    def _ssr_for(self, b0pop, beta1, b0, b1):
        a = b0pop + b0
        c = beta1 + b1
        arr = self.arrays
        ssr = (
            arr.sum_y2 - 2.0 * a * arr.sum_y - 2.0 * c * arr.sum_yt
            + a * a * arr.rec_count + 2.0 * a * c * arr.sum_t + c * c * arr.sum_t2
        )
        return np.maximum(ssr, 0.0)

    def _long_for(self, ssr, sigma):
        arr = self.arrays
        return -0.5 * arr.rec_count * (LOG_2PI + 2.0 * math.log(sigma)) - ssr / (2.0 * sigma * sigma)

    def _cd(self, xb=None, alpha_pat=None, b0pop=None, beta1=None, b0=None, b1=None):
        xb = self.xb if xb is None else xb
        ap = self.alpha_pat if alpha_pat is None else alpha_pat
        b0pop = self._b0pop() if b0pop is None else b0pop
        beta1 = self.beta1 if beta1 is None else beta1
        b0 = self.b0 if b0 is None else b0
        b1 = self.b1 if b1 is None else b1
        if self.functional == "current_value":
            c = xb + ap * (b0pop + b0)
            d = ap * (beta1 + b1)
            if np.ndim(d) == 0:
                d = np.full(self.arrays.n_patients, d)
        else:
            c = xb + ap * (beta1 + b1)
            d = self._zeros
        return c, d

    def _surv_for(self, kappa, c, d):
        terms, ncap = survival_terms(self.arrays, kappa, c, d)
        self.cap_events += ncap
        return terms

    def refresh(self) -> None:
        """Recompute every cache from the primary parameters."""
        self.xb = self.arrays.x_design @ self.phi
        if self.structure == "common":
            self.alpha_pat = self.alpha
        else:
            self.alpha_pat = self.alpha_k[self.arrays.group_idx]
        self.ssr = self._ssr_for(self._b0pop(), self.beta1, self.b0, self.b1)
        self.long_terms = self._long_for(self.ssr, self.sigma)
        c, d = self._cd()
        before = self.cap_events
        self.surv_terms = self._surv_for(self.kappa, c, d)
        self.cap_events = before  # refresh re-evaluations are not new cap events

    # -- bookkeeping ---------------------------------------------------------

    def reset_acceptance(self) -> None:
        n, k = self.arrays.n_patients, self.arrays.n_groups
        self.acc_sums = {
            "beta0": np.zeros(k) if self.spec.group_intercepts else 0.0,
            "beta1": 0.0, "sigma": 0.0, "omega0": 0.0, "omega1": 0.0,
            "b": np.zeros(n), "survival": 0.0, "alpha": 0.0,
            "alpha_k": np.zeros(k), "tau": 0.0,
        }
        self.acc_count = 0

    def acceptance_rates(self) -> dict[str, float]:
        """Per-block acceptance rates since the last reset."""
        if self.acc_count == 0:
            return {}
        n = self.acc_count
        groups, pids = self.arrays.tumour_groups, self.arrays.patient_ids
        out: dict[str, float] = {}
        if self.spec.group_intercepts:
            for g, v in zip(groups, self.acc_sums["beta0"]):
                out[f"beta0[{g}]"] = float(v) / n
        else:
            out["beta0"] = float(self.acc_sums["beta0"]) / n
        for key in ("beta1", "sigma", "omega0"):
            out[key] = float(self.acc_sums[key]) / n
        if self.spec.random_slope:
            out["omega1"] = float(self.acc_sums["omega1"]) / n
        for pid, v in zip(pids, self.acc_sums["b"]):
            out[f"b[{pid}]"] = float(v) / n
        out["survival"] = float(self.acc_sums["survival"]) / n
        if self.structure == "common":
            if not self.alpha_is_fixed:
                out["alpha"] = float(self.acc_sums["alpha"]) / n
        else:
            if self.structure == "exchangeable":
                out["alpha"] = float(self.acc_sums["alpha"]) / n
                out["tau"] = float(self.acc_sums["tau"]) / n
            for g, v in zip(groups, self.acc_sums["alpha_k"]):
                out[f"alpha[{g}]"] = float(v) / n
        return out

    # -- single-site updates -------------------------------------------------

    def _adapt(self, key, acc_prob, step, target):
        if step is not None:
            self.lsd[key] += step * (acc_prob - target)

    def _update_beta0(self, step):
        pr = self.spec.priors
        lo, hi = pr.beta0_bounds
        if self.spec.group_intercepts:
            self._update_beta0_groups(step, lo, hi)
            return
        prop = self.beta0 + math.exp(self.lsd_beta0) * self.rng.standard_normal()
        new_ssr = new_long = new_surv = None
        if lo < prop < hi:
            new_ssr = self._ssr_for(prop, self.beta1, self.b0, self.b1)
            new_long = self._long_for(new_ssr, self.sigma)
            delta = float(np.sum(new_long - self.long_terms))
            if self.functional == "current_value":
                c, d = self._cd(b0pop=prop)
                new_surv = self._surv_for(self.kappa, c, d)
                delta += float(np.sum(new_surv - self.surv_terms))
        else:
            delta = -np.inf
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.beta0 = prop
            self.ssr, self.long_terms = new_ssr, new_long
            if new_surv is not None:
                self.surv_terms = new_surv
        self.acc_sums["beta0"] += accepted
        if step is not None:
            self.lsd_beta0 += step * (math.exp(min(delta, 0.0)) - self.t_scalar)

    def _update_beta0_groups(self, step, lo, hi):
        arr = self.arrays
        k = arr.n_groups
        prop = self.beta0 + np.exp(self.lsd_beta0) * self.rng.standard_normal(k)
        in_bounds = (prop > lo) & (prop < hi)
        b0pop_prop = prop[arr.group_idx]
        new_ssr = self._ssr_for(b0pop_prop, self.beta1, self.b0, self.b1)
        new_long = self._long_for(new_ssr, self.sigma)
        per_pat = new_long - self.long_terms
        new_surv = None
        if self.functional == "current_value":
            c, d = self._cd(b0pop=b0pop_prop)
            new_surv = self._surv_for(self.kappa, c, d)
            per_pat = per_pat + (new_surv - self.surv_terms)
        delta_g = np.bincount(arr.group_idx, weights=per_pat, minlength=k)
        delta_g = np.where(in_bounds, delta_g, -np.inf)
        acc = np.log(self.rng.random(k) + 1e-320) < delta_g
        if np.any(acc):
            acc_pat = acc[arr.group_idx]
            self.beta0 = np.where(acc, prop, self.beta0)
            self.ssr = np.where(acc_pat, new_ssr, self.ssr)
            self.long_terms = np.where(acc_pat, new_long, self.long_terms)
            if new_surv is not None:
                self.surv_terms = np.where(acc_pat, new_surv, self.surv_terms)
        self.acc_sums["beta0"] += acc
        if step is not None:
            self.lsd_beta0 += step * (np.exp(np.minimum(delta_g, 0.0)) - self.t_scalar)

    def _update_beta1(self, step):
        lo, hi = self.spec.beta1_bounds
        prop = self.beta1 + math.exp(self.lsd["beta1"]) * self.rng.standard_normal()
        new_ssr = new_long = new_surv = None
        if lo < prop < hi:
            new_ssr = self._ssr_for(self._b0pop(), prop, self.b0, self.b1)
            new_long = self._long_for(new_ssr, self.sigma)
            c, d = self._cd(beta1=prop)
            new_surv = self._surv_for(self.kappa, c, d)
            delta = float(np.sum(new_long - self.long_terms) + np.sum(new_surv - self.surv_terms))
        else:
            delta = -np.inf
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.beta1 = prop
            self.ssr, self.long_terms, self.surv_terms = new_ssr, new_long, new_surv
        self.acc_sums["beta1"] += accepted
        self._adapt("beta1", math.exp(min(delta, 0.0)), step, self.t_scalar)

    def _update_sigma(self, step):
        lo, hi = self.spec.priors.sigma_bounds
        log_prop = math.log(self.sigma) + math.exp(self.lsd["sigma"]) * self.rng.standard_normal()
        prop = math.exp(log_prop)
        if lo < prop < hi:
            new_long = self._long_for(self.ssr, prop)
            delta = float(np.sum(new_long - self.long_terms)) + (log_prop - math.log(self.sigma))
        else:
            new_long = None
            delta = -np.inf
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.sigma = prop
            self.long_terms = new_long
        self.acc_sums["sigma"] += accepted
        self._adapt("sigma", math.exp(min(delta, 0.0)), step, self.t_scalar)

    def _update_omega(self, which, step):
        lo, hi = self.spec.priors.omega_bounds
        current = self.omega0 if which == "omega0" else self.omega1
        effects = self.b0 if which == "omega0" else self.b1
        log_prop = math.log(current) + math.exp(self.lsd[which]) * self.rng.standard_normal()
        prop = math.exp(log_prop)
        if lo < prop < hi:
            n = self.arrays.n_patients
            sumsq = float(effects @ effects)
            delta = (
                -n * (log_prop - math.log(current))
                - 0.5 * sumsq * (1.0 / (prop * prop) - 1.0 / (current * current))
                + (log_prop - math.log(current))
            )
        else:
            delta = -np.inf
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            if which == "omega0":
                self.omega0 = prop
            else:
                self.omega1 = prop
        self.acc_sums[which] += accepted
        self._adapt(which, math.exp(min(delta, 0.0)), step, self.t_scalar)

    def _update_b(self, step):
        arr = self.arrays
        n = arr.n_patients
        scale = np.exp(self.lsd_b)
        nb0 = self.b0 + scale * _B0_REF * self.rng.standard_normal(n)
        if self.spec.random_slope:
            nb1 = self.b1 + scale * _B1_REF * self.rng.standard_normal(n)
        else:
            nb1 = self.b1
        new_ssr = self._ssr_for(self._b0pop(), self.beta1, nb0, nb1)
        new_long = self._long_for(new_ssr, self.sigma)
        c, d = self._cd(b0=nb0, b1=nb1)
        new_surv = self._surv_for(self.kappa, c, d)
        dprior = -(nb0 * nb0 - self.b0 * self.b0) / (2.0 * self.omega0**2)
        if self.spec.random_slope:
            dprior = dprior - (nb1 * nb1 - self.b1 * self.b1) / (2.0 * self.omega1**2)
        delta = (new_long - self.long_terms) + (new_surv - self.surv_terms) + dprior
        acc = np.log(self.rng.random(n) + 1e-320) < delta
        if np.any(acc):
            self.b0 = np.where(acc, nb0, self.b0)
            if self.spec.random_slope:
                self.b1 = np.where(acc, nb1, self.b1)
            self.ssr = np.where(acc, new_ssr, self.ssr)
            self.long_terms = np.where(acc, new_long, self.long_terms)
            self.surv_terms = np.where(acc, new_surv, self.surv_terms)
        self.acc_sums["b"] += acc
        if step is not None:
            target = self.t_block if self.spec.random_slope else self.t_scalar
            self.lsd_b += step * (np.exp(np.minimum(delta, 0.0)) - target)

    def _update_survival(self, step):
        pr = self.spec.priors
        sd = math.exp(self.lsd["survival"])
        z = self.rng.standard_normal(1 + self.phi.size)
        log_kappa = math.log(self.kappa)
        log_prop = log_kappa + sd * z[0]
        kappa_prop = math.exp(log_prop)
        phi_prop = self.phi + sd * z[1:]
        xb_prop = self.arrays.x_design @ phi_prop
        c, d = self._cd(xb=xb_prop)
        new_surv = self._surv_for(kappa_prop, c, d)
        dprior = (
            -pr.kappa_rate * (kappa_prop - self.kappa)
            - (phi_prop @ phi_prop - self.phi @ self.phi) / (2.0 * pr.coef_sd**2)
        )
        delta = float(np.sum(new_surv - self.surv_terms)) + dprior + (log_prop - log_kappa)
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.kappa = kappa_prop
            self.phi = phi_prop
            self.xb = xb_prop
            self.surv_terms = new_surv
        self.acc_sums["survival"] += accepted
        self._adapt("survival", math.exp(min(delta, 0.0)), step, self.t_block)

    def _update_alpha_common(self, step):
        pr = self.spec.priors
        prop = self.alpha + math.exp(self.lsd["alpha"]) * self.rng.standard_normal()
        c, d = self._cd(alpha_pat=prop)
        new_surv = self._surv_for(self.kappa, c, d)
        dprior = -(prop * prop - self.alpha * self.alpha) / (2.0 * pr.coef_sd**2)
        delta = float(np.sum(new_surv - self.surv_terms)) + dprior
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.alpha = prop
            self.alpha_pat = prop
            self.surv_terms = new_surv
        self.acc_sums["alpha"] += accepted
        self._adapt("alpha", math.exp(min(delta, 0.0)), step, self.t_scalar)

    def _update_alpha_mean(self, step):
        # exchangeable only: alpha enters the likelihood only through the
        # alpha_k prior, so this update needs no survival evaluation
        pr = self.spec.priors
        prop = self.alpha + math.exp(self.lsd["alpha"]) * self.rng.standard_normal()
        tau2 = self.tau * self.tau
        dev_new = self.alpha_k - prop
        dev_old = self.alpha_k - self.alpha
        delta = (
            -(float(dev_new @ dev_new) - float(dev_old @ dev_old)) / (2.0 * tau2)
            - (prop * prop - self.alpha * self.alpha) / (2.0 * pr.coef_sd**2)
        )
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.alpha = prop
        self.acc_sums["alpha"] += accepted
        self._adapt("alpha", math.exp(min(delta, 0.0)), step, self.t_scalar)

    def _update_alpha_groups(self, step):
        pr = self.spec.priors
        arr = self.arrays
        k = arr.n_groups
        prop = self.alpha_k + np.exp(self.lsd_alpha_k) * self.rng.standard_normal(k)
        ap = prop[arr.group_idx]
        c, d = self._cd(alpha_pat=ap)
        new_surv = self._surv_for(self.kappa, c, d)
        dsurv = np.bincount(arr.group_idx, weights=new_surv - self.surv_terms, minlength=k)
        if self.structure == "exchangeable":
            dprior = -((prop - self.alpha) ** 2 - (self.alpha_k - self.alpha) ** 2) / (2.0 * self.tau**2)
        else:
            dprior = -(prop * prop - self.alpha_k * self.alpha_k) / (2.0 * pr.coef_sd**2)
        delta = dsurv + dprior
        acc = np.log(self.rng.random(k) + 1e-320) < delta
        if np.any(acc):
            self.alpha_k = np.where(acc, prop, self.alpha_k)
            self.alpha_pat = self.alpha_k[arr.group_idx]
            acc_pat = acc[arr.group_idx]
            self.surv_terms = np.where(acc_pat, new_surv, self.surv_terms)
        self.acc_sums["alpha_k"] += acc
        if step is not None:
            self.lsd_alpha_k += step * (np.exp(np.minimum(delta, 0.0)) - self.t_scalar)

    def _update_tau(self, step):
        pr = self.spec.priors
        k = self.arrays.n_groups
        log_prop = math.log(self.tau) + math.exp(self.lsd["tau"]) * self.rng.standard_normal()
        prop = math.exp(log_prop)
        dev = self.alpha_k - self.alpha
        sq = float(dev @ dev)

        def logf(t):
            return -k * math.log(t) - sq / (2.0 * t * t) - t * t / (2.0 * pr.tau_scale**2)

        delta = logf(prop) - logf(self.tau) + (log_prop - math.log(self.tau))
        accepted = math.log(self.rng.random() + 1e-320) < delta
        if accepted:
            self.tau = prop
        self.acc_sums["tau"] += accepted
        self._adapt("tau", math.exp(min(delta, 0.0)), step, self.t_scalar)

    # -- sweep ---------------------------------------------------------------

    def sweep(self, step: float | None) -> None:
        """One full Metropolis-within-Gibbs sweep; `step` enables adaptation."""
        self._update_beta0(step)
        self._update_beta1(step)
        self._update_sigma(step)
        self._update_omega("omega0", step)
        if self.spec.random_slope:
            self._update_omega("omega1", step)
        self._update_b(step)
        self._update_survival(step)
        if self.structure == "common":
            if not self.alpha_is_fixed:
                self._update_alpha_common(step)
        elif self.structure == "exchangeable":
            self._update_alpha_mean(step)
            self._update_alpha_groups(step)
            self._update_tau(step)
        else:
            self._update_alpha_groups(step)
        self.acc_count += 1

    # -- export ----------------------------------------------------------------

    def full_row(self) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(self.beta0, dtype=float)),
                 [self.beta1, self.sigma, self.omega0]]
        if self.spec.random_slope:
            parts.append([self.omega1])
        parts.append([self.kappa])
        parts.append(self.phi)
        if self.structure == "common":
            parts.append([self.alpha])
        elif self.structure == "exchangeable":
            parts.append([self.alpha])
            parts.append(self.alpha_k)
            parts.append([self.tau])
        else:
            parts.append(self.alpha_k)
        parts.append(self.b0)
        if self.spec.random_slope:
            parts.append(self.b1)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def to_state(self) -> ParameterState:
        return ParameterState(
            longitudinal=LongitudinalParams(
                beta0=self.beta0.copy() if np.ndim(self.beta0) > 0 else self.beta0,
                beta1=self.beta1, sigma=self.sigma, omega0=self.omega0, omega1=self.omega1,
                b0=self.b0.copy(), b1=self.b1.copy(),
            ),
            survival=SurvivalParams(shape=self.kappa, phi=self.phi.copy()),
            association=AssociationParams(
                structure=self.structure, functional=self.functional,
                alpha=self.alpha,
                alpha_k=None if self.alpha_k is None else self.alpha_k.copy(),
                tau=self.tau,
            ),
        )

    def proposal_sds(self) -> dict[str, object]:
        out = {key: math.exp(v) for key, v in self.lsd.items()}
        out["beta0"] = np.exp(self.lsd_beta0) if np.ndim(self.lsd_beta0) > 0 else math.exp(self.lsd_beta0)
        out["b"] = np.exp(self.lsd_b)
        out["alpha_k"] = np.exp(self.lsd_alpha_k)
        return out

    def set_proposal_sds(self, sds: dict) -> None:
        for key, value in sds.items():
            if key == "beta0":
                if np.ndim(self.lsd_beta0) > 0:
                    self.lsd_beta0 = np.log(np.broadcast_to(np.asarray(value, dtype=float),
                                                            self.lsd_beta0.shape)).copy()
                else:
                    self.lsd_beta0 = math.log(float(value))
            elif key == "b":
                self.lsd_b = np.full_like(self.lsd_b, np.log(value)) if np.ndim(value) == 0 else np.log(np.asarray(value))
            elif key == "alpha_k":
                self.lsd_alpha_k = np.full_like(self.lsd_alpha_k, np.log(value)) if np.ndim(value) == 0 else np.log(np.asarray(value))
            elif key in self.lsd:
                self.lsd[key] = math.log(value)
            else:
                raise ModelError(f"unknown proposal block {key!r}")

    def check_finite(self, context: str) -> None:
        total = float(np.sum(self.long_terms) + np.sum(self.surv_terms))
        prior = log_prior(self.to_state(), self.spec)
        if not np.isfinite(total + prior):
            summary = {
                "beta0": np.asarray(self.beta0).tolist(), "beta1": self.beta1,
                "sigma": self.sigma, "omega0": self.omega0, "omega1": self.omega1,
                "kappa": self.kappa, "phi": self.phi.tolist(),
                "alpha": self.alpha,
                "alpha_k": None if self.alpha_k is None else self.alpha_k.tolist(),
                "tau": self.tau,
                "loglik": total, "logprior": prior,
            }
            raise SamplerError(f"non-finite log posterior {context}: {summary}")


def mwg_step(state: ParameterState, cohort, spec: JointModelSpec, rng,
             proposal_sds: dict | None = None) -> tuple[ParameterState, dict[str, float]]:
    """One Metropolis-within-Gibbs sweep from `state`; returns the new state
    and the per-block acceptance indicators (fractions for vector blocks)."""
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    sweeper = _Sweeper(arrays, spec, state, rng)
    if proposal_sds:
        sweeper.set_proposal_sds(proposal_sds)
    sweeper.sweep(None)
    return sweeper.to_state(), sweeper.acceptance_rates()


# ---------------------------------------------------------------------------
# Chains


@dataclass
class Chain:
    """Post-burn-in draws and bookkeeping for one chain."""

    seed: int
    draws: np.ndarray  # (n_kept, n_monitored)
    acceptance: dict[str, float] = field(default_factory=dict)
    cap_events: int = 0
    proposal_sds_burn_end: dict = field(default_factory=dict)
    proposal_sds_final: dict = field(default_factory=dict)

    @property
    def n_kept(self) -> int:
        return self.draws.shape[0]


@dataclass
class PosteriorSamples:
    """Draws from all chains plus the spec/config they came from."""

    param_names: tuple[str, ...]
    chains: list[Chain]
    spec: JointModelSpec | None = None
    config: McmcConfig | None = None
    tumour_groups: tuple[str, ...] = ()
    patient_ids: tuple[str, ...] = ()

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_kept(self) -> int:
        return self.chains[0].n_kept if self.chains else 0

    def index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ModelError(f"unknown parameter {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """Draws for one parameter, shape (n_chains, n_kept)."""
        j = self.index(name)
        return np.stack([chain.draws[:, j] for chain in self.chains])

    def pooled(self, name: str) -> np.ndarray:
        return self.column(name).reshape(-1)

    def stacked(self) -> np.ndarray:
        """All chains' draws stacked, shape (n_chains * n_kept, n_params)."""
        return np.vstack([chain.draws for chain in self.chains])

    def posterior_mean(self, name: str) -> float:
        return float(np.mean(self.pooled(name)))

    def credible_interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        half = 100.0 * (1.0 - level) / 2.0
        lo, hi = np.percentile(self.pooled(name), [half, 100.0 - half])
        return float(lo), float(hi)

    def to_csv(self, path, manifest_hash: str | None = None) -> None:
        thin = self.config.thin if self.config is not None else 1
        writer = PosteriorWriter(path, self.param_names, manifest_hash)
        try:
            for ci, chain in enumerate(self.chains, start=1):
                for k in range(chain.n_kept):
                    writer.write_row(ci, (k + 1) * thin, chain.draws[k])
        finally:
            writer.close()

    @classmethod
    def from_csv(cls, path) -> "PosteriorSamples":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
            if first.startswith("#"):
                header = fh.readline().strip()
            else:
                header = first
            cols = header.split(",")
            if cols[:2] != ["chain", "iteration"]:
                raise ModelError(f"{path}: expected a posterior CSV with chain,iteration columns")
            names = tuple(cols[2:])
            try:
                data = np.loadtxt(fh, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise ModelError(f"{path}: malformed posterior CSV: {exc}") from None
        if data.size == 0:
            raise ModelError(f"{path}: no posterior draws")
        chain_ids = data[:, 0].astype(int)
        chains = []
        for cid in sorted(set(chain_ids.tolist())):
            rows = data[chain_ids == cid]
            order = np.argsort(rows[:, 1], kind="stable")
            chains.append(Chain(seed=cid, draws=rows[order][:, 2:]))
        pids = tuple(nm[3:-1] for nm in names if nm.startswith("b0["))
        return cls(param_names=names, chains=chains, patient_ids=pids)


class PosteriorWriter:
    """Streaming CSV writer for posterior draws (header chain,iteration,...)."""

    def __init__(self, path, names, manifest_hash=None, flush_every: int = 1000):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        if manifest_hash is not None:
            self._fh.write(f"# manifest_hash={manifest_hash}\n")
        self._fh.write("chain,iteration," + ",".join(names) + "\n")
        self._buffer: list[str] = []
        self._flush_every = max(1, flush_every)

    def write_row(self, chain_id: int, iteration: int, row) -> None:
        cells = ",".join(repr(float(v)) for v in row)
        self._buffer.append(f"{chain_id},{iteration},{cells}\n")
        if len(self._buffer) >= self._flush_every:
            self.flush()

    def flush(self) -> None:
        if self._buffer:
            self._fh.write("".join(self._buffer))
            self._buffer.clear()

    def close(self) -> None:
        self.flush()
        self._fh.close()


def run_chains(spec: JointModelSpec, cohort, config: McmcConfig,
               stream_path=None, manifest_hash: str | None = None,
               progress=None) -> PosteriorSamples:
    """Run the configured chains sequentially; deterministic given seeds.

    When `stream_path` is set, draws are also written to a posterior CSV
    incrementally (flushed every `config.stream_every` kept rows).
    """
    spec.validate()
    config.validate()
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    names = parameter_names(arrays, spec)

    if config.monitor is None:
        monitored = names
        mon_idx = None
    else:
        unknown = [nm for nm in config.monitor if nm not in names]
        if unknown:
            raise ModelError(f"monitor lists unknown parameters: {unknown}")
        monitored = tuple(nm for nm in names if nm in set(config.monitor))
        mon_idx = np.array([names.index(nm) for nm in monitored], dtype=int)

    writer = None
    if stream_path is not None:
        writer = PosteriorWriter(stream_path, monitored, manifest_hash, config.stream_every)

    chains: list[Chain] = []
    try:
        for ci, seed in enumerate(config.effective_seeds()):
            rng = np.random.default_rng(seed)
            state = _initial_state(spec, arrays, rng)
            sweeper = _Sweeper(arrays, spec, state, rng,
                               target_scalar=config.target_scalar,
                               target_block=config.target_block)

            for s in range(1, config.burn_in + 1):
                step = 1.0 / math.ceil(s / config.adapt_window)
                sweeper.sweep(step)
                if s % 1000 == 0:
                    sweeper.refresh()
                    sweeper.check_finite(f"at burn-in sweep {s} of chain {ci + 1}")
                    if progress is not None:
                        progress(ci, "burn_in", s)
            sds_burn_end = sweeper.proposal_sds()
            sweeper.reset_acceptance()

            kept = np.empty((config.n_kept, len(monitored)))
            k = 0
            for s in range(1, config.estimation + 1):
                sweeper.sweep(None)
                if s % config.thin == 0:
                    row = sweeper.full_row()
                    if mon_idx is not None:
                        row = row[mon_idx]
                    kept[k] = row
                    if writer is not None:
                        writer.write_row(ci + 1, s, row)
                    k += 1
                if s % 1000 == 0:
                    sweeper.refresh()
                    sweeper.check_finite(f"at estimation sweep {s} of chain {ci + 1}")
                    if progress is not None:
                        progress(ci, "estimation", s)

            chains.append(Chain(
                seed=seed,
                draws=kept,
                acceptance=sweeper.acceptance_rates(),
                cap_events=sweeper.cap_events,
                proposal_sds_burn_end=sds_burn_end,
                proposal_sds_final=sweeper.proposal_sds(),
            ))
    finally:
        if writer is not None:
            writer.close()

    return PosteriorSamples(
        param_names=monitored,
        chains=chains,
        spec=spec,
        config=config,
        tumour_groups=arrays.tumour_groups,
        patient_ids=arrays.patient_ids,
    )


# ---------------------------------------------------------------------------
# Generic random-walk Metropolis (test harness and survival-only fits)


def rw_metropolis(logpdf, x0, n_samples: int, rng, proposal_sd: float = 1.0,
                  adapt: int = 0, target: float = 0.44, window: int = 50):
    """Plain adaptive random-walk Metropolis on a user-supplied log density.

    Scalar or whole-vector isotropic proposals. The first `adapt` sweeps are
    burn-in with Robbins-Monro tuning and are not recorded. Returns
    (samples, acceptance_rate, final_proposal_sd).
    """
    scalar = np.ndim(x0) == 0
    x = float(x0) if scalar else np.array(x0, dtype=float)
    lp = logpdf(x)
    if not np.isfinite(lp):
        raise SamplerError("rw_metropolis requires a finite starting density")
    lsd = math.log(proposal_sd)
    samples = np.empty(n_samples if scalar else (n_samples, x.size))
    accepted = 0
    for s in range(adapt + n_samples):
        if scalar:
            prop = x + math.exp(lsd) * rng.standard_normal()
        else:
            prop = x + math.exp(lsd) * rng.standard_normal(x.size)
        lp_prop = logpdf(prop)
        delta = lp_prop - lp
        if math.log(rng.random() + 1e-320) < delta:
            x, lp = prop, lp_prop
            if s >= adapt:
                accepted += 1
        if s < adapt:
            step = 1.0 / math.ceil((s + 1) / window)
            lsd += step * (math.exp(min(delta, 0.0)) - target)
        else:
            samples[s - adapt] = x
    return samples, accepted / max(n_samples, 1), math.exp(lsd)


# ---------------------------------------------------------------------------
# Convergence diagnostics


def split_rhat(chains) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is split in half; R-hat compares between- and within-half
    variances. Constant chains are defined as 1.0 (flagged by the report).
    """
    value, _ = _split_rhat_flagged(chains)
    return value


def _split_rhat_flagged(chains) -> tuple[float, bool]:
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 2:
        raise ModelError("rhat requires at least 2 chains")
    length = chains[0].size
    if any(c.size != length for c in chains):
        raise ModelError("rhat requires equal-length chains")
    half = length // 2
    if half < 2:
        raise ModelError("chains too short for split R-hat")
    halves = []
    for c in chains:
        halves.append(c[:half])
        halves.append(c[-half:])
    means = np.array([h.mean() for h in halves])
    variances = np.array([h.var(ddof=1) for h in halves])
    w = float(variances.mean())
    b_over_n = float(means.var(ddof=1))
    if w == 0.0:
        return 1.0, True
    var_plus = (half - 1) / half * w + b_over_n
    return float(np.sqrt(var_plus / w)), False


def rhat(samples: PosteriorSamples, parameter: str) -> float:
    return split_rhat(list(samples.column(parameter)))


def mcse_ratio_from_chains(chains) -> float:
    """Batch-means MCSE over pooled chains, divided by the pooled SD.

    Batches never straddle chains; each chain contributes ~sqrt(n) batches.
    Returns NaN for a constant (zero-variance) parameter.
    """
    chains = [np.asarray(c, dtype=float) for c in chains]
    batch_means = []
    for c in chains:
        n = c.size
        n_batches = int(np.floor(np.sqrt(n)))
        if n_batches < 10:
            raise NumericalError(f"need at least 10 batches for the MCSE, got {n_batches}")
        size = n // n_batches
        used = c[: n_batches * size]
        batch_means.append(used.reshape(n_batches, size).mean(axis=1))
    batch_means = np.concatenate(batch_means)
    pooled = np.concatenate(chains)
    sd = float(pooled.std(ddof=1))
    if sd == 0.0:
        return float("nan")
    mcse = float(batch_means.std(ddof=1)) / math.sqrt(batch_means.size)
    return mcse / sd


def mcse_ratio(samples: PosteriorSamples, parameter: str) -> float:
    return mcse_ratio_from_chains(list(samples.column(parameter)))


# ---------------------------------------------------------------------------
# Deviance information criterion (conditional on random effects)


@dataclass(frozen=True)
class DicResult:
    dbar: float
    pd: float
    dic: float


class DrawDecoder:
    """Maps posterior draw rows back to likelihood inputs by column name.

    Raises ModelError when the draws lack a parameter the likelihood needs
    (for example random effects excluded by a monitor list).
    """

    def __init__(self, names, arrays: CohortArrays, spec: JointModelSpec):
        self.arrays = arrays
        self.spec = spec
        names = list(names)

        def need(name):
            if name not in names:
                raise ModelError(f"posterior draws lack parameter {name!r}")
            return names.index(name)

        if spec.group_intercepts:
            self.i_beta0 = np.array([need(f"beta0[{g}]") for g in arrays.tumour_groups])
        else:
            self.i_beta0 = need("beta0")
        self.i_beta1 = need("beta1")
        self.i_sigma = need("sigma")
        self.i_kappa = need("kappa")
        self.i_phi = np.array([need(f"phi[{nm}]") for nm in arrays.phi_names])
        if spec.association == "common":
            self.i_alpha = need("alpha")
            self.i_alpha_k = None
        else:
            self.i_alpha = None
            self.i_alpha_k = np.array([need(f"alpha[{g}]") for g in arrays.tumour_groups])
        self.i_b0 = np.array([need(f"b0[{pid}]") for pid in arrays.patient_ids])
        if spec.random_slope:
            self.i_b1 = np.array([need(f"b1[{pid}]") for pid in arrays.patient_ids])
        else:
            self.i_b1 = None

    def link_coeffs(self, row: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """(kappa, C, D) per patient so h_i(t) = kappa t^(kappa-1) exp(C_i + D_i t)."""
        arr = self.arrays
        if self.spec.group_intercepts:
            b0pop = row[self.i_beta0][arr.group_idx]
        else:
            b0pop = row[self.i_beta0]
        beta1 = row[self.i_beta1]
        kappa = float(row[self.i_kappa])
        phi = row[self.i_phi]
        b0 = row[self.i_b0]
        b1 = row[self.i_b1] if self.i_b1 is not None else 0.0
        if self.i_alpha is not None:
            ap = row[self.i_alpha]
        else:
            ap = row[self.i_alpha_k][arr.group_idx]
        xb = arr.x_design @ phi
        if self.spec.functional == "current_value":
            c = xb + ap * (b0pop + b0)
            d = ap * (beta1 + b1)
            if np.ndim(d) == 0:
                d = np.full(arr.n_patients, d)
        else:
            c = xb + ap * (beta1 + b1)
            d = np.zeros(arr.n_patients)
        return kappa, c, d

    def deviance(self, row: np.ndarray) -> float:
        arr = self.arrays
        if self.spec.group_intercepts:
            b0pop = row[self.i_beta0][arr.group_idx]
        else:
            b0pop = row[self.i_beta0]
        beta1 = row[self.i_beta1]
        sigma = row[self.i_sigma]
        b0 = row[self.i_b0]
        b1 = row[self.i_b1] if self.i_b1 is not None else 0.0
        long_terms = longitudinal_terms_from_stats(arr, b0pop, beta1, sigma, b0, b1)
        kappa, c, d = self.link_coeffs(row)
        surv, _ = survival_terms(arr, kappa, c, d)
        return -2.0 * float(np.sum(long_terms) + np.sum(surv))


def dic(samples: PosteriorSamples, cohort, spec: JointModelSpec | None = None) -> DicResult:
    """Conditional DIC: Dbar + pD with pD = Dbar - D(posterior means).

    Deviance is -2 times the joint likelihood evaluated at each draw's full
    parameter set, random effects included (the plug-in form).
    """
    if spec is None:
        spec = samples.spec
    if spec is None:
        raise ModelError("dic needs the model spec")
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    decoder = DrawDecoder(samples.param_names, arrays, spec)

    stacked = samples.stacked()
    if stacked.shape[0] == 0:
        raise ModelError("dic needs at least one draw")
    deviances = np.empty(stacked.shape[0])
    for j in range(stacked.shape[0]):
        deviances[j] = decoder.deviance(stacked[j])
    dbar = float(deviances.mean())
    d_at_means = decoder.deviance(stacked.mean(axis=0))
    if not (np.isfinite(dbar) and np.isfinite(d_at_means)):
        raise NumericalError("non-finite deviance while computing the DIC")
    pd_eff = dbar - d_at_means
    return DicResult(dbar=dbar, pd=pd_eff, dic=dbar + pd_eff)


# ---------------------------------------------------------------------------
# Diagnostics report


def _json_safe(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


@dataclass
class DiagnosticsReport:
    """Per-parameter convergence diagnostics plus the DIC triple."""

    rhat: dict[str, float | None]
    mcse_ratio: dict[str, float | None]
    constant_parameters: tuple[str, ...]
    acceptance: dict[str, float]
    cap_events: int
    dic: DicResult | None
    n_chains: int
    n_draws_per_chain: int
    rhat_threshold: float
    mcse_threshold: float

    @property
    def rhat_ok(self) -> bool | None:
        values = [v for v in self.rhat.values() if v is not None]
        if not values:
            return None
        return bool(max(values) < self.rhat_threshold)

    @property
    def mcse_ok(self) -> bool | None:
        values = [v for k, v in self.mcse_ratio.items()
                  if v is not None and k not in self.constant_parameters]
        if not values:
            return None
        return bool(max(values) < self.mcse_threshold)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_chains": self.n_chains,
            "n_draws_per_chain": self.n_draws_per_chain,
            "rhat": {k: _json_safe(v) for k, v in self.rhat.items()},
            "mcse_ratio": {k: _json_safe(v) for k, v in self.mcse_ratio.items()},
            "acceptance": {k: _json_safe(v) for k, v in self.acceptance.items()},
            "cap_events": self.cap_events,
            "dic": None if self.dic is None else {
                "dbar": _json_safe(self.dic.dbar),
                "pd": _json_safe(self.dic.pd),
                "dic": _json_safe(self.dic.dic),
            },
            "flags": {
                "rhat_ok": self.rhat_ok,
                "mcse_ok": self.mcse_ok,
                "constant_parameters": list(self.constant_parameters),
                "has_cap_events": self.cap_events > 0,
                "rhat_threshold": self.rhat_threshold,
                "mcse_threshold": self.mcse_threshold,
            },
        }


def diagnostics_report(samples: PosteriorSamples, cohort=None, spec: JointModelSpec | None = None,
                       rhat_threshold: float | None = None,
                       mcse_threshold: float | None = None) -> DiagnosticsReport:
    """Assemble R-hat, MCSE ratios, acceptance, and (with data) the DIC.

    R-hat entries are None when only one chain was run; constant parameters
    report R-hat 1.0 and are listed in `constant_parameters`.
    """
    config = samples.config
    if rhat_threshold is None:
        rhat_threshold = config.rhat_threshold if config is not None else 1.05
    if mcse_threshold is None:
        mcse_threshold = config.mcse_threshold if config is not None else 0.05

    rhats: dict[str, float | None] = {}
    ratios: dict[str, float | None] = {}
    constants: list[str] = []
    for name in samples.param_names:
        cols = list(samples.column(name))
        pooled_sd = float(np.concatenate(cols).std(ddof=1))
        if pooled_sd == 0.0:
            constants.append(name)
        if samples.n_chains >= 2:
            value, flagged = _split_rhat_flagged(cols)
            rhats[name] = value
            if flagged and name not in constants:
                constants.append(name)
        else:
            rhats[name] = None
        try:
            ratio = mcse_ratio_from_chains(cols)
        except NumericalError:
            ratio = float("nan")  # chains too short for batch means
        ratios[name] = None if math.isnan(ratio) else ratio

    acceptance: dict[str, float] = {}
    keys = set()
    for chain in samples.chains:
        keys.update(chain.acceptance)
    for key in sorted(keys):
        values = [chain.acceptance[key] for chain in samples.chains if key in chain.acceptance]
        acceptance[key] = float(np.mean(values))

    dic_result = None
    if cohort is not None:
        try:
            dic_result = dic(samples, cohort, spec)
        except ModelError:
            # the stored draws omit parameters the deviance needs (monitor
            # subsetting); report without a DIC rather than fail outright
            dic_result = None

    return DiagnosticsReport(
        rhat=rhats,
        mcse_ratio=ratios,
        constant_parameters=tuple(constants),
        acceptance=acceptance,
        cap_events=sum(chain.cap_events for chain in samples.chains),
        dic=dic_result,
        n_chains=samples.n_chains,
        n_draws_per_chain=samples.n_kept,
        rhat_threshold=rhat_threshold,
        mcse_threshold=mcse_threshold,
    )
