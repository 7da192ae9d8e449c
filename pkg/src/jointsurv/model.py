"""Joint longitudinal-survival model: parameters, priors, likelihoods, comparator.

The longitudinal sub-model is a linear mixed model for the sum of lesion
diameters (mm) at time t (months):

    y_ij = (beta0 + b0_i) + (beta1 + b1_i) * t_ij + eps_ij,  eps ~ N(0, sigma^2)

The survival sub-model is a Weibull proportional-hazards model whose log
hazard is linear in the patient's current trajectory value (or its slope):

    h_i(t) = kappa * t^(kappa - 1) * exp(phi' v_i + alpha_k(i) * link_i(t))

where v_i is an intercept plus tumour-group indicators, so exp(phi[0]) is
the baseline Weibull scale for the reference group. Association structures:
a single shared alpha ("common"), per-group alpha_k drawn around a shared
mean with SD tau ("exchangeable"), or unpooled per-group alpha_k
("independent").

All times are months. Cumulative hazards integrate exp-of-linear functions
and are evaluated in closed form when the time-varying part vanishes and by
Gauss-Legendre quadrature otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import CohortDataset

# Linear predictors are capped here before exponentiation. Evaluations that
# hit the cap are counted so chains can report them instead of silently
# clamping.
MAX_EXPONENT = 700.0

ASSOCIATION_STRUCTURES = ("common", "exchangeable", "independent")
FUNCTIONAL_FORMS = ("current_value", "slope")

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Raised for invalid parameters, specs, or failed model computations."""


class NumericalError(RuntimeError):
    """Raised for numerical failures: overflow, non-convergence, singularity."""


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ModelError(message)


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class LongitudinalParams:
    """Fixed effects, variance components, and random effects of the SLD model."""

    beta0: float | np.ndarray  # population intercept (mm); per-group vector when enabled
    beta1: float  # population slope (mm/month)
    sigma: float  # residual SD (mm)
    omega0: float  # between-patient intercept SD (mm)
    omega1: float  # between-patient slope SD (mm/month); 0 iff random slope disabled
    b0: np.ndarray  # per-patient intercept deviations
    b1: np.ndarray  # per-patient slope deviations

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        if np.ndim(self.beta0) > 0:
            self.beta0 = np.asarray(self.beta0, dtype=float)

    @property
    def n_patients(self) -> int:
        return self.b0.size

    def validate(self, random_slope: bool = True) -> None:
        _require(self.sigma > 0.0, f"sigma must be positive, got {self.sigma!r}")
        _require(self.omega0 > 0.0, f"omega0 must be positive, got {self.omega0!r}")
        if random_slope:
            _require(self.omega1 > 0.0, f"omega1 must be positive, got {self.omega1!r}")
        else:
            _require(self.omega1 == 0.0, "omega1 must be 0 when the random slope is disabled")
            _require(not np.any(self.b1), "b1 must be all zero when the random slope is disabled")
        _require(self.b0.shape == self.b1.shape, "b0 and b1 must have matching shapes")


@dataclass
class SurvivalParams:
    """Weibull shape and log-hazard regression coefficients.

    ``phi[0]`` is the intercept (log baseline scale); the remaining entries
    multiply tumour-group indicators relative to the reference group.
    """

    shape: float
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)

    def validate(self) -> None:
        _require(self.shape > 0.0, f"shape must be positive, got {self.shape!r}")
        _require(self.phi.ndim == 1 and self.phi.size >= 1, "phi must be a nonempty vector")


@dataclass
class AssociationParams:
    """Association between the SLD trajectory and the hazard.

    ``alpha`` is per mm of SLD for the current-value functional and per
    mm/month for the slope functional.
    """

    structure: str = "common"
    functional: str = "current_value"
    alpha: float | None = 0.0
    alpha_k: np.ndarray | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.alpha_k is not None:
            self.alpha_k = np.asarray(self.alpha_k, dtype=float)

    def validate(self, n_groups: int | None = None) -> None:
        _require(self.structure in ASSOCIATION_STRUCTURES, f"unknown association structure {self.structure!r}")
        _require(self.functional in FUNCTIONAL_FORMS, f"unknown functional form {self.functional!r}")
        if self.structure == "common":
            _require(self.alpha is not None, "common structure requires alpha")
            if self.alpha_k is not None:
                _require(np.all(self.alpha_k == self.alpha), "common structure requires alpha_k == alpha")
        elif self.structure == "exchangeable":
            _require(self.alpha is not None, "exchangeable structure requires alpha")
            _require(self.alpha_k is not None, "exchangeable structure requires alpha_k")
            _require(self.tau is not None and self.tau > 0.0, "exchangeable structure requires tau > 0")
        else:  # independent
            _require(self.alpha_k is not None, "independent structure requires alpha_k")
        if n_groups is not None and self.alpha_k is not None:
            _require(self.alpha_k.size == n_groups, f"alpha_k must have {n_groups} entries, got {self.alpha_k.size}")

    def per_group(self, n_groups: int) -> np.ndarray:
        """Association coefficient for each tumour group, in label order."""
        if self.structure == "common":
            return np.full(n_groups, float(self.alpha))
        _require(self.alpha_k is not None and self.alpha_k.size == n_groups, "alpha_k missing or mis-sized")
        return self.alpha_k


@dataclass
class ParameterState:
    """Complete parameter vector for one MCMC iteration."""

    longitudinal: LongitudinalParams
    survival: SurvivalParams
    association: AssociationParams

    def validate(self, n_groups: int | None = None, random_slope: bool = True) -> None:
        self.longitudinal.validate(random_slope=random_slope)
        self.survival.validate()
        self.association.validate(n_groups=n_groups)


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters. Defaults are deliberately vague for the scale
    of an SLD endpoint measured in mm over months."""

    beta0_bounds: tuple[float, float] = (0.0, 60.0)
    beta1_bounds: tuple[float, float] = (0.0, 1.0)
    sigma_bounds: tuple[float, float] = (0.0, 20.0)
    omega_bounds: tuple[float, float] = (0.0, 20.0)
    kappa_rate: float = 0.003  # Exponential prior rate on the Weibull shape
    coef_sd: float = 1000.0  # Normal SD for phi and for alpha
    tau_scale: float = 0.5  # Half-Normal scale for the between-group SD
    alpha_fixed: float | None = None  # degenerate prior pinning alpha (common structure only)

    def validate(self) -> None:
        for name in ("beta0_bounds", "beta1_bounds", "sigma_bounds", "omega_bounds"):
            lo, hi = getattr(self, name)
            _require(hi > lo, f"{name} must have positive width")
        _require(self.kappa_rate > 0.0, "kappa_rate must be positive")
        _require(self.coef_sd > 0.0, "coef_sd must be positive")
        _require(self.tau_scale > 0.0, "tau_scale must be positive")


@dataclass
class JointModelSpec:
    """Model configuration: association structure, priors, and options."""

    association: str = "common"
    functional: str = "current_value"
    tumour_groups: tuple[str, ...] | None = None  # label order; first = reference
    n_quadrature: int = 15
    random_slope: bool = True
    group_intercepts: bool = False  # per-group longitudinal intercepts
    widen_slope_prior: bool = False  # beta1 ~ Uniform(-1, 1) instead of (0, 1)
    priors: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if self.tumour_groups is not None:
            self.tumour_groups = tuple(self.tumour_groups)
        self.validate()

    def validate(self) -> None:
        _require(self.association in ASSOCIATION_STRUCTURES, f"unknown association structure {self.association!r}")
        _require(self.functional in FUNCTIONAL_FORMS, f"unknown functional form {self.functional!r}")
        _require(self.n_quadrature >= 5, f"need at least 5 quadrature nodes, got {self.n_quadrature}")
        self.priors.validate()
        if self.priors.alpha_fixed is not None:
            _require(self.association == "common", "alpha_fixed is only supported for the common structure")

    @property
    def beta1_bounds(self) -> tuple[float, float]:
        if self.widen_slope_prior:
            return (-1.0, 1.0)
        return self.priors.beta1_bounds

    def to_dict(self) -> dict:
        d = {
            "association": self.association,
            "functional": self.functional,
            "n_quadrature": self.n_quadrature,
            "random_slope": self.random_slope,
            "group_intercepts": self.group_intercepts,
            "widen_slope_prior": self.widen_slope_prior,
        }
        if self.tumour_groups is not None:
            d["tumour_groups"] = list(self.tumour_groups)
        default = PriorSpec()
        if self.priors != default:
            d["priors"] = {
                "beta0_bounds": list(self.priors.beta0_bounds),
                "beta1_bounds": list(self.priors.beta1_bounds),
                "sigma_bounds": list(self.priors.sigma_bounds),
                "omega_bounds": list(self.priors.omega_bounds),
                "kappa_rate": self.priors.kappa_rate,
                "coef_sd": self.priors.coef_sd,
                "tau_scale": self.priors.tau_scale,
                "alpha_fixed": self.priors.alpha_fixed,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JointModelSpec":
        d = dict(d)
        aliases = {"current": "current_value", "value": "current_value"}
        if "functional" in d:
            d["functional"] = aliases.get(d["functional"], d["functional"])
        if "tumour_groups" in d and d["tumour_groups"] is not None:
            d["tumour_groups"] = tuple(d["tumour_groups"])
        if "priors" in d:
            p = dict(d["priors"])
            for name in ("beta0_bounds", "beta1_bounds", "sigma_bounds", "omega_bounds"):
                if name in p:
                    p[name] = tuple(p[name])
            d["priors"] = PriorSpec(**p)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        _require(not unknown, f"unknown model options: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Compiled cohort arrays


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1]."""
    _require(n >= 5, f"need at least 5 quadrature nodes, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


@dataclass(frozen=True)
class CohortArrays:
    """Flat numeric views of a cohort, precomputed for fast likelihoods.

    Longitudinal records are flattened in patient order with per-patient
    sufficient statistics for the Gaussian likelihood; quadrature nodes are
    pre-scaled to each patient's [0, os_time] since observation times are
    fixed while sampling.
    """

    patient_ids: tuple[str, ...]
    tumour_groups: tuple[str, ...]
    group_idx: np.ndarray  # (n,) int
    x_design: np.ndarray  # (n, p) intercept + group indicators
    phi_names: tuple[str, ...]
    os_time: np.ndarray  # (n,)
    log_os: np.ndarray
    event: np.ndarray  # (n,) float 0/1
    rec_t: np.ndarray  # (m,) flattened biomarker times
    rec_y: np.ndarray  # (m,)
    rec_pid: np.ndarray  # (m,) int patient index
    rec_count: np.ndarray  # (n,)
    sum_t: np.ndarray
    sum_t2: np.ndarray
    sum_y: np.ndarray
    sum_yt: np.ndarray
    sum_y2: np.ndarray
    n_quadrature: int
    glx: np.ndarray  # (k,) standard nodes
    glw: np.ndarray
    quad_t: np.ndarray  # (n, k) nodes scaled to [0, os_time]
    log_quad_t: np.ndarray
    quad_w: np.ndarray  # (n, k) weights including the interval Jacobian

    @property
    def n_patients(self) -> int:
        return self.os_time.size

    @property
    def n_groups(self) -> int:
        return len(self.tumour_groups)

    @property
    def n_records(self) -> int:
        return self.rec_t.size

    @classmethod
    def from_cohort(cls, cohort: CohortDataset, n_quadrature: int = 15) -> "CohortArrays":
        groups = cohort.tumour_groups
        label_to_idx = {g: i for i, g in enumerate(groups)}

        pids, gidx, os_t, ev = [], [], [], []
        rt, ry, rp = [], [], []
        for i, (surv, recs) in enumerate(cohort.patients):
            pids.append(surv.patient_id)
            gidx.append(label_to_idx[surv.tumour_group])
            os_t.append(surv.os_time)
            ev.append(1.0 if surv.event else 0.0)
            for rec in recs:
                rt.append(rec.time)
                ry.append(rec.sld)
                rp.append(i)

        group_idx = np.array(gidx, dtype=int)
        os_time = np.array(os_t)
        rec_t = np.array(rt)
        rec_y = np.array(ry)
        rec_pid = np.array(rp, dtype=int)
        n = os_time.size

        x_design = np.ones((n, len(groups)))
        for j in range(1, len(groups)):
            x_design[:, j] = (group_idx == j).astype(float)
        phi_names = ("intercept",) + tuple(groups[1:])

        rec_count = np.bincount(rec_pid, minlength=n).astype(float)
        sum_t = np.bincount(rec_pid, weights=rec_t, minlength=n)
        sum_t2 = np.bincount(rec_pid, weights=rec_t * rec_t, minlength=n)
        sum_y = np.bincount(rec_pid, weights=rec_y, minlength=n)
        sum_yt = np.bincount(rec_pid, weights=rec_y * rec_t, minlength=n)
        sum_y2 = np.bincount(rec_pid, weights=rec_y * rec_y, minlength=n)

        glx, glw = gauss_legendre(n_quadrature)
        half = 0.5 * os_time
        quad_t = half[:, None] * (glx[None, :] + 1.0)
        quad_w = half[:, None] * glw[None, :]

        return cls(
            patient_ids=tuple(pids),
            tumour_groups=groups,
            group_idx=group_idx,
            x_design=x_design,
            phi_names=phi_names,
            os_time=os_time,
            log_os=np.log(os_time),
            event=np.array(ev),
            rec_t=rec_t,
            rec_y=rec_y,
            rec_pid=rec_pid,
            rec_count=rec_count,
            sum_t=sum_t,
            sum_t2=sum_t2,
            sum_y=sum_y,
            sum_yt=sum_yt,
            sum_y2=sum_y2,
            n_quadrature=n_quadrature,
            glx=glx,
            glw=glw,
            quad_t=quad_t,
            log_quad_t=np.log(quad_t),
            quad_w=quad_w,
        )

    @classmethod
    def ensure(cls, cohort, n_quadrature: int = 15) -> "CohortArrays":
        if isinstance(cohort, cls):
            return cohort
        return cls.from_cohort(cohort, n_quadrature=n_quadrature)


# ---------------------------------------------------------------------------
# Trajectory and hazard functions


def _beta0_per_patient(beta0, group_idx):
    if np.ndim(beta0) == 0:
        return float(beta0)
    return np.asarray(beta0)[group_idx]


def trajectory_mean(params: LongitudinalParams, patient: int, t, group: int | None = None):
    """Model-implied SLD m_i(t) = (beta0 + b0_i) + (beta1 + b1_i) t."""
    if not 0 <= patient < params.n_patients:
        raise ModelError(f"unknown patient index {patient}")
    t = np.asarray(t, dtype=float)
    _require(np.all(t >= 0.0), "trajectory times must be nonnegative")
    if np.ndim(params.beta0) > 0:
        _require(group is not None, "per-group intercepts require the patient's group index")
        intercept = params.beta0[group] + params.b0[patient]
    else:
        intercept = params.beta0 + params.b0[patient]
    value = intercept + (params.beta1 + params.b1[patient]) * t
    return float(value) if value.ndim == 0 else value


def trajectory_slope(params: LongitudinalParams, patient: int) -> float:
    """Rate of change of the SLD trajectory (constant under linearity)."""
    if not 0 <= patient < params.n_patients:
        raise ModelError(f"unknown patient index {patient}")
    return float(params.beta1 + params.b1[patient])


def baseline_hazard(shape: float, log_scale: float, t):
    """Weibull baseline hazard kappa * exp(phi0) * t^(kappa - 1)."""
    _require(shape > 0.0, "shape must be positive")
    t = np.asarray(t, dtype=float)
    _require(np.all(t >= 0.0), "hazard times must be nonnegative")
    if shape < 1.0:
        _require(np.all(t > 0.0), "hazard is singular at t = 0 for shape < 1")
    with np.errstate(divide="ignore"):
        value = shape * np.exp(log_scale) * np.power(t, shape - 1.0)
    return float(value) if value.ndim == 0 else value


def link_coefficients(state: ParameterState, arrays: CohortArrays) -> tuple[np.ndarray, np.ndarray]:
    """Per-patient (C, D) with log h_i(t) = ln k + (k-1) ln t + C_i + D_i t.

    C collects the covariate effect plus the time-constant part of the
    association term; D is the coefficient on t (zero for the slope
    functional and whenever alpha = 0, where the cumulative hazard then has
    the closed form exp(C) * t^kappa).
    """
    lon = state.longitudinal
    xb = arrays.x_design @ state.survival.phi
    alpha_pat = state.association.per_group(arrays.n_groups)[arrays.group_idx]
    b0pop = _beta0_per_patient(lon.beta0, arrays.group_idx)
    if state.association.functional == "current_value":
        c = xb + alpha_pat * (b0pop + lon.b0)
        d = alpha_pat * (lon.beta1 + lon.b1)
    else:
        c = xb + alpha_pat * (lon.beta1 + lon.b1)
        d = np.zeros(arrays.n_patients)
    return c, d


def cumhaz_values(t, kappa, c, d, glx: np.ndarray, glw: np.ndarray) -> tuple[np.ndarray, int]:
    """Elementwise cumulative hazard for broadcastable (t, kappa, c, d).

    Closed form exp(c) * t^kappa where d == 0, Gauss-Legendre on [0, t]
    otherwise. Returns the values and the count of exponent-cap events.
    """
    t, kappa, c, d = np.broadcast_arrays(
        np.asarray(t, dtype=float), np.asarray(kappa, dtype=float), c, d
    )
    out = np.zeros(t.shape)
    ncap = 0

    closed = (d == 0.0) | (t == 0.0)
    if np.any(closed):
        tc = t[closed]
        with np.errstate(divide="ignore"):
            expnt = np.where(tc > 0.0, c[closed] + kappa[closed] * np.log(np.maximum(tc, 1e-300)), -np.inf)
        ncap += int(np.count_nonzero(expnt > MAX_EXPONENT))
        out[closed] = np.exp(np.minimum(expnt, MAX_EXPONENT))
        out[closed & (t == 0.0)] = 0.0

    open_mask = ~closed
    if np.any(open_mask):
        to = t[open_mask]
        half = 0.5 * to
        tn = half[..., None] * (glx + 1.0)
        expnt = (
            (kappa[open_mask] - 1.0)[..., None] * np.log(tn)
            + c[open_mask][..., None]
            + d[open_mask][..., None] * tn
        )
        ncap += int(np.count_nonzero(expnt > MAX_EXPONENT))
        integrand = np.exp(np.minimum(expnt, MAX_EXPONENT))
        out[open_mask] = kappa[open_mask] * np.sum(half[..., None] * glw * integrand, axis=-1)

    return out, ncap


def joint_hazard(state: ParameterState, cohort, patient: int, t) -> float:
    """Hazard for one patient at time t under the full joint model."""
    arrays = CohortArrays.ensure(cohort)
    if not 0 <= patient < arrays.n_patients:
        raise ModelError(f"unknown patient index {patient}")
    c, d = link_coefficients(state, arrays)
    base = baseline_hazard(state.survival.shape, 0.0, t)  # kappa * t^(kappa-1)
    expnt = c[patient] + d[patient] * np.asarray(t, dtype=float)
    value = base * np.exp(np.minimum(expnt, MAX_EXPONENT))
    return float(value) if np.ndim(value) == 0 else value


def cumulative_hazard(state: ParameterState, cohort, patient: int, t: float, n_quadrature: int | None = None) -> float:
    """Integrated hazard over [0, t] for one patient.

    Uses the closed form when the integrand is Weibull (no time-varying
    association term) and quadrature otherwise. Raises if the result is not
    finite, reporting the time and linear predictor involved.
    """
    arrays = CohortArrays.ensure(cohort)
    if not 0 <= patient < arrays.n_patients:
        raise ModelError(f"unknown patient index {patient}")
    _require(t >= 0.0, "cumulative hazard requires t >= 0")
    if n_quadrature is None:
        glx, glw = arrays.glx, arrays.glw
    else:
        glx, glw = gauss_legendre(n_quadrature)
    c, d = link_coefficients(state, arrays)
    value, _ = cumhaz_values(np.asarray(t), state.survival.shape, c[patient], d[patient], glx, glw)
    value = float(value)
    if not np.isfinite(value):
        raise NumericalError(
            f"cumulative hazard overflow for patient {arrays.patient_ids[patient]!r} at t={t}: "
            f"linear predictor C={c[patient]:.3f}, D={d[patient]:.3f}"
        )
    return value


# ---------------------------------------------------------------------------
# Likelihoods and priors


def longitudinal_terms_from_stats(arrays: CohortArrays, beta0, beta1, sigma, b0, b1) -> np.ndarray:
    """Per-patient Gaussian log-likelihood via sufficient statistics.

    beta0 may be a scalar or a per-group vector already expanded per patient.
    """
    a = beta0 + b0
    cslope = beta1 + b1
    ssr = (
        arrays.sum_y2
        - 2.0 * a * arrays.sum_y
        - 2.0 * cslope * arrays.sum_yt
        + a * a * arrays.rec_count
        + 2.0 * a * cslope * arrays.sum_t
        + cslope * cslope * arrays.sum_t2
    )
    return -0.5 * arrays.rec_count * (LOG_2PI + 2.0 * np.log(sigma)) - ssr / (2.0 * sigma * sigma)


def longitudinal_loglik(state: ParameterState, cohort) -> float:
    """Gaussian log-likelihood of all SLD records given the trajectories."""
    arrays = CohortArrays.ensure(cohort)
    lon = state.longitudinal
    _require(lon.n_patients == arrays.n_patients, "state sized for a different cohort")
    b0pop = _beta0_per_patient(lon.beta0, arrays.group_idx)
    if np.ndim(b0pop) > 0:
        b0pop = b0pop[arrays.rec_pid]
    mean = (b0pop + lon.b0[arrays.rec_pid]) + (lon.beta1 + lon.b1[arrays.rec_pid]) * arrays.rec_t
    resid = arrays.rec_y - mean
    n = arrays.n_records
    return float(-0.5 * n * (LOG_2PI + 2.0 * np.log(lon.sigma)) - np.sum(resid * resid) / (2.0 * lon.sigma**2))


def survival_terms(arrays: CohortArrays, kappa: float, c: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-patient survival log-likelihood terms given link coefficients.

    Returns event * ln h(os_time) - H(os_time) per patient plus the count of
    exponent-cap events encountered.
    """
    ncap = 0
    all_closed = not np.any(d)
    if all_closed:
        expnt = c + kappa * arrays.log_os
        ncap += int(np.count_nonzero(expnt > MAX_EXPONENT))
        cumhaz = np.exp(np.minimum(expnt, MAX_EXPONENT))
    else:
        expnt = (kappa - 1.0) * arrays.log_quad_t + c[:, None] + d[:, None] * arrays.quad_t
        ncap += int(np.count_nonzero(expnt > MAX_EXPONENT))
        # summing several capped exp(700) node values may overflow to inf;
        # the -1e250 floor below absorbs that, so silence the warning
        with np.errstate(over="ignore"):
            cumhaz = kappa * np.sum(arrays.quad_w * np.exp(np.minimum(expnt, MAX_EXPONENT)), axis=1)
        closed = d == 0.0
        if np.any(closed):
            expnt0 = c[closed] + kappa * arrays.log_os[closed]
            ncap += int(np.count_nonzero(expnt0 > MAX_EXPONENT))
            cumhaz[closed] = np.exp(np.minimum(expnt0, MAX_EXPONENT))

    ev_expnt = c + d * arrays.os_time
    ncap += int(np.count_nonzero((ev_expnt > MAX_EXPONENT) & (arrays.event > 0.0)))
    log_h = np.log(kappa) + (kappa - 1.0) * arrays.log_os + np.minimum(ev_expnt, MAX_EXPONENT)
    # floor the terms so that sums over patients stay finite even when the
    # exponent cap was hit; -1e250 still vetoes any Metropolis move
    return np.maximum(arrays.event * log_h - cumhaz, -1e250), ncap


def survival_loglik(state: ParameterState, cohort) -> float:
    """Weibull PH log-likelihood with the trajectory-linked hazard."""
    arrays = CohortArrays.ensure(cohort)
    c, d = link_coefficients(state, arrays)
    terms, _ = survival_terms(arrays, state.survival.shape, c, d)
    return float(np.sum(terms))


def _log_uniform(x: float, lo: float, hi: float) -> float:
    if lo < x < hi:
        return -float(np.log(hi - lo))
    return -np.inf


def _log_normal(x, sd: float):
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * (x / sd) ** 2))


def _log_half_normal(x: float, scale: float) -> float:
    if x <= 0.0:
        return -np.inf
    return float(0.5 * np.log(2.0 / np.pi) - np.log(scale) - 0.5 * (x / scale) ** 2)


def log_prior(state: ParameterState, spec: JointModelSpec) -> float:
    """Joint log prior, including random effects and hierarchical terms.

    Support violations return -inf rather than raising.
    """
    lon, surv, assoc = state.longitudinal, state.survival, state.association
    pr = spec.priors
    lp = 0.0

    beta0s = np.atleast_1d(np.asarray(lon.beta0, dtype=float))
    for value in beta0s:
        lp += _log_uniform(float(value), *pr.beta0_bounds)
    lp += _log_uniform(lon.beta1, *spec.beta1_bounds)
    lp += _log_uniform(lon.sigma, *pr.sigma_bounds)
    lp += _log_uniform(lon.omega0, *pr.omega_bounds)
    if spec.random_slope:
        lp += _log_uniform(lon.omega1, *pr.omega_bounds)
    elif lon.omega1 != 0.0 or np.any(lon.b1):
        return -np.inf

    if surv.shape <= 0.0:
        return -np.inf
    lp += float(np.log(pr.kappa_rate)) - pr.kappa_rate * surv.shape
    lp += _log_normal(surv.phi, pr.coef_sd)

    if assoc.structure == "common":
        if pr.alpha_fixed is not None:
            if assoc.alpha != pr.alpha_fixed:
                return -np.inf
            # point mass: no density contribution
        else:
            lp += _log_normal(assoc.alpha, pr.coef_sd)
    elif assoc.structure == "exchangeable":
        if assoc.tau is None or assoc.tau <= 0.0:
            return -np.inf
        lp += _log_normal(assoc.alpha, pr.coef_sd)
        lp += _log_half_normal(assoc.tau, pr.tau_scale)
        lp += _log_normal(assoc.alpha_k - assoc.alpha, assoc.tau)
    else:  # independent
        lp += _log_normal(assoc.alpha_k, pr.coef_sd)

    if not np.isfinite(lp):
        return -np.inf
    lp += _log_normal(lon.b0, lon.omega0)
    if spec.random_slope:
        lp += _log_normal(lon.b1, lon.omega1)
    return float(lp)


def log_posterior(state: ParameterState, cohort, spec: JointModelSpec) -> float:
    """log prior + longitudinal log-likelihood + survival log-likelihood."""
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    lp = log_prior(state, spec)
    if not np.isfinite(lp):
        return -np.inf
    return lp + longitudinal_loglik(state, arrays) + survival_loglik(state, arrays)


def association_hr(alpha: float, delta: float = 10.0) -> float:
    """Hazard ratio for a `delta`-unit increase in the linked quantity."""
    return float(np.exp(alpha * delta))


# ---------------------------------------------------------------------------
# Standard Weibull comparator (no biomarker)


@dataclass(frozen=True)
class WeibullFit:
    """Maximum-likelihood Weibull PH fit on survival data alone.

    ``cov`` is the estimated covariance of (ln shape, phi) from the inverse
    numerical Hessian; the ln-shape row and column are zero when the shape
    was held fixed.
    """

    shape: float
    phi: np.ndarray
    phi_names: tuple[str, ...]
    tumour_groups: tuple[str, ...]
    cov: np.ndarray
    loglik: float
    n_events: int
    shape_fixed: bool

    def linear_predictor(self, group_idx: np.ndarray) -> np.ndarray:
        x = np.ones((group_idx.size, self.phi.size))
        for j in range(1, self.phi.size):
            x[:, j] = (group_idx == j).astype(float)
        return x @ self.phi


def _weibull_negloglik_grad(params, times, events, x, fixed_log_shape):
    if fixed_log_shape is None:
        log_shape, phi = params[0], params[1:]
    else:
        log_shape, phi = fixed_log_shape, params
    kappa = np.exp(log_shape)
    xb = x @ phi
    log_t = np.log(times)
    haz_int = np.exp(np.minimum(xb + kappa * log_t, MAX_EXPONENT))  # H_i = e^{xb} t^kappa
    ll = np.sum(events * (log_shape + (kappa - 1.0) * log_t + xb)) - np.sum(haz_int)
    dphi = x.T @ (events - haz_int)
    if fixed_log_shape is None:
        dlogk = np.sum(events * (1.0 + kappa * log_t)) - np.sum(haz_int * kappa * log_t)
        grad = np.concatenate(([dlogk], dphi))
    else:
        grad = dphi
    return -ll, -grad


def fit_weibull_mle(
    survival,
    tumour_groups: tuple[str, ...] | None = None,
    fix_shape: float | None = None,
    max_iter: int = 500,
) -> WeibullFit:
    """Fit the standard Weibull PH model by maximum likelihood.

    ``survival`` is a list of SurvivalRecord. Optimisation runs over
    (ln shape, phi) unconstrained with analytic gradients; the covariance
    comes from the inverse Hessian estimated by central differences of the
    gradient. ``fix_shape`` pins the shape (e.g. 1.0 for an exponential fit).
    """
    if tumour_groups is None:
        seen: list[str] = []
        for rec in survival:
            if rec.tumour_group not in seen:
                seen.append(rec.tumour_group)
        tumour_groups = tuple(seen)
    label_to_idx = {g: i for i, g in enumerate(tumour_groups)}

    times = np.array([rec.os_time for rec in survival])
    events = np.array([1.0 if rec.event else 0.0 for rec in survival])
    group_idx = np.array([label_to_idx[rec.tumour_group] for rec in survival], dtype=int)
    n_events = int(events.sum())
    _require(n_events >= 1, "Weibull MLE requires at least one observed event")

    p = len(tumour_groups)
    x = np.ones((times.size, p))
    for j in range(1, p):
        x[:, j] = (group_idx == j).astype(float)
    phi_names = ("intercept",) + tuple(tumour_groups[1:])

    fixed_log_shape = None if fix_shape is None else float(np.log(fix_shape))
    start_phi = np.zeros(p)
    start_phi[0] = float(np.log(n_events / times.sum()))
    start = start_phi if fix_shape is not None else np.concatenate(([0.0], start_phi))

    res = optimize.minimize(
        _weibull_negloglik_grad,
        start,
        args=(times, events, x, fixed_log_shape),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter},
    )
    if not res.success:
        raise NumericalError(f"Weibull MLE did not converge after {max_iter} iterations: {res.message}")

    # Hessian of the negative log-likelihood by central differences of the
    # analytic gradient, then symmetrised.
    est = res.x
    dim = est.size
    hess = np.zeros((dim, dim))
    for j in range(dim):
        h = 1e-5 * max(1.0, abs(est[j]))
        up = est.copy()
        up[j] += h
        dn = est.copy()
        dn[j] -= h
        _, gu = _weibull_negloglik_grad(up, times, events, x, fixed_log_shape)
        _, gd = _weibull_negloglik_grad(dn, times, events, x, fixed_log_shape)
        hess[:, j] = (gu - gd) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    try:
        cov_free = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        raise NumericalError("Weibull MLE covariance is singular") from None

    if fix_shape is None:
        shape = float(np.exp(est[0]))
        phi = est[1:].copy()
        cov = cov_free
    else:
        shape = float(fix_shape)
        phi = est.copy()
        cov = np.zeros((p + 1, p + 1))
        cov[1:, 1:] = cov_free

    return WeibullFit(
        shape=shape,
        phi=phi,
        phi_names=phi_names,
        tumour_groups=tuple(tumour_groups),
        cov=cov,
        loglik=float(-res.fun),
        n_events=n_events,
        shape_fixed=fix_shape is not None,
    )


def make_state(
    arrays: CohortArrays,
    spec: JointModelSpec,
    beta0: float | np.ndarray = 30.0,
    beta1: float = 0.5,
    sigma: float = 5.0,
    omega0: float = 8.0,
    omega1: float = 0.1,
    kappa: float = 1.0,
    phi: np.ndarray | None = None,
    alpha: float = 0.0,
    alpha_k: np.ndarray | None = None,
    tau: float | None = None,
    b0: np.ndarray | None = None,
    b1: np.ndarray | None = None,
) -> ParameterState:
    """Assemble a validated ParameterState sized for a cohort."""
    n, k = arrays.n_patients, arrays.n_groups
    if spec.group_intercepts and np.ndim(beta0) == 0:
        beta0 = np.full(k, float(beta0))
    if phi is None:
        phi = np.zeros(k)
        phi[0] = -4.0
    if spec.association in ("exchangeable", "independent") and alpha_k is None:
        alpha_k = np.full(k, alpha)
    if spec.association == "exchangeable" and tau is None:
        tau = 0.3
    if not spec.random_slope:
        omega1 = 0.0
    state = ParameterState(
        longitudinal=LongitudinalParams(
            beta0=beta0,
            beta1=beta1,
            sigma=sigma,
            omega0=omega0,
            omega1=omega1,
            b0=np.zeros(n) if b0 is None else np.asarray(b0, dtype=float),
            b1=np.zeros(n) if b1 is None else np.asarray(b1, dtype=float),
        ),
        survival=SurvivalParams(shape=kappa, phi=np.asarray(phi, dtype=float)),
        association=AssociationParams(
            structure=spec.association,
            functional=spec.functional,
            alpha=alpha,
            alpha_k=alpha_k,
            tau=tau,
        ),
    )
    state.validate(n_groups=k, random_slope=spec.random_slope)
    return state
