"""Posterior-predictive survival extrapolation and summaries.

For each posterior draw, patients who died keep their observed times and
censored patients get a death time drawn from the conditional law
P(T > t | T > c) implied by that draw's trajectory-linked hazard. The
resulting cohort-level survival curves (overall and per tumour group) are
summarised as restricted mean survival time, median survival, and landmark
survival with 95% credible intervals.

A plug-in Weibull extrapolation from a maximum-likelihood fit is provided as
the standard comparator, with parametric-bootstrap confidence intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .data import MONTHS_PER_YEAR
from .model import (
    MAX_EXPONENT,
    CohortArrays,
    JointModelSpec,
    ModelError,
    NumericalError,
    WeibullFit,
    cumhaz_values,
    gauss_legendre,
)
from .sampler import DrawDecoder, PosteriorSamples

SCHEMA_VERSION = "1"

DEFAULT_HORIZON = 1200.0  # months; a 100-year lifespan
DEFAULT_LANDMARKS = (120.0,)  # 10 years
CURVE_HEADER = ("scope", "time_months", "mean", "lo95", "hi95")
_BIAS_WARN_FRACTION = 0.01


def default_grid(horizon: float = DEFAULT_HORIZON) -> np.ndarray:
    """Monthly steps to 120 months, quarterly steps to the horizon."""
    if horizon <= 120.0:
        return np.arange(0.0, math.floor(horizon) + 1.0)
    monthly = np.arange(0.0, 121.0)
    quarterly = np.arange(123.0, horizon + 0.5, 3.0)
    return np.concatenate([monthly, quarterly])


def summarize(draws, min_draws: int = 40) -> tuple[float, float, float]:
    """(mean, 2.5th, 97.5th percentile) of a vector of posterior draws."""
    draws = np.asarray(draws, dtype=float).ravel()
    if draws.size < min_draws:
        raise NumericalError(f"need at least {min_draws} draws to summarise, got {draws.size}")
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return float(draws.mean()), float(lo), float(hi)


# ---------------------------------------------------------------------------
# Conditional death-time inversion


def conditional_death_times(u, entry, kappa, c, d, horizon: float = DEFAULT_HORIZON,
                            tol: float = 1e-6, n_quadrature: int = 15):
    """Solve H(T) - H(entry) = -ln(u) elementwise for T.

    u ~ Uniform(0,1) gives T distributed as the conditional survival law
    given survival to `entry`. Times beyond `horizon` are truncated there
    and counted. Returns (times, n_capped).

    Closed forms cover d == 0 (any shape; at kappa=1 this is the memoryless
    case) and kappa == 1 with d != 0; other cases bisect on a bracketed
    interval using the same quadrature rule as the likelihood.
    """
    u, entry, kappa, c, d = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (u, entry, kappa, c, d))
    )
    shape = u.shape
    u, entry, kappa, c, d = (x.ravel() for x in (u, entry, kappa, c, d))
    nlu = -np.log(u)  # Exp(1) increment of cumulative hazard
    out = np.empty(u.shape)

    closed = d == 0.0
    if np.any(closed):
        with np.errstate(over="ignore"):
            out[closed] = (
                entry[closed] ** kappa[closed] + nlu[closed] * np.exp(-c[closed])
            ) ** (1.0 / kappa[closed])

    exp1 = (~closed) & (kappa == 1.0)
    if np.any(exp1):
        dd, cc, e0 = d[exp1], c[exp1], entry[exp1]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            arg = np.exp(dd * e0) - dd * nlu[exp1] * np.exp(-cc)
            t = np.where(arg > 0.0, np.log(np.maximum(arg, 1e-320)) / dd, np.inf)
        out[exp1] = t

    general = ~closed & ~exp1
    if np.any(general):
        glx, glw = gauss_legendre(n_quadrature)
        e0, kk, cc, dd = entry[general], kappa[general], c[general], d[general]
        h_entry, _ = cumhaz_values(e0, kk, cc, dd, glx, glw)
        target = h_entry + nlu[general]
        h_hor, _ = cumhaz_values(np.full_like(e0, horizon), kk, cc, dd, glx, glw)
        t = np.full(e0.shape, np.inf)
        solvable = (h_hor >= target) & np.isfinite(target)
        if np.any(solvable):
            lo = e0[solvable].copy()
            hi = np.full(lo.shape, float(horizon))
            kk_s, cc_s, dd_s, tgt = kk[solvable], cc[solvable], dd[solvable], target[solvable]
            n_iter = max(1, math.ceil(math.log2(max(horizon / tol, 2.0))))
            for _ in range(n_iter):
                mid = 0.5 * (lo + hi)
                h_mid, _ = cumhaz_values(mid, kk_s, cc_s, dd_s, glx, glw)
                too_low = h_mid < tgt
                lo = np.where(too_low, mid, lo)
                hi = np.where(too_low, hi, mid)
            t[solvable] = 0.5 * (lo + hi)
        out[general] = t

    capped = ~(out <= horizon)  # catches > horizon, inf, and nan
    out = np.where(capped, horizon, out)
    return out.reshape(shape), int(np.count_nonzero(capped))


def conditional_death_draw(u: float, entry: float, kappa: float, c: float, d: float,
                           horizon: float = DEFAULT_HORIZON) -> float:
    """Scalar convenience wrapper around conditional_death_times."""
    t, _ = conditional_death_times(u, entry, kappa, c, d, horizon=horizon)
    return float(t)


# ---------------------------------------------------------------------------
# Curve summaries


def survival_curves(times: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Empirical S(t) = mean(T > t) per draw; times is (n_draws, n_subjects)."""
    times = np.atleast_2d(times)
    n_draws, n_sub = times.shape
    curves = np.empty((n_draws, grid.size))
    for i in range(n_draws):
        srt = np.sort(times[i])
        curves[i] = (n_sub - np.searchsorted(srt, grid, side="right")) / n_sub
    return curves


def curve_rmst(grid: np.ndarray, curves: np.ndarray, upto: float) -> np.ndarray:
    """Trapezoidal restricted mean survival time in months, per draw."""
    curves = np.atleast_2d(curves)
    if upto > grid[-1]:
        raise ModelError(f"RMST horizon {upto} exceeds the grid maximum {grid[-1]}")
    j = int(np.searchsorted(grid, upto, side="right")) - 1
    base = np.trapezoid(curves[:, : j + 1], grid[: j + 1], axis=1)
    if grid[j] < upto:
        frac = (upto - grid[j]) / (grid[j + 1] - grid[j])
        s_upto = curves[:, j] + frac * (curves[:, j + 1] - curves[:, j])
        base = base + 0.5 * (curves[:, j] + s_upto) * (upto - grid[j])
    return base


def curve_median(grid: np.ndarray, curves: np.ndarray, horizon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw median survival: first time S(t) <= 0.5, linearly interpolated.

    Draws whose curve never reaches 0.5 are capped at the horizon; the
    second return value marks draws whose median was reached.
    """
    curves = np.atleast_2d(curves)
    below = curves <= 0.5
    reached = below.any(axis=1)
    medians = np.full(curves.shape[0], float(horizon))
    rows = np.nonzero(reached)[0]
    if rows.size:
        first = np.argmax(below[rows], axis=1)
        on_left_edge = first == 0
        inner = rows[~on_left_edge]
        g = first[~on_left_edge]
        s0 = curves[inner, g - 1]
        s1 = curves[inner, g]
        medians[inner] = grid[g - 1] + (s0 - 0.5) * (grid[g] - grid[g - 1]) / (s0 - s1)
        medians[rows[on_left_edge]] = grid[0]
    return medians, reached


def curve_landmark(grid: np.ndarray, curves: np.ndarray, months: float) -> np.ndarray:
    """S(months) per draw, as a percentage."""
    curves = np.atleast_2d(curves)
    exact = np.nonzero(grid == months)[0]
    if exact.size:
        return 100.0 * curves[:, exact[0]]
    return 100.0 * np.array([np.interp(months, grid, row) for row in curves])


# ---------------------------------------------------------------------------
# Result container


@dataclass
class ScopeCurve:
    scope: str
    mean: np.ndarray
    lo95: np.ndarray | None = None
    hi95: np.ndarray | None = None


@dataclass
class ExtrapolationResult:
    """Curves plus per-scope summaries for the overall cohort and groups."""

    method: str  # "joint_posterior" or "weibull_mle"
    grid: np.ndarray
    horizon: float
    n_draws: int
    curves: dict[str, ScopeCurve]
    summaries: dict[str, dict]
    flags: dict = field(default_factory=dict)

    def summary_dict(self, manifest_hash: str | None = None) -> dict:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "horizon_months": float(self.horizon),
            "n_draws": int(self.n_draws),
            "scopes": self.summaries,
            "flags": self.flags,
        }
        if manifest_hash is not None:
            payload["manifest_hash"] = manifest_hash
        return payload

    def write_summary_json(self, path, manifest_hash: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(manifest_hash), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_curves_csv(self, path, manifest_hash: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if manifest_hash is not None:
                fh.write(f"# manifest_hash={manifest_hash}\n")
            fh.write(",".join(CURVE_HEADER) + "\n")
            for scope, curve in self.curves.items():
                for j, t in enumerate(self.grid):
                    lo = "" if curve.lo95 is None else repr(float(curve.lo95[j]))
                    hi = "" if curve.hi95 is None else repr(float(curve.hi95[j]))
                    fh.write(f"{scope},{repr(float(t))},{repr(float(curve.mean[j]))},{lo},{hi}\n")


def _interval(point: float, lo: float | None, hi: float | None, units: str, **extra) -> dict:
    entry = {
        "point": float(point),
        "lo95": None if lo is None else float(lo),
        "hi95": None if hi is None else float(hi),
        "units": units,
    }
    entry.update(extra)
    return entry


def _scope_summary_from_draws(grid, curves, horizon, n_patients, n_events,
                              landmarks, rmst_horizons) -> dict:
    mean_curve = curves.mean(axis=0)
    lifespan_months = curve_rmst(grid, curves, horizon)
    rmst_5y_months = curve_rmst(grid, curves, 60.0)
    medians, _ = curve_median(grid, curves, horizon)
    land_10y = curve_landmark(grid, curves, 120.0)
    not_reached = bool(mean_curve[-1] > 0.5)

    out = {
        "n_patients": int(n_patients),
        "n_events": int(n_events),
        "rmst_lifespan": _interval(*(v / MONTHS_PER_YEAR for v in summarize(lifespan_months)), units="years"),
        "rmst_5y": _interval(*(v / MONTHS_PER_YEAR for v in summarize(rmst_5y_months)), units="years"),
        "median": _interval(*summarize(medians), units="months", not_reached=not_reached),
        "landmark_10y": _interval(*summarize(land_10y), units="percent"),
        "landmarks": {},
        "rmst": {},
    }
    for months in landmarks:
        out["landmarks"][f"{months:g}"] = _interval(
            *summarize(curve_landmark(grid, curves, months)), units="percent")
    for months in rmst_horizons:
        out["rmst"][f"{months:g}"] = _interval(
            *(v / MONTHS_PER_YEAR for v in summarize(curve_rmst(grid, curves, months))), units="years")
    return out


# ---------------------------------------------------------------------------
# Joint-model posterior predictive extrapolation


def predict_cohort(samples: PosteriorSamples, cohort, spec: JointModelSpec | None = None,
                   seed: int = 0, horizon: float = DEFAULT_HORIZON,
                   grid: np.ndarray | None = None, max_draws: int = 4000,
                   draws_per_sample: int = 1,
                   landmarks=DEFAULT_LANDMARKS,
                   rmst_horizons=None,
                   chunk_size: int = 200000) -> ExtrapolationResult:
    """Posterior-predictive extrapolation of the fitted cohort.

    Observed deaths keep their times in every draw; censored patients get
    conditional death times given survival to their censoring time. At most
    `max_draws` evenly spaced posterior draws are used, each contributing
    `draws_per_sample` predictive draws. ``rmst_horizons`` defaults to
    (60, horizon) months.
    """
    if rmst_horizons is None:
        rmst_horizons = (60.0, float(horizon))
    if spec is None:
        spec = samples.spec
    if spec is None:
        raise ModelError("predict_cohort needs the model spec")
    arrays = CohortArrays.ensure(cohort, n_quadrature=spec.n_quadrature)
    if tuple(arrays.patient_ids) != tuple(samples.patient_ids) and samples.patient_ids:
        raise ModelError("posterior draws and cohort cover different patients")
    decoder = DrawDecoder(samples.param_names, arrays, spec)

    stacked = samples.stacked()
    n_total = stacked.shape[0]
    if n_total > max_draws:
        pick = np.floor(np.linspace(0, n_total, max_draws, endpoint=False)).astype(int)
        stacked = stacked[pick]
    if draws_per_sample > 1:
        stacked = np.repeat(stacked, draws_per_sample, axis=0)
    n_draws = stacked.shape[0]

    grid = default_grid(horizon) if grid is None else np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0.0) or grid[-1] < horizon:
        raise ModelError("grid must start at 0, increase strictly, and reach the horizon")

    cens = np.nonzero(arrays.event == 0.0)[0]
    n_cens = cens.size
    times = np.tile(arrays.os_time, (n_draws, 1))

    n_capped = 0
    if n_cens:
        kap = np.empty(n_draws)
        c_mat = np.empty((n_draws, n_cens))
        d_mat = np.empty((n_draws, n_cens))
        for i in range(n_draws):
            kap[i], c_row, d_row = decoder.link_coeffs(stacked[i])
            c_mat[i] = c_row[cens]
            d_mat[i] = d_row[cens]
        rng = np.random.default_rng(seed)
        u = rng.random((n_draws, n_cens))
        entry = arrays.os_time[cens]

        flat_t = np.empty(n_draws * n_cens)
        u_f = u.ravel()
        e_f = np.broadcast_to(entry, (n_draws, n_cens)).ravel()
        k_f = np.broadcast_to(kap[:, None], (n_draws, n_cens)).ravel()
        c_f = c_mat.ravel()
        d_f = d_mat.ravel()
        for start in range(0, flat_t.size, chunk_size):
            stop = min(start + chunk_size, flat_t.size)
            t_chunk, ncap = conditional_death_times(
                u_f[start:stop], e_f[start:stop], k_f[start:stop],
                c_f[start:stop], d_f[start:stop],
                horizon=horizon, n_quadrature=spec.n_quadrature,
            )
            flat_t[start:stop] = t_chunk
            n_capped += ncap
        times[:, cens] = flat_t.reshape(n_draws, n_cens)

    capped_fraction = n_capped / max(n_draws * n_cens, 1)
    scopes: dict[str, np.ndarray] = {"overall": np.arange(arrays.n_patients)}
    for gi, label in enumerate(arrays.tumour_groups):
        scopes[label] = np.nonzero(arrays.group_idx == gi)[0]

    curves_out: dict[str, ScopeCurve] = {}
    summaries: dict[str, dict] = {}
    for label, idx in scopes.items():
        if idx.size == 0:
            continue
        curves = survival_curves(times[:, idx], grid)
        lo, hi = np.percentile(curves, [2.5, 97.5], axis=0)
        curves_out[label] = ScopeCurve(scope=label, mean=curves.mean(axis=0), lo95=lo, hi95=hi)
        summaries[label] = _scope_summary_from_draws(
            grid, curves, horizon,
            n_patients=idx.size,
            n_events=int(arrays.event[idx].sum()),
            landmarks=landmarks, rmst_horizons=rmst_horizons,
        )

    flags = {
        "capped_draw_fraction": capped_fraction,
        "cap_bias_warning": capped_fraction > _BIAS_WARN_FRACTION,
        "n_censored": int(n_cens),
        "seed": seed,
    }
    return ExtrapolationResult(
        method="joint_posterior", grid=grid, horizon=horizon, n_draws=n_draws,
        curves=curves_out, summaries=summaries, flags=flags,
    )


# ---------------------------------------------------------------------------
# Weibull comparator


def _weibull_rmst_months(log_lambda, kappa, upto):
    """Exact restricted mean of a Weibull PH survival exp(-lambda t^kappa).

    RMST(T) = Gamma(1/k) P(1/k, lambda T^k) / (k lambda^(1/k)) with P the
    regularised lower incomplete gamma function. Evaluated in log space so
    that extreme bootstrap draws degrade to their limits (T for lambda -> 0,
    0 for lambda -> inf) instead of overflowing.
    """
    log_lambda = np.asarray(log_lambda, dtype=float)
    a = 1.0 / kappa
    log_x = log_lambda + kappa * math.log(upto)
    unrestricted = np.exp(np.minimum(
        special.gammaln(a) - math.log(kappa) - a * log_lambda, MAX_EXPONENT))
    out = unrestricted * special.gammainc(a, np.exp(np.minimum(log_x, MAX_EXPONENT)))
    out = np.where(log_x < -MAX_EXPONENT, float(upto), np.minimum(out, float(upto)))
    return out


def _weibull_mix_survival(t, log_lambdas, kappa, weights):
    t = np.asarray(t, dtype=float)
    log_lambdas = np.asarray(log_lambdas, dtype=float)
    with np.errstate(divide="ignore"):  # log(0) at t = 0 gives S = 1 exactly
        log_h = log_lambdas[:, None] + kappa * np.log(t)[None, :]
    s = np.exp(-np.exp(np.minimum(log_h, MAX_EXPONENT)))
    return weights @ s


def _weibull_scope_summary(log_lambdas, kappa, weights, horizon, landmarks, rmst_horizons):
    """Point summaries for one scope (exact, no grid error)."""

    def rmst_years(upto):
        per_group = _weibull_rmst_months(log_lambdas, kappa, upto)
        return float(weights @ per_group) / MONTHS_PER_YEAR

    def landmark_pct(months):
        return 100.0 * float(_weibull_mix_survival(np.array([months]), log_lambdas, kappa, weights)[0])

    s_hor = float(_weibull_mix_survival(np.array([horizon]), log_lambdas, kappa, weights)[0])
    if s_hor > 0.5:
        median = float(horizon)
        not_reached = True
    else:
        median = float(optimize.brentq(
            lambda t: float(_weibull_mix_survival(np.array([t]), log_lambdas, kappa, weights)[0]) - 0.5,
            0.0, horizon, xtol=1e-9, rtol=1e-12,
        ))
        not_reached = False
    return {
        "rmst_lifespan": rmst_years(horizon),
        "rmst_5y": rmst_years(60.0),
        "median": median,
        "not_reached": not_reached,
        "landmark_10y": landmark_pct(120.0),
        "landmarks": {f"{m:g}": landmark_pct(m) for m in landmarks},
        "rmst": {f"{m:g}": rmst_years(m) for m in rmst_horizons},
    }


def weibull_extrapolation(fit: WeibullFit, cohort, horizon: float = DEFAULT_HORIZON,
                          grid: np.ndarray | None = None, n_boot: int = 2000,
                          seed: int = 0, landmarks=DEFAULT_LANDMARKS,
                          rmst_horizons=None) -> ExtrapolationResult:
    """Plug-in extrapolation from a Weibull MLE fit.

    Group curves use the fitted parameters directly; the overall curve is the
    patient-mix weighted average. Intervals come from a parametric bootstrap
    on (ln shape, phi) using the asymptotic covariance; n_boot=0 disables
    them. Point estimates use exact formulas (no grid error).
    ``rmst_horizons`` defaults to (60, horizon) months.
    """
    if rmst_horizons is None:
        rmst_horizons = (60.0, float(horizon))
    arrays = CohortArrays.ensure(cohort)
    if tuple(arrays.tumour_groups) != tuple(fit.tumour_groups):
        raise ModelError("Weibull fit and cohort disagree on tumour groups")
    grid = default_grid(horizon) if grid is None else np.asarray(grid, dtype=float)
    k_groups = len(fit.tumour_groups)

    group_n = np.bincount(arrays.group_idx, minlength=k_groups).astype(float)
    group_events = np.bincount(arrays.group_idx, weights=arrays.event, minlength=k_groups)
    x_groups = np.hstack([np.ones((k_groups, 1)), np.eye(k_groups)[:, 1:]])

    def scope_weights(label):
        if label == "overall":
            return group_n / group_n.sum()
        gi = fit.tumour_groups.index(label)
        w = np.zeros(k_groups)
        w[gi] = 1.0
        return w

    scope_labels = ["overall"] + list(fit.tumour_groups)

    def summaries_for(params):
        log_kappa = params[0]
        phi = params[1:]
        log_lambdas = x_groups @ phi
        kappa = math.exp(log_kappa)
        return {
            label: _weibull_scope_summary(
                log_lambdas, kappa, scope_weights(label), horizon, landmarks, rmst_horizons)
            for label in scope_labels
        }

    point_params = np.concatenate([[math.log(fit.shape)], fit.phi])
    point = summaries_for(point_params)

    boot: dict[str, list[dict]] | None = None
    boot_curves: dict[str, np.ndarray] | None = None
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        draws = rng.multivariate_normal(point_params, fit.cov, size=n_boot, method="svd")
        if fit.shape_fixed:
            draws[:, 0] = math.log(fit.shape)
        boot = {label: [] for label in scope_labels}
        boot_curves = {label: np.empty((n_boot, grid.size)) for label in scope_labels}
        for b in range(n_boot):
            log_lambdas = x_groups @ draws[b, 1:]
            kappa_b = math.exp(draws[b, 0])
            for label in scope_labels:
                w = scope_weights(label)
                boot[label].append(_weibull_scope_summary(
                    log_lambdas, kappa_b, w, horizon, landmarks, rmst_horizons))
                boot_curves[label][b] = _weibull_mix_survival(grid, log_lambdas, kappa_b, w)

    def interval(label, key, units, subkey=None, **extra):
        if subkey is None:
            pt = point[label][key]
            values = None if boot is None else [b[key] for b in boot[label]]
        else:
            pt = point[label][key][subkey]
            values = None if boot is None else [b[key][subkey] for b in boot[label]]
        if values is None:
            return _interval(pt, None, None, units, **extra)
        lo, hi = np.percentile(values, [2.5, 97.5])
        return _interval(pt, lo, hi, units, **extra)

    curves_out: dict[str, ScopeCurve] = {}
    summaries: dict[str, dict] = {}
    for label in scope_labels:
        w = scope_weights(label)
        log_lambdas = x_groups @ fit.phi
        mean_curve = _weibull_mix_survival(grid, log_lambdas, math.exp(point_params[0]), w)
        if boot_curves is not None:
            lo, hi = np.percentile(boot_curves[label], [2.5, 97.5], axis=0)
        else:
            lo = hi = None
        curves_out[label] = ScopeCurve(scope=label, mean=mean_curve, lo95=lo, hi95=hi)

        n_pat = group_n.sum() if label == "overall" else group_n[fit.tumour_groups.index(label)]
        n_ev = group_events.sum() if label == "overall" else group_events[fit.tumour_groups.index(label)]
        summaries[label] = {
            "n_patients": int(n_pat),
            "n_events": int(n_ev),
            "rmst_lifespan": interval(label, "rmst_lifespan", "years"),
            "rmst_5y": interval(label, "rmst_5y", "years"),
            "median": interval(label, "median", "months", not_reached=point[label]["not_reached"]),
            "landmark_10y": interval(label, "landmark_10y", "percent"),
            "landmarks": {m: interval(label, "landmarks", "percent", subkey=m)
                          for m in point[label]["landmarks"]},
            "rmst": {m: interval(label, "rmst", "years", subkey=m)
                     for m in point[label]["rmst"]},
        }

    return ExtrapolationResult(
        method="weibull_mle", grid=grid, horizon=horizon,
        n_draws=n_boot, curves=curves_out, summaries=summaries,
        flags={"bootstrap_draws": n_boot, "seed": seed, "shape_fixed": fit.shape_fixed},
    )
