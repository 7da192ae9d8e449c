"""Cohort data handling: loading, validation, joining, and nonparametric summaries.

Time is measured in months since first dose throughout. Horizons quoted in
years are converted exactly with :func:`years_to_months`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

MONTHS_PER_YEAR = 12

OPTIONAL_COVARIATES = ("age_group", "ecog", "metastatic")

LONGITUDINAL_HEADER = ("patient_id", "time_months", "sld_mm")
SURVIVAL_HEADER = ("patient_id", "os_time_months", "event", "tumour_group")
STEP_CURVE_HEADER = ("time_months", "survival", "at_risk", "events")


class DataError(ValueError):
    """Raised when input records violate the cohort data contracts."""


def _check_label(value: str, what: str) -> None:
    if not value:
        raise DataError(f"empty {what}")
    if "," in value or "\n" in value or "\r" in value:
        raise DataError(f"{what} {value!r} must not contain commas or newlines")


def years_to_months(years: float) -> float:
    """Exact unit conversion (10 years -> 120 months)."""
    return years * MONTHS_PER_YEAR


def months_to_years(months: float) -> float:
    return months / MONTHS_PER_YEAR


@dataclass(frozen=True)
class LongitudinalRecord:
    """One sum-of-lesion-diameters measurement for one patient."""

    patient_id: str
    time: float  # months since first dose, >= 0
    sld: float  # millimetres, >= 0

    def __post_init__(self):
        _check_label(self.patient_id, "patient_id")
        if not (self.time >= 0.0):
            raise DataError(f"negative biomarker time {self.time!r} for patient {self.patient_id!r}")
        if not (self.sld >= 0.0):
            raise DataError(f"negative SLD {self.sld!r} for patient {self.patient_id!r}")


@dataclass(frozen=True)
class SurvivalRecord:
    """Overall-survival outcome for one patient."""

    patient_id: str
    os_time: float  # months since first dose, > 0
    event: bool  # True = death observed, False = censored
    tumour_group: str
    covariates: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _check_label(self.patient_id, "patient_id")
        _check_label(self.tumour_group, "tumour_group")
        if not (self.os_time > 0.0):
            raise DataError(f"non-positive survival time {self.os_time!r} for patient {self.patient_id!r}")
        unknown = set(self.covariates) - set(OPTIONAL_COVARIATES)
        if unknown:
            raise DataError(f"unknown covariates {sorted(unknown)} for patient {self.patient_id!r}")


@dataclass(frozen=True)
class CohortDataset:
    """Joined longitudinal and survival records for all patients.

    ``patients`` pairs each survival record with that patient's biomarker
    records in strictly increasing time order. ``tumour_groups`` fixes the
    group label order used for design matrices downstream (first label is
    the reference group).
    """

    patients: tuple[tuple[SurvivalRecord, tuple[LongitudinalRecord, ...]], ...]
    tumour_groups: tuple[str, ...]

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_records(self) -> int:
        return sum(len(recs) for _, recs in self.patients)

    def group_counts(self) -> dict[str, int]:
        counts = {g: 0 for g in self.tumour_groups}
        for surv, _ in self.patients:
            counts[surv.tumour_group] += 1
        return counts

    def survival_records(self) -> list[SurvivalRecord]:
        return [surv for surv, _ in self.patients]

    def group_index(self, label: str) -> int:
        try:
            return self.tumour_groups.index(label)
        except ValueError:
            raise DataError(f"unknown tumour group {label!r}") from None


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous survival step function with at-risk bookkeeping.

    ``grid`` starts at 0 where ``survival`` is exactly 1; subsequent grid
    points are the distinct event times. ``max_follow_up`` is the largest
    observed time (event or censoring), which may exceed the last grid
    point when the final observations are censored.
    """

    grid: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    max_follow_up: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        surv = np.asarray(self.survival, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "survival", surv)
        object.__setattr__(self, "at_risk", np.asarray(self.at_risk, dtype=int))
        object.__setattr__(self, "events", np.asarray(self.events, dtype=int))
        if grid.size == 0 or grid[0] != 0.0:
            raise DataError("step curve grid must start at time 0")
        if surv[0] != 1.0:
            raise DataError("step curve must start at survival 1")
        if np.any(np.diff(grid) <= 0):
            raise DataError("step curve grid must be strictly increasing")
        if np.any(surv < 0.0) or np.any(surv > 1.0):
            raise DataError("survival probabilities must lie in [0, 1]")
        if np.any(np.diff(surv) > 0):
            raise DataError("survival must be nonincreasing")

    def survival_at(self, t: float) -> float:
        """Step-function value S(t), carrying the last estimate forward."""
        idx = np.searchsorted(self.grid, t, side="right") - 1
        return float(self.survival[max(idx, 0)])


@dataclass(frozen=True)
class RmstEstimate:
    """Restricted mean survival time in months with a 95% confidence interval."""

    point: float
    lo: float
    hi: float
    horizon: float
    truncated: bool  # horizon ran past follow-up while S(t) was still positive


def _parse_float(text: str, what: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line_no}: cannot parse {what} from {text!r}") from None


def _read_rows(path, expected_prefix: tuple[str, ...], allowed_extra: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(expected_prefix)}") from None
        header = tuple(h.strip() for h in header)
        if header[: len(expected_prefix)] != expected_prefix:
            raise DataError(
                f"{path}: bad header {','.join(header)!r}, expected it to start with {','.join(expected_prefix)!r}"
            )
        extra = header[len(expected_prefix) :]
        bad = set(extra) - set(allowed_extra)
        if bad:
            raise DataError(f"{path}: unsupported columns {sorted(bad)}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no}: expected {len(header)} fields, found {len(row)}")
            rows.append((line_no, [cell.strip() for cell in row]))
    return extra, rows


def load_longitudinal(path) -> list[LongitudinalRecord]:
    """Load biomarker records from CSV (header ``patient_id,time_months,sld_mm``).

    Raises :class:`DataError` naming the offending line for malformed rows,
    negative values, or duplicated (patient, time) pairs.
    """
    _, rows = _read_rows(path, LONGITUDINAL_HEADER, ())
    records = []
    seen: set[tuple[str, float]] = set()
    for line_no, row in rows:
        pid = row[0]
        t = _parse_float(row[1], "time_months", line_no)
        sld = _parse_float(row[2], "sld_mm", line_no)
        try:
            rec = LongitudinalRecord(pid, t, sld)
        except DataError as err:
            raise DataError(f"{path}: line {line_no}: {err}") from None
        key = (pid, t)
        if key in seen:
            raise DataError(f"{path}: line {line_no}: duplicate measurement for patient {pid!r} at {t} months")
        seen.add(key)
        records.append(rec)
    return records


def load_survival(path) -> list[SurvivalRecord]:
    """Load survival records from CSV.

    Header ``patient_id,os_time_months,event,tumour_group`` with optional
    trailing covariate columns (age_group, ecog, metastatic). The event
    column must be exactly 0 or 1.
    """
    extra, rows = _read_rows(path, SURVIVAL_HEADER, OPTIONAL_COVARIATES)
    records = []
    seen: set[str] = set()
    for line_no, row in rows:
        pid = row[0]
        if pid in seen:
            raise DataError(f"{path}: line {line_no}: duplicate patient {pid!r}")
        seen.add(pid)
        os_time = _parse_float(row[1], "os_time_months", line_no)
        if row[2] not in ("0", "1"):
            raise DataError(f"{path}: line {line_no}: event must be 0 or 1, found {row[2]!r}")
        covs = {name: value for name, value in zip(extra, row[4:]) if value}
        try:
            rec = SurvivalRecord(pid, os_time, row[2] == "1", row[3], covs)
        except DataError as err:
            raise DataError(f"{path}: line {line_no}: {err}") from None
        records.append(rec)
    return records


def join_cohort(
    longitudinal: list[LongitudinalRecord],
    survival: list[SurvivalRecord],
    tumour_groups: tuple[str, ...] | None = None,
) -> CohortDataset:
    """Join validated record lists into a :class:`CohortDataset`.

    Patient order follows the survival list; biomarker records are sorted by
    time within each patient. ``tumour_groups`` fixes the label order (first
    label = reference); by default labels are taken in order of first
    appearance in the survival records.
    """
    by_patient: dict[str, list[LongitudinalRecord]] = {}
    for rec in longitudinal:
        by_patient.setdefault(rec.patient_id, []).append(rec)

    known = {s.patient_id for s in survival}
    if len(known) != len(survival):
        raise DataError("duplicate patient_id in survival records")
    orphans = sorted(set(by_patient) - known)
    if orphans:
        raise DataError(f"biomarker records for unknown patients: {orphans}")

    labels_seen: list[str] = []
    for surv in survival:
        if surv.tumour_group not in labels_seen:
            labels_seen.append(surv.tumour_group)
    if tumour_groups is None:
        tumour_groups = tuple(labels_seen)
    else:
        tumour_groups = tuple(tumour_groups)
        missing = sorted(set(labels_seen) - set(tumour_groups))
        if missing:
            raise DataError(f"survival records use undeclared tumour groups: {missing}")

    patients = []
    for surv in survival:
        recs = by_patient.get(surv.patient_id)
        if not recs:
            raise DataError(f"patient {surv.patient_id!r} has no biomarker records")
        recs = sorted(recs, key=lambda r: r.time)
        times = [r.time for r in recs]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise DataError(f"patient {surv.patient_id!r} has duplicated biomarker times")
        if times[-1] > surv.os_time:
            raise DataError(
                f"patient {surv.patient_id!r}: biomarker time {times[-1]} months exceeds "
                f"survival time {surv.os_time} months"
            )
        patients.append((surv, tuple(recs)))

    return CohortDataset(patients=tuple(patients), tumour_groups=tumour_groups)


def kaplan_meier(survival: list[SurvivalRecord]) -> StepCurve:
    """Product-limit survival estimate.

    Ties are handled with the standard convention: at a tied time, deaths
    are processed before censorings, so censored subjects with time >= t
    count as at risk at t.
    """
    if not survival:
        raise DataError("kaplan_meier requires at least one survival record")
    times = np.array([s.os_time for s in survival])
    events = np.array([s.event for s in survival], dtype=bool)

    death_times = np.unique(times[events])
    grid = [0.0]
    surv = [1.0]
    at_risk = [times.size]
    n_events = [0]
    s = 1.0
    for t in death_times:
        n_j = int(np.sum(times >= t))
        d_j = int(np.sum(events & (times == t)))
        s *= 1.0 - d_j / n_j
        grid.append(float(t))
        surv.append(s)
        at_risk.append(n_j)
        n_events.append(d_j)

    return StepCurve(
        grid=np.array(grid),
        survival=np.array(surv),
        at_risk=np.array(at_risk),
        events=np.array(n_events),
        max_follow_up=float(times.max()),
    )


def observed_rmst(curve: StepCurve, horizon: float) -> RmstEstimate:
    """Area under the KM step curve on [0, horizon], in months.

    The 95% CI uses the standard restricted-mean variance built from
    Greenwood per-interval increments, truncated to [0, horizon]. When the
    horizon runs past follow-up while the curve is still positive, the last
    estimate is carried forward and the result is flagged as truncated.
    """
    if not (horizon > 0.0):
        raise DataError(f"horizon must be positive, got {horizon!r}")

    grid = curve.grid
    surv = curve.survival
    # Segment areas: S is constant on [t_j, t_{j+1}) and beyond the last point.
    bounds = np.append(grid, np.inf)
    seg_start = np.minimum(bounds[:-1], horizon)
    seg_end = np.minimum(bounds[1:], horizon)
    areas = surv * (seg_end - seg_start)
    point = float(np.sum(areas))

    var = 0.0
    for j in range(1, grid.size):
        if grid[j] > horizon:
            break
        d_j = curve.events[j]
        n_j = curve.at_risk[j]
        if d_j == 0 or n_j <= d_j:
            continue  # no Greenwood increment, or S hit zero (zero remaining area)
        a_j = float(np.sum(areas[j:]))  # restricted area to the right of this death time
        var += a_j * a_j * d_j / (n_j * (n_j - d_j))

    z = float(stats.norm.ppf(0.975))
    half = z * float(np.sqrt(var))
    lo = min(max(point - half, 0.0), horizon)
    hi = min(max(point + half, 0.0), horizon)
    truncated = horizon > curve.max_follow_up and curve.survival_at(curve.max_follow_up) > 0.0
    return RmstEstimate(point=point, lo=lo, hi=hi, horizon=float(horizon), truncated=truncated)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def step_curve_to_csv(curve: StepCurve, path, manifest_hash: str | None = None) -> None:
    """Write ``time_months,survival,at_risk,events`` rows (plus a provenance comment)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if manifest_hash is not None:
            fh.write(f"# manifest_hash={manifest_hash}\n")
        fh.write(",".join(STEP_CURVE_HEADER) + "\n")
        for t, s, n, d in zip(curve.grid, curve.survival, curve.at_risk, curve.events):
            fh.write(f"{_fmt(float(t))},{_fmt(float(s))},{int(n)},{int(d)}\n")


def write_longitudinal_csv(records: list[LongitudinalRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(LONGITUDINAL_HEADER) + "\n")
        for rec in records:
            fh.write(f"{rec.patient_id},{_fmt(rec.time)},{_fmt(rec.sld)}\n")


def write_survival_csv(records: list[SurvivalRecord], path) -> None:
    extra = [c for c in OPTIONAL_COVARIATES if any(c in r.covariates for r in records)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(SURVIVAL_HEADER + tuple(extra)) + "\n")
        for rec in records:
            cells = [rec.patient_id, _fmt(rec.os_time), "1" if rec.event else "0", rec.tumour_group]
            cells += [rec.covariates.get(c, "") for c in extra]
            fh.write(",".join(cells) + "\n")


def cohort_records(cohort: CohortDataset) -> tuple[list[LongitudinalRecord], list[SurvivalRecord]]:
    """Flatten a cohort back into record lists (inverse of :func:`join_cohort`)."""
    longitudinal = [rec for _, recs in cohort.patients for rec in recs]
    survival = [surv for surv, _ in cohort.patients]
    return longitudinal, survival
