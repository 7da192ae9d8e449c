"""Command-line pipeline: simulate, fit, diagnose, extrapolate, km, compare.

Configuration comes from an optional YAML file layered over built-in
defaults (full-scale MCMC settings), with command-line flags taking final
precedence. Every artifact carries a manifest hash computed over the
timestamp-free run configuration, seeds, code version, and input-data
digest, so outputs are traceable and reruns are byte-identical apart from
the manifest's own timestamp.

Exit codes: 0 success, 2 input/configuration error, 3 numerical failure.
Errors are emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .data import (
    DataError,
    cohort_records,
    join_cohort,
    kaplan_meier,
    load_longitudinal,
    load_survival,
    observed_rmst,
    step_curve_to_csv,
    write_longitudinal_csv,
    write_survival_csv,
)
from .extrapolate import predict_cohort, weibull_extrapolation
from .model import JointModelSpec, ModelError, NumericalError, fit_weibull_mle
from .sampler import McmcConfig, PosteriorSamples, diagnostics_report, run_chains
from .simulate import scenario, simulate_cohort, write_truth_json

SCHEMA_VERSION = "1"

PRESETS = {
    "smoke": {"burn_in": 2000, "estimation": 5000},
    "paper": {"burn_in": 50000, "estimation": 150000},
}

DEFAULT_CONFIG: dict = {
    "data": {"longitudinal": None, "survival": None},
    "model": {
        "association": "common",
        "functional": "current_value",
        "n_quadrature": 15,
        "random_slope": True,
        "group_intercepts": False,
        "widen_slope_prior": False,
    },
    "mcmc": {
        "n_chains": 3,
        "burn_in": 50000,
        "estimation": 150000,
        "thin": 1,
        "seed": 1,
        "adapt_window": 50,
        "stream_every": 1000,
        "rhat_threshold": 1.05,
        "mcse_threshold": 0.05,
    },
    "extrapolate": {
        "horizon_months": 1200.0,
        "landmarks_months": [120.0],
        "rmst_months": [60.0, 1200.0],
        "max_draws": 4000,
        "draws_per_sample": 1,
        "n_boot": 2000,
        "seed": 0,
    },
    "km": {"horizons_months": [60.0]},
    "simulate": {"scenario": None, "seed": 1},
    "out": None,
}


# ---------------------------------------------------------------------------
# Config plumbing


# sections with a closed key set; "model" and "mcmc" keys are validated by
# their own constructors, which accept more options than the defaults list
_STRICT_SECTIONS = ("data", "extrapolate", "km", "simulate")


def _merge_section(defaults: dict, override: dict, where: str) -> dict:
    merged = dict(defaults)
    for key, value in override.items():
        if key not in defaults and where in _STRICT_SECTIONS:
            raise DataError(f"unknown config key {where}.{key}")
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge_section(merged[key], value, f"{where}.{key}")
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    """Built-in defaults layered under the YAML file at `path` (if any)."""
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise DataError(f"config file must be a mapping: {path}")
    unknown = set(user) - set(config) - {"schema_version"}
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    for section, value in user.items():
        if section == "schema_version":
            continue
        if isinstance(value, dict):
            config[section] = _merge_section(config[section], value, section)
        else:
            config[section] = value
    return config


def _apply_flags(config: dict, args) -> dict:
    if getattr(args, "out", None):
        config["out"] = args.out
    if getattr(args, "preset", None):
        config["mcmc"].update(PRESETS[args.preset])
    if getattr(args, "seed", None) is not None:
        if args.command == "simulate":
            config["simulate"]["seed"] = args.seed
        elif args.command == "extrapolate":
            config["extrapolate"]["seed"] = args.seed
        else:
            config["mcmc"]["seed"] = args.seed
    if getattr(args, "association", None):
        config["model"]["association"] = args.association
    if getattr(args, "functional", None):
        config["model"]["functional"] = args.functional
    if getattr(args, "longitudinal", None):
        config["data"]["longitudinal"] = args.longitudinal
    if getattr(args, "survival", None):
        config["data"]["survival"] = args.survival
    if getattr(args, "scenario", None):
        config["simulate"]["scenario"] = args.scenario
    if getattr(args, "horizons", None):
        config["km"]["horizons_months"] = [float(h) for h in args.horizons]
    return config


def _require_out_dir(config: dict) -> Path:
    if not config.get("out"):
        raise DataError("an output directory is required (--out or config key 'out')")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_path(value, what: str) -> Path:
    if not value:
        raise DataError(f"missing {what} (flag or config)")
    path = Path(value)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _data_hash(*paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        digest.update(Path(path).name.encode("utf-8"))
        digest.update(b"\0")
        digest.update(Path(path).read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


def make_manifest(command: str, config_snapshot: dict, seeds, data_hash: str | None):
    """Deterministic manifest hash plus the manifest document (timestamped)."""
    core = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "command": command,
        "config": config_snapshot,
        "seeds": [int(s) for s in seeds],
        "data_hash": data_hash,
    }
    canonical = json.dumps(core, sort_keys=True, separators=(",", ":"))
    manifest_hash = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    doc = dict(core)
    doc["manifest_hash"] = manifest_hash
    doc["created"] = datetime.now(timezone.utc).isoformat()
    return manifest_hash, doc


def _write_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path) -> dict:
    path = _require_path(path, "input file")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"not valid JSON: {path} ({exc})") from None


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(config: dict) -> int:
    name = config["simulate"]["scenario"]
    if not name:
        raise DataError("simulate needs a scenario (--scenario or config key simulate.scenario)")
    seed = int(config["simulate"]["seed"])
    out = _require_out_dir(config)

    design = scenario(name)
    sim = simulate_cohort(design, seed)
    snapshot = {"scenario": name, "seed": seed, "design": asdict(design)}
    manifest_hash, manifest = make_manifest("simulate", snapshot, [seed], data_hash=None)

    longitudinal, survival = cohort_records(sim.cohort)
    write_longitudinal_csv(longitudinal, out / "longitudinal.csv")
    write_survival_csv(survival, out / "survival.csv")
    write_truth_json(sim.truth, out / "truth.json", manifest_hash=manifest_hash)
    _write_json(manifest, out / "manifest.json")

    print(f"simulate {name}: {sim.cohort.n_patients} patients, "
          f"{sim.truth['n_events']} events, {sim.cohort.n_records} SLD records -> {out}")
    return 0


def _load_cohort(config: dict):
    lpath = _require_path(config["data"]["longitudinal"], "longitudinal file")
    spath = _require_path(config["data"]["survival"], "survival file")
    cohort = join_cohort(load_longitudinal(lpath), load_survival(spath))
    return cohort, lpath, spath


def cmd_fit(config: dict) -> int:
    cohort, lpath, spath = _load_cohort(config)
    spec = JointModelSpec.from_dict(config["model"])
    mcmc = McmcConfig.from_dict(config["mcmc"])
    out = _require_out_dir(config)

    data_hash = _data_hash(lpath, spath)
    snapshot = {
        "model": spec.to_dict(),
        "mcmc": mcmc.to_dict(),
        "data": {"longitudinal": str(lpath), "survival": str(spath)},
    }
    manifest_hash, manifest = make_manifest("fit", snapshot, mcmc.effective_seeds(), data_hash)

    samples = run_chains(spec, cohort, mcmc,
                         stream_path=out / "posterior.csv", manifest_hash=manifest_hash)
    report = diagnostics_report(samples, cohort=cohort, spec=spec)
    doc = report.to_dict()
    doc["manifest_hash"] = manifest_hash
    doc["data_hash"] = data_hash
    doc["association"] = spec.association
    doc["functional"] = spec.functional
    _write_json(doc, out / "diagnostics.json")
    _write_json(manifest, out / "manifest.json")

    flags = doc["flags"]
    dic_txt = "n/a" if doc["dic"] is None else f"{doc['dic']['dic']:.1f}"
    print(f"fit [{spec.association}/{spec.functional}]: {mcmc.n_chains} chains x "
          f"{mcmc.burn_in}+{mcmc.estimation} sweeps on {cohort.n_patients} patients -> {out}")
    print(f"  rhat_ok={flags['rhat_ok']} mcse_ok={flags['mcse_ok']} "
          f"dic={dic_txt} cap_events={doc['cap_events']}")
    return 0


def _load_fit(fit_dir, config: dict):
    fit_dir = _require_path(fit_dir, "fit directory")
    if not fit_dir.is_dir():
        raise DataError(f"--fit expects the fit output directory, got {fit_dir}")
    manifest = _load_json(fit_dir / "manifest.json")
    spec = JointModelSpec.from_dict(manifest["config"]["model"])
    mcmc = McmcConfig.from_dict(manifest["config"]["mcmc"])
    samples = PosteriorSamples.from_csv(fit_dir / "posterior.csv")
    samples.spec = spec
    samples.config = mcmc

    # data paths: flags/config override the ones recorded at fit time
    if not config["data"]["longitudinal"]:
        config["data"]["longitudinal"] = manifest["config"]["data"]["longitudinal"]
    if not config["data"]["survival"]:
        config["data"]["survival"] = manifest["config"]["data"]["survival"]
    cohort, lpath, spath = _load_cohort(config)
    data_hash = _data_hash(lpath, spath)
    if manifest.get("data_hash") and data_hash != manifest["data_hash"]:
        raise DataError(
            f"cohort files do not match the fitted cohort (data_hash {data_hash[:12]}... "
            f"vs manifest {manifest['data_hash'][:12]}...)")
    return manifest, spec, samples, cohort, data_hash


def cmd_diagnose(config: dict, args) -> int:
    manifest, spec, samples, cohort, data_hash = _load_fit(args.fit, config)
    report = diagnostics_report(samples, cohort=cohort, spec=spec)
    doc = report.to_dict()
    doc["manifest_hash"] = manifest["manifest_hash"]
    doc["data_hash"] = data_hash
    doc["association"] = spec.association
    doc["functional"] = spec.functional
    if config.get("out"):
        out = Path(config["out"])
        if out.is_dir() or not out.suffix:
            out.mkdir(parents=True, exist_ok=True)
            out = out / "diagnostics.json"
        _write_json(doc, out)
        print(f"diagnose: wrote {out}")
    else:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_extrapolate(config: dict, args) -> int:
    manifest, spec, samples, cohort, data_hash = _load_fit(args.fit, config)
    out = _require_out_dir(config)
    ex = config["extrapolate"]
    snapshot = {"fit_manifest": manifest["manifest_hash"], "settings": dict(ex)}
    manifest_hash, run_manifest = make_manifest("extrapolate", snapshot, [int(ex["seed"])], data_hash)

    landmarks = tuple(float(v) for v in ex["landmarks_months"])
    rmst_horizons = tuple(float(v) for v in ex["rmst_months"])
    horizon = float(ex["horizon_months"])

    joint = predict_cohort(
        samples, cohort, spec=spec, seed=int(ex["seed"]), horizon=horizon,
        max_draws=int(ex["max_draws"]), draws_per_sample=int(ex["draws_per_sample"]),
        landmarks=landmarks, rmst_horizons=rmst_horizons,
    )
    joint.write_summary_json(out / "joint_summary.json", manifest_hash=manifest_hash)
    joint.write_curves_csv(out / "joint_curves.csv", manifest_hash=manifest_hash)

    mle = fit_weibull_mle(cohort.survival_records(), tumour_groups=cohort.tumour_groups)
    comparator = weibull_extrapolation(
        mle, cohort, horizon=horizon, n_boot=int(ex["n_boot"]), seed=int(ex["seed"]),
        landmarks=landmarks, rmst_horizons=rmst_horizons,
    )
    comparator.write_summary_json(out / "weibull_summary.json", manifest_hash=manifest_hash)
    comparator.write_curves_csv(out / "weibull_curves.csv", manifest_hash=manifest_hash)
    _write_json(run_manifest, out / "manifest.json")

    ov = joint.summaries["overall"]
    print(f"extrapolate: {joint.n_draws} draws over {len(joint.summaries)} scopes -> {out}")
    print(f"  overall RMST(lifespan) {ov['rmst_lifespan']['point']:.2f} years "
          f"[{ov['rmst_lifespan']['lo95']:.2f}, {ov['rmst_lifespan']['hi95']:.2f}]")
    return 0


def cmd_km(config: dict) -> int:
    spath = _require_path(config["data"]["survival"], "survival file")
    records = load_survival(spath)
    out = _require_out_dir(config)
    horizons = [float(h) for h in config["km"]["horizons_months"]]

    data_hash = _data_hash(spath)
    snapshot = {"survival": str(spath), "horizons_months": horizons}
    manifest_hash, manifest = make_manifest("km", snapshot, [], data_hash)

    curve = kaplan_meier(records)
    step_curve_to_csv(curve, out / "km_curve.csv", manifest_hash=manifest_hash)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "manifest_hash": manifest_hash,
        "data_hash": data_hash,
        "n_patients": len(records),
        "n_events": int(sum(1 for r in records if r.event)),
        "max_follow_up_months": curve.max_follow_up,
        "rmst": {},
    }
    for h in horizons:
        est = observed_rmst(curve, h)
        doc["rmst"][f"{h:g}"] = {
            "point": est.point, "lo95": est.lo, "hi95": est.hi,
            "units": "months", "truncated": est.truncated,
        }
    _write_json(doc, out / "km_summary.json")
    _write_json(manifest, out / "manifest.json")
    print(f"km: {len(records)} patients, {doc['n_events']} events -> {out}")
    return 0


def cmd_compare(args) -> int:
    paths = args.inputs
    if len(paths) < 2:
        raise DataError("compare needs at least 2 diagnostics files")
    rows = []
    hashes = set()
    for path in paths:
        doc = _load_json(path)
        if "dic" not in doc:
            raise DataError(f"{path}: not a diagnostics file (no DIC block)")
        if not isinstance(doc["dic"], dict) or doc["dic"].get("dic") is None:
            raise DataError(f"{path}: diagnostics carry no DIC value")
        hashes.add(doc.get("data_hash"))
        rows.append({
            "path": str(path),
            "association": doc.get("association", "?"),
            "functional": doc.get("functional", "?"),
            "dic": float(doc["dic"]["dic"]),
            "dbar": doc["dic"].get("dbar"),
            "pd": doc["dic"].get("pd"),
        })
    if len(hashes) > 1:
        raise DataError("diagnostics files come from different cohorts (data_hash mismatch)")

    best = min(row["dic"] for row in rows)
    winners = [row for row in rows if row["dic"] == best]
    tie = len(winners) > 1
    for row in rows:
        row["best"] = row["dic"] == best
        row["tie"] = tie and row["best"]

    width = max(len(row["association"]) for row in rows) + 2
    print(f"{'association':<{width}}{'DIC':>12}  {'pD':>8}  ")
    for row in rows:
        marker = ""
        if row["best"]:
            marker = "  <- best fit (lowest DIC, tied)" if row["tie"] else "  <- best fit (lowest DIC)"
        pd_txt = "" if row["pd"] is None else f"{row['pd']:8.1f}"
        print(f"{row['association']:<{width}}{row['dic']:>12.1f}  {pd_txt}{marker}")

    if args.out:
        _write_json({
            "schema_version": SCHEMA_VERSION,
            "models": rows,
            "best": [row["association"] for row in winners],
            "tie": tie,
        }, args.out)
        print(f"compare: wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointsurv",
        description="Joint longitudinal-survival modelling: simulate, fit, diagnose, "
                    "extrapolate, km, compare.",
    )
    parser.add_argument("--version", action="version", version=f"jointsurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help="seed override"):
        p.add_argument("--config", help="YAML config file layered over the defaults")
        p.add_argument("--out", help="output directory (or file where noted)")
        p.add_argument("--seed", type=int, help=seed_help)

    p = sub.add_parser("simulate", help="generate a synthetic scenario cohort")
    common(p, "scenario RNG seed")
    p.add_argument("--scenario", help="scenario name (S1, S2, S3, S4)")

    p = sub.add_parser("fit", help="run the MCMC on a cohort")
    common(p, "base MCMC seed (chains use seed, seed+1, ...)")
    p.add_argument("--longitudinal", help="longitudinal CSV (patient_id,time_months,sld_mm)")
    p.add_argument("--survival", help="survival CSV (patient_id,os_months,event,tumour_group)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="MCMC scale preset")
    p.add_argument("--association", choices=["common", "exchangeable", "independent"])
    p.add_argument("--functional", choices=["current", "current_value", "slope"])

    p = sub.add_parser("diagnose", help="recompute diagnostics from a fit directory")
    common(p)
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--longitudinal", help="override the fitted longitudinal CSV path")
    p.add_argument("--survival", help="override the fitted survival CSV path")

    p = sub.add_parser("extrapolate", help="posterior-predictive and Weibull extrapolation")
    common(p, "predictive draw seed")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--longitudinal", help="override the fitted longitudinal CSV path")
    p.add_argument("--survival", help="override the fitted survival CSV path")

    p = sub.add_parser("km", help="Kaplan-Meier curve and observed RMST")
    common(p)
    p.add_argument("--survival", help="survival CSV")
    p.add_argument("--horizons", nargs="+", help="RMST horizons in months")

    p = sub.add_parser("compare", help="rank fitted models by DIC")
    p.add_argument("inputs", nargs="+", help="diagnostics JSON files (>= 2)")
    p.add_argument("--out", help="also write the comparison as JSON")

    return parser


def _dispatch(args) -> int:
    config = load_config(getattr(args, "config", None))
    config = _apply_flags(config, args)
    if args.command == "simulate":
        return cmd_simulate(config)
    if args.command == "fit":
        return cmd_fit(config)
    if args.command == "diagnose":
        return cmd_diagnose(config, args)
    if args.command == "extrapolate":
        return cmd_extrapolate(config, args)
    if args.command == "km":
        return cmd_km(config)
    if args.command == "compare":
        return cmd_compare(args)
    raise DataError(f"unknown command {args.command!r}")


def _emit_error(exc: Exception, exit_code: int) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": exit_code,
    }
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (DataError, ModelError) as exc:
        _emit_error(exc, 2)
        return 2
    except (FileNotFoundError, PermissionError, IsADirectoryError, yaml.YAMLError) as exc:
        _emit_error(exc, 2)
        return 2
    except NumericalError as exc:  # includes SamplerError
        _emit_error(exc, 3)
        return 3


if __name__ == "__main__":
    sys.exit(main())
