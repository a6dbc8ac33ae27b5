"""
Command line drivers: ``bohmvel validate | profile | sweep | sample | oracle-compare``.

Every command writes a ``manifest.json`` into ``--out`` describing the
scenario (after overrides), package versions and numerical tolerances,
together with the sha256 hash of the scenario. Every CSV written alongside
starts with a ``# manifest_sha256: <hash>`` line.

Exit codes: 0 success, 2 invalid scenario or failed check, 3 numerical
breakdown.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import checks, povm, protocol, sampler
from .scenario import (Scenario, ScenarioError, build_double_slit, load_scenario,
                       support_span)
from .wavecore import (DiscretizationError, NodeProximityError, NumericalBreakdown,
                       QuadratureError, default_window)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

PROFILE_COLUMNS = ("x_s_m", "v_e", "v_exact", "v_smeared", "J_e", "J_exact", "rho", "eps_w", "eps_s")
SWEEP_COLUMNS = ("axis1", "axis2", "eps_w_int", "eps_s_int", "eps_total_int",
                 "current_eps_w_int", "current_eps_s_int", "current_eps_total_int",
                 "excluded_fraction", "reason")
BOUNDARY_COLUMNS = ("variant", "axis2", "axis1")
ESTIMATE_COLUMNS = ("bin", "v_hat", "stderr", "count")
BOUNDARY_LEVEL = 0.01
ESTIMATE_BINS = 128

NUMERICAL_ERRORS = (NumericalBreakdown, NodeProximityError, QuadratureError, DiscretizationError,
                    sampler.SamplingError, FloatingPointError)


# ---------------------------------------------------------------------------
# manifest and output helpers
# ---------------------------------------------------------------------------

def _version(dist: str) -> str:
    try:
        return metadata.version(dist)
    except metadata.PackageNotFoundError:
        return "unknown"


def tolerances() -> dict:
    return {
        "moment_epsabs": protocol.MOMENT_EPSABS, "moment_epsrel": protocol.MOMENT_EPSREL,
        "moment_limit": protocol.MOMENT_LIMIT, "node_resolution": protocol.NODE_RESOLUTION,
        "outcome_epsabs": povm.OUTCOME_EPSABS, "outcome_epsrel": povm.OUTCOME_EPSREL,
        "sampler_table_points": sampler.TABLE_POINTS, "sampler_tail_mass": sampler.TAIL_MASS,
        "check_norm": checks.TOL_NORM, "check_ehrenfest": checks.TOL_EHRENFEST,
        "check_continuity": checks.TOL_CONTINUITY, "check_commutator": checks.TOL_COMMUTATOR,
        "check_completeness": checks.TOL_COMPLETENESS,
        "check_backend_single": checks.TOL_BACKEND_SINGLE,
        "check_backend_multi": checks.TOL_BACKEND_MULTI,
    }


def build_manifest(scenario: Scenario, command: str, **run) -> dict:
    return {
        "command": command,
        "scenario": scenario.to_dict(),
        "manifest_sha256": scenario.manifest_hash(),
        "run": run,
        "versions": {"bohmvel": _version("artifact"), "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "tolerances": tolerances(),
    }


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path: Path, columns, rows, manifest_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest_sha256: {manifest_hash}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """(manifest hash, header, rows) of a file written by ``write_csv``."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        rows = list(csv.reader(fh))
    prefix = "# manifest_sha256: "
    if not first.startswith(prefix):
        raise ValueError(f"{path} has no manifest hash line")
    return first[len(prefix):], rows[0], rows[1:]


# ---------------------------------------------------------------------------
# scenario handling
# ---------------------------------------------------------------------------

def resolve_scenario(args) -> Scenario:
    scenario = load_scenario(args.scenario) if args.scenario else build_double_slit()
    changes = {}
    if args.tau_s is not None:
        changes["tau"] = args.tau_s
    if args.sigma_w_m is not None:
        changes["sigma_w"] = args.sigma_w_m
    if args.sigma_s_m is not None:
        changes["sigma_s"] = args.sigma_s_m
    if changes:
        try:
            scenario = scenario.with_params(**changes)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
    return scenario


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def validation_checks(scenario: Scenario, grid_window_std: float = 8.0) -> list[checks.CheckResult]:
    """Invariant suite for one scenario: conservation, operator identities,
    backend agreement, detector completeness and total probability."""
    p = scenario.params
    psi0 = scenario.initial_packet()
    psi_w = scenario.state_at_weak()
    psi_s = scenario.state_at_sharp()
    t_s = scenario.snapshot_time
    out = [
        checks.norm_preservation(psi0, t_s, p),
        checks.ehrenfest_drift(psi0, t_s, p),
        checks.continuity_residual(psi0, t_s, p),
        checks.commutator_residual(psi_w, p.tau, p),
        checks.backend_equivalence(psi0, t_s, p),
        checks.field_equivalence(psi_s, p),
        checks.completeness(p.sigma_w, psi_w, "_weak"),
        checks.completeness(p.sigma_s, psi_s, "_sharp"),
        checks.grid_support(psi_s, default_window(psi_s, grid_window_std)),
        checks.total_probability_check(psi_w, p),
    ]
    return out


def _print_checks(results) -> None:
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24s} {r.value:.3e}  (tol {r.tol:.0e})  {r.detail}")


def cmd_validate(args) -> int:
    scenario = resolve_scenario(args)
    out = _out_dir(args)
    results = validation_checks(scenario, args.grid_window_std)
    regime = protocol.regime_report(scenario.state_at_weak(), scenario.params)
    _print_checks(results)
    print(f"regime: R1 = {regime.r1:.3g} ({'ok' if regime.r1_ok else 'FLAG'}), "
          f"R2 = {regime.r2:.3g} ({'ok' if regime.r2_ok else 'FLAG'}), "
          f"lambda = {regime.wavelength:.3e} m, max|v| = {regime.max_velocity:.3e} m/s")
    manifest = build_manifest(scenario, "validate", grid_window_std=args.grid_window_std)
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "validate.json", {"manifest_sha256": manifest["manifest_sha256"],
                                         "checks": [r.as_dict() for r in results],
                                         "regime": regime.as_dict()})
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def cmd_profile(args) -> int:
    scenario = resolve_scenario(args)
    out = _out_dir(args)
    n = args.n or scenario.profile_points
    t0 = time.perf_counter()
    prof = protocol.compute_profile(scenario.state_at_weak(), scenario.params, n=n)
    elapsed = time.perf_counter() - t0
    h = scenario.manifest_hash()
    write_csv(out / "profile.csv", PROFILE_COLUMNS,
              zip(prof.positions, prof.v_e, prof.v_exact, prof.v_smeared, prof.J_e,
                  prof.J_exact, prof.rho, prof.eps_w_bound, prof.eps_s_bound), h)
    summary = {}
    for quantity in ("velocity", "current"):
        for which in ("w", "s", "total", "observed"):
            e = protocol.integrated_error(prof, which, quantity)
            summary[f"{quantity}_{which}"] = e.value
        summary[f"{quantity}_excluded_fraction"] = e.excluded_fraction
    regime = protocol.regime_report(scenario.state_at_weak(), scenario.params)
    for key, val in summary.items():
        print(f"{key:<32s} {val:.4e}")
    print(f"regime R1 = {regime.r1:.3g} ({'ok' if regime.r1_ok else 'FLAG'}), "
          f"R2 = {regime.r2:.3g} ({'ok' if regime.r2_ok else 'FLAG'}); {elapsed:.1f} s")
    _write_json(out / "manifest.json", build_manifest(
        scenario, "profile", n_points=n, integrated=summary, regime=regime.as_dict(),
        elapsed_s=elapsed))
    return EXIT_OK


def _sweep_cell(scenario: Scenario, key1: str, v1: float, key2: str, v2: float, n: int) -> dict:
    names = {"sigma_w_m": "sigma_w", "sigma_s_m": "sigma_s", "tau_s": "tau"}
    try:
        sc = scenario.with_params(**{names[key1]: v1, names[key2]: v2})
        psi_ts = sc.state_at_sharp()
        x = protocol.profile_positions(psi_ts, sc.params, n)
        return protocol.integrated_bounds(psi_ts, sc.params, x)
    except (ScenarioError, ValueError) as exc:
        return {"reason": f"invalid:{exc}"}
    except NUMERICAL_ERRORS as exc:
        return {"reason": f"numerical:{type(exc).__name__}"}


def boundary_crossings(a1, values, level: float = BOUNDARY_LEVEL) -> list[float]:
    """Axis-1 positions where ``values`` crosses ``level``, interpolated in
    log-log (log axis, positive values) and skipping NaN cells."""
    a1 = np.asarray(a1, float)
    v = np.asarray(values, float)
    out = []
    for i in range(len(a1) - 1):
        y0, y1 = v[i], v[i + 1]
        if not (np.isfinite(y0) and np.isfinite(y1) and y0 > 0 and y1 > 0):
            continue
        if (y0 - level) * (y1 - level) < 0:
            f = (np.log(level) - np.log(y0)) / (np.log(y1) - np.log(y0))
            out.append(float(np.exp(np.log(a1[i]) + f * (np.log(a1[i + 1]) - np.log(a1[i])))))
    return out


def cmd_sweep(args) -> int:
    scenario = resolve_scenario(args)
    if scenario.sweep is None:
        raise ScenarioError("scenario has no sweep axes")
    out = _out_dir(args)
    ax1, ax2 = scenario.sweep
    n = args.n or 1024
    cells = [(v1, v2) for v2 in ax2.values() for v1 in ax1.values()]
    jobs = [(scenario, ax1.key, v1, ax2.key, v2, n) for v1, v2 in cells]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_cell, *zip(*jobs)))
    else:
        results = [_sweep_cell(*j) for j in jobs]
    keys = SWEEP_COLUMNS[2:-1]
    rows = []
    for (v1, v2), r in zip(cells, results):
        rows.append([v1, v2] + [r.get(k, np.nan) for k in keys] + [r.get("reason", "")])
    h = scenario.manifest_hash()
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows, h)
    brows = []
    a1 = ax1.values()
    for j, v2 in enumerate(ax2.values()):
        block = rows[j * len(a1):(j + 1) * len(a1)]
        for variant, col in (("velocity", "eps_total_int"), ("current", "current_eps_total_int")):
            vals = [r[SWEEP_COLUMNS.index(col)] for r in block]
            brows += [(variant, v2, c) for c in boundary_crossings(a1, vals)]
    write_csv(out / "boundary.csv", BOUNDARY_COLUMNS, brows, h)
    failed = sum(1 for r in results if "reason" in r)
    print(f"{len(rows)} cells, {failed} failed; {len(brows)} boundary points at "
          f"{BOUNDARY_LEVEL:.0%}")
    _write_json(out / "manifest.json", build_manifest(
        scenario, "sweep", n_points=n, axis1=ax1.__dict__, axis2=ax2.__dict__,
        failed_cells=failed))
    return EXIT_OK


def cmd_sample(args) -> int:
    scenario = resolve_scenario(args)
    out = _out_dir(args)
    p = scenario.params
    psi_w = scenario.state_at_weak()
    n = args.n or 10_000
    if args.target_eps_m_s is not None:
        target = args.target_eps_m_s
    else:
        target = 0.01 * protocol.regime_report(psi_w, p).max_velocity
    n_req = protocol.required_samples(target, p)
    print(f"required_samples for target {target:.4e} m/s: {n_req}")
    t0 = time.perf_counter()
    rec = sampler.run_ensemble(psi_w, p, n, args.seed)
    elapsed = time.perf_counter() - t0
    if args.bin_width_m is not None:
        width = args.bin_width_m
    else:
        width = support_span(scenario.state_at_sharp(), rel=protocol.PROFILE_SUPPORT_REL) / ESTIMATE_BINS
    est = sampler.estimate_profile(rec, width, p)
    h = scenario.manifest_hash()
    sampler.write_records_csv(rec, out / "records.csv", comment=f"manifest_sha256: {h}")
    write_csv(out / "estimate.csv", ESTIMATE_COLUMNS,
              zip(est.bin_centers, est.v_hat, est.stderr, est.counts), h)
    print(f"{len(rec)} runs recorded, {len(rec.failures)} failed, {len(est)} bins; {elapsed:.1f} s")
    _write_json(out / "manifest.json", build_manifest(
        scenario, "sample", n=n, seed=args.seed, bin_width_m=width, target_eps_m_s=target,
        required_samples=n_req, failures=[list(f) for f in rec.failures], elapsed_s=elapsed))
    return EXIT_OK


def cmd_oracle_compare(args) -> int:
    scenario = resolve_scenario(args)
    out = _out_dir(args)
    p = scenario.params
    psi0 = scenario.initial_packet()
    psi_w = scenario.state_at_weak()
    results = [
        checks.backend_equivalence(psi0, scenario.snapshot_time, p),
        checks.field_equivalence(scenario.state_at_sharp(), p),
        checks.joint_probability_grid(psi_w, p),
        checks.ensemble_vs_closed_form(psi_w, p),
    ]
    _print_checks(results)
    _write_json(out / "manifest.json", build_manifest(scenario, "oracle-compare"))
    _write_json(out / "oracle_compare.json", {"manifest_sha256": scenario.manifest_hash(),
                                               "checks": [r.as_dict() for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bohmvel",
        description="Bohmian velocities from two sequential position measurements.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file (default: built-in double slit)")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, default=0, help="RNG seed for sampling")
    common.add_argument("--n", type=int, default=None,
                        help="profile points, sweep points per cell, or sampled runs")
    common.add_argument("--tau-s", type=float, default=None,
                        help="override tau; the sharp-measurement time stays fixed")
    common.add_argument("--sigma-w-m", type=float, default=None, help="override sigma_w")
    common.add_argument("--sigma-s-m", type=float, default=None, help="override sigma_s")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="run the invariant suite")
    p.add_argument("--grid-window-std", type=float, default=8.0,
                   help="grid half-width in amplitude standard deviations for the support check")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("profile", parents=[common], help="velocity and current profile at t_s")
    p.set_defaults(func=cmd_profile)
    p = sub.add_parser("sweep", parents=[common], help="integrated error bounds over two axes")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("sample", parents=[common], help="Monte Carlo measurement records")
    p.add_argument("--target-eps-m-s", type=float, default=None,
                   help="target statistical error for required_samples (m/s)")
    p.add_argument("--bin-width-m", type=float, default=None, help="x_s bin width for the estimate")
    p.set_defaults(func=cmd_sample)
    p = sub.add_parser("oracle-compare", parents=[common],
                       help="closed forms against independent grid and limit-free routes")
    p.set_defaults(func=cmd_oracle_compare)
    return parser


def _fail(code: int, kind: str, exc: Exception) -> int:
    report = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(report), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.n is not None and args.n < 1:
        return _fail(EXIT_VALIDATION, "validation", ValueError("--n must be at least 1"))
    try:
        return args.func(args)
    except ScenarioError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except NUMERICAL_ERRORS as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_VALIDATION, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
