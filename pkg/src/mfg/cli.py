"""Command-line front end: config parsing, study orchestration, serialization.

Exit codes: 0 success, 1 verification/assertion failure (failures listed in
the JSON report), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .bsde import solve_limit_bsde, solve_saddle_bsde
from .forward import TimeGrid, sample_brownian_bundle, simulate_conditional_mkv, simulate_n_system
from .model import ConfigError, RandomStream, config_digest, load_scenario, parse_config_text, scenario_from_dict, validate_assumptions
from .numutil import sorted_mean

__all__ = ["run_cli", "main"]

USAGE_ERROR = 2
CHECK_FAILED = 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mfg",
        description="Major player vs. collectively acting minor agents: "
        "simulation, saddle solvers and convergence studies.",
    )
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("config", help="path to the scenario config file")
        sp.add_argument("--out", dest="out_path", default=None, help="output JSON path")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )

    sp = sub.add_parser("validate", help="check the model assumptions numerically")
    common(sp)
    sp.add_argument("--probes", type=int, default=1000)

    sp = sub.add_parser("forward", help="simulate the coupled forward systems once")
    common(sp)
    sp.add_argument("--n", type=int, default=16, help="number of minor agents")

    sp = sub.add_parser("bsde", help="solve the saddle-point game BSDE")
    common(sp)
    sp.add_argument("--n", type=int, default=16)

    sp = sub.add_parser("saddle", help="solve the static saddle point at probe points")
    common(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--probes", type=int, default=5)

    sp = sub.add_parser("limit", help="solve the limit BSDE on the spatial grid")
    common(sp)

    sp = sub.add_parser("converge", help="run a convergence study")
    common(sp)
    sp.add_argument("--study", required=True, choices=sorted(experiments.STUDIES))
    sp.add_argument("--n-list", default="8,16,32,64", help="comma-separated N values")
    sp.add_argument("--reps", type=int, default=None, help="outer sample budget")

    sp = sub.add_parser("verify", help="saddle inequality and uniqueness probes")
    common(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--perturbations", type=int, default=50)
    sp.add_argument("--delta", default="0.1,0.5", help="comma-separated magnitudes")
    return p


def _load(args) -> tuple:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    values = parse_config_text(text)
    for ov in args.override:
        if "=" not in ov:
            raise ConfigError(f"--override expects KEY=VALUE, got {ov!r}")
        key, raw = (p.strip() for p in ov.split("=", 1))
        key = key.split(".")[-1]  # accept section.key spelling
        from .model import _KEY_SECTION, _parse_value

        if key not in _KEY_SECTION:
            raise ConfigError(f"--override: unknown key {key!r}")
        values[key] = _parse_value(key, raw, f"--override {ov}")
    if args.seed is not None:
        values["seed"] = args.seed
    scen = scenario_from_dict(values)
    digest = config_digest(text, sorted(args.override) + ([f"seed={args.seed}"] if args.seed is not None else []))
    return scen, digest


def _emit(args, payload: dict):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out_path:
        out = Path(args.out_path)
        if out.suffix == ".csv":
            raise ConfigError("--out expects a .json path; CSV is written alongside")
        out.write_text(text + "\n")
        if "csv_rows" in payload:
            out.with_suffix(".csv").write_text("\n".join(payload["csv_rows"]) + "\n")
    else:
        print(text)


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        scen, digest = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR

    try:
        if args.subcommand == "validate":
            report = validate_assumptions(scen, args.probes, RandomStream(scen.seed, "validate"))
            payload = {
                "ok": report.ok,
                "violations": [list(v) for v in report.violations],
                "constants": report.constants,
                "config_digest": digest,
            }
            _emit(args, payload)
            print("ok" if report.ok else "FAILED", file=sys.stderr)
            return 0 if report.ok else CHECK_FAILED

        if args.subcommand == "forward":
            grid = TimeGrid.from_scenario(scen)
            bundle = sample_brownian_bundle(
                grid, args.n, scen.mc_outer, RandomStream(scen.seed, "cli-forward")
            )
            n_paths = simulate_n_system(scen, args.n, bundle)
            cloud = simulate_conditional_mkv(
                scen, bundle.increments[:, 0, :], args.n,
                max(scen.mc_cloud, 16 * args.n),
                RandomStream(scen.seed, "cli-forward-cloud"),
                tagged_increments=bundle.increments[:, 1:, :],
            )
            stat = experiments._forward_statistic(n_paths.values, cloud)
            payload = {
                "N": args.n,
                "samples": scen.mc_outer,
                "coupling_error_mean": float(stat.mean()),
                "coupling_error_std": float(stat.std(ddof=1)),
                "x0_terminal_mean": float(n_paths.values[:, 0, -1].mean()),
                "config_digest": digest,
            }
            _emit(args, payload)
            return 0

        if args.subcommand == "bsde":
            grid = TimeGrid.from_scenario(scen)
            bundle = sample_brownian_bundle(
                grid, args.n, scen.mc_outer, RandomStream(scen.seed, "cli-bsde")
            )
            sol = solve_saddle_bsde(scen, args.n, bundle)
            payload = {
                "N": args.n,
                "y_t": sol.y_t,
                "picard_residuals": sol.diagnostics["picard_residuals"],
                "sweeps": sol.diagnostics["sweeps"],
                "u_mean": float(sol.controls_u.mean()),
                "v_mean": float(sol.controls_v.mean()),
                "config_digest": digest,
            }
            _emit(args, payload)
            return 0

        if args.subcommand == "saddle":
            from .hamiltonian import HamiltonianPoint, eval_hamiltonian_n, saddle_point_n

            rng = RandomStream(scen.seed, "cli-saddle").generator()
            eps = scen.epsilon(args.n)
            rows = []
            for _ in range(args.probes):
                p = HamiltonianPoint(
                    x=rng.uniform(-2, 2, args.n + 1), y=float(rng.uniform(-1, 1)),
                    z=rng.uniform(-1, 1, args.n + 1), n_minor=args.n, eps=eps,
                )
                sp = saddle_point_n(p, scen.model)
                rows.append(
                    {
                        "u": sp.u,
                        "v_mean": float(np.mean(sp.v)),
                        "residual_u": sp.residual_u,
                        "residual_v": sp.residual_v,
                        "h_value": eval_hamiltonian_n(p, sp.u, sp.v, scen.model),
                    }
                )
            payload = {"N": args.n, "probes": rows, "config_digest": digest}
            _emit(args, payload)
            return 0

        if args.subcommand == "limit":
            sol = solve_limit_bsde(scen)
            payload = {
                "y_t": sol.y_t,
                "nodes": len(sol.x0_nodes),
                "y_terminal_range": [float(sol.y_grid[-1].min()), float(sol.y_grid[-1].max())],
                "clamped_evaluations": sol.diagnostics["clamped_evaluations"],
                "config_digest": digest,
            }
            _emit(args, payload)
            return 0

        if args.subcommand == "converge":
            n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
            reps = args.reps if args.reps is not None else scen.mc_outer
            study_fn = experiments.STUDIES[args.study]
            try:
                report = study_fn(scen, n_list, reps)
            except ValueError as exc:
                print(f"usage error: {exc}", file=sys.stderr)
                return USAGE_ERROR
            payload = report.to_json_dict(seed=scen.seed, digest=digest)
            payload["csv_rows"] = report.to_csv_rows()
            _emit(args, payload)
            print(
                f"{args.study}: slope={report.slope:.3f} ci=({report.slope_ci[0]:.3f},"
                f"{report.slope_ci[1]:.3f}) pass={report.passed}",
                file=sys.stderr,
            )
            return 0 if report.passed else CHECK_FAILED

        if args.subcommand == "verify":
            deltas = [float(v) for v in args.delta.split(",") if v.strip()]
            result = experiments.verify_saddle_and_uniqueness(
                scen, args.n, args.perturbations, deltas
            )
            payload = {
                "ok": result.ok,
                "n_minor": result.n_minor,
                "deltas": result.deltas,
                "n_perturb": result.n_perturb,
                "tol_n_game": result.tol_n_game,
                "tol_limit_game": result.tol_limit_game,
                "violations": result.violations,
                "y_saddle_t": result.y_saddle_t,
                "y_limit_t": result.y_limit_t,
                "margins": result.margins,
                "config_digest": digest,
            }
            _emit(args, payload)
            print("ok" if result.ok else f"{len(result.violations)} violations", file=sys.stderr)
            return 0 if result.ok else CHECK_FAILED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR

    return USAGE_ERROR


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
