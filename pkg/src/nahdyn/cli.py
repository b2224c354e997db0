"""Command-line entry point.

Subcommands:

    fit           calibrate the coupling strength against reference energies
    wigner        build one vibrational Wigner table and export it as CSV
    sample-check  sampling diagnostics (chain acceptance, occupations, moments)
    run           execute a trajectory-ensemble sweep from a run config
    converge      convergence study along one axis (N, n_trajectories, dt)
    analyze       reshape a finished run into plot-ready CSV files

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, default_model_path
from .calibrate import (
    CalibrationError,
    load_reference_csv,
    refit_gamma,
    synthetic_reference,
    write_reference_csv,
)
from .dvr import DvrError, GridSpec, morse_eigenstates
from .analysis import AnalysisError
from .ensemble import (
    RunError,
    convergence_report,
    load_run_config,
    run_sweep,
)
from .mapping import ModelContext
from .model import ModelError, fermi_occupation, load_model, save_model
from .sampling import (
    build_initial_condition,
    incident_momentum,
    metropolis_sample_wigner,
)
from .wigner import WignerError, build_wigner_table

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class CliError(Exception):
    """Validation failure mapped to exit code 2."""


def _model_arg(value):
    if value == "default":
        return str(default_model_path())
    if not Path(value).exists():
        raise CliError(f"model file not found: {value}")
    return value


def _parse_pair(text, name):
    parts = text.split(",")
    if len(parts) != 2:
        raise CliError(f"--{name} expects LO,HI")
    return float(parts[0]), float(parts[1])


def _parse_list(text, cast, name):
    try:
        return [cast(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise CliError(f"bad --{name} value {text!r}: {exc}") from None


def cmd_fit(args):
    model_file = _model_arg(args.model)
    params = load_model(model_file)
    if args.reference and args.synthetic_reference:
        raise CliError("give either --reference or --synthetic-reference")
    if args.synthetic_reference:
        table = synthetic_reference(params)
        write_reference_csv(table, args.synthetic_reference)
        print(f"wrote synthetic reference table: {args.synthetic_reference}")
        reference = table
    elif args.reference:
        if not Path(args.reference).exists():
            raise CliError(f"reference file not found: {args.reference}")
        reference = load_reference_csv(args.reference)
    else:
        raise CliError("need --reference CSV or --synthetic-reference PATH")

    bounds = _parse_pair(args.gamma_bounds, "gamma-bounds")
    band_sizes = _parse_list(args.band_sizes, int, "band-sizes")
    fit = refit_gamma(reference, params, gamma_bounds=bounds,
                      band_sizes=band_sizes)

    print(f"fitted coupling strength: {fit.gamma:.6f} eV "
          f"(rms residual {fit.rms_residual:.3e} eV, {fit.n_points} points)")
    print(f"{'N':>6} {'Gamma_eV':>12} {'rms_eV':>12}")
    for row in fit.per_band:
        print(f"{row['n']:>6} {row['gamma_eV']:>12.6f} {row['rms_eV']:>12.3e}")
    print(f"band-size curve spread: {fit.curve_spread * 1e3:.3f} meV")

    report_path = Path(args.out or (str(model_file) + ".fit.json"))
    report_path.write_text(json.dumps(fit.as_dict(), indent=2,
                                      sort_keys=True) + "\n")
    print(f"wrote fit report: {report_path}")
    if args.write_model:
        fitted = params.replace(gamma=fit.gamma)
        save_model(fitted, args.write_model)
        print(f"wrote updated model: {args.write_model}")
    return 0


def cmd_wigner(args):
    model_file = _model_arg(args.model)
    params = load_model(model_file)
    grid = GridSpec(r_min=args.r_min, r_max=args.r_max, n_points=args.points)
    states = morse_eigenstates(params, grid, n_states=args.nu + 1)
    table = build_wigner_table(states.psi[args.nu], states.r, args.nu)
    table.write_csv(args.out)
    print(f"nu={args.nu}: norm {table.norm:.9f}, "
          f"{table.w.shape[0]}x{table.w.shape[1]} table -> {args.out}")
    return 0


def cmd_sample_check(args):
    model_file = _model_arg(args.model)
    params = load_model(model_file)
    ctx = ModelContext.from_params(params)
    grid = GridSpec()
    states = morse_eigenstates(params, grid, n_states=args.nu + 1)
    table = build_wigner_table(states.psi[args.nu], states.r, args.nu)
    rng = np.random.default_rng(args.seed)

    samples, signs, info = metropolis_sample_wigner(table, args.samples, rng)
    print(f"chain acceptance {info['acceptance']:.3f} "
          f"(step scale {info['step_scale']:.4f})")
    w = table.w
    r_grid, p_grid = np.meshgrid(table.r_grid, table.p_grid, indexing="ij")
    quad_r = float((r_grid * w).sum() / w.sum())
    est_r = float((signs * samples[:, 0]).sum() / signs.sum())
    print(f"<R>: chain {est_r:.5f} A vs table {quad_r:.5f} A")

    occs = np.zeros(ctx.band.n)
    for i in range(args.samples):
        ic = build_initial_condition(samples[i], signs[i], args.energy, ctx,
                                     rng)
        occs += ic.occupations[1:]
    occs /= args.samples
    target = fermi_occupation(ctx.band.energies, params)
    worst = np.max(np.abs(occs - target)
                   / np.maximum(np.sqrt(target * (1 - target)
                                        / args.samples), 1e-12))
    print(f"occupations vs equilibrium: worst deviation {worst:.2f} sigma")
    print(f"incident momentum at {args.energy} eV: "
          f"{incident_momentum(args.energy, params):.4f} eV fs/A")
    ok = (0.2 <= info["acceptance"] <= 0.8) and worst < 5.0
    return 0 if ok else RUNTIME_ERROR


def cmd_run(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, workers=args.workers)
    if args.output is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, output_dir=args.output)
    results = run_sweep(cfg, resume=args.resume, force=args.force,
                        max_batches=args.max_batches)
    print(f"finished {len(results)}/{len(cfg.e_i_list)} cells "
          f"-> {cfg.output_dir}")
    return 0


def cmd_converge(args):
    cfg = load_run_config(args.config)
    values = _parse_list(args.values, float, "values")
    report = convergence_report(cfg, args.axis, values)
    print(f"{'axis':>6} {'from':>10} {'to':>10} {'max |dP|':>12}")
    for row in report["rows"]:
        print(f"{row['axis']:>6} {row['from']:>10g} {row['to']:>10g} "
              f"{row['max_final_state_change']:>12.4e}")
    if "ground_energy_convergence" in report:
        print("anchored ground-energy convergence:")
        for row in report["ground_energy_convergence"]:
            print(f"  N={row['n']:<6} max change "
                  f"{row['max_change_eV'] * 1e3:.3f} meV")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2,
                                             sort_keys=True) + "\n")
        print(f"wrote report: {args.out}")
    return 0


def cmd_analyze(args):
    from .analysis import export_figure_data

    if not Path(args.output_dir).is_dir():
        raise CliError(f"output directory not found: {args.output_dir}")
    written = export_figure_data(args.output_dir, dest_dir=args.figures_data)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nahdyn",
        description="Trajectory-ensemble simulator for vibrational "
                    "relaxation of a molecule scattering off a metal surface",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="calibrate the coupling strength")
    p.add_argument("--model", default="default",
                   help="model YAML ('default' for the shipped file)")
    p.add_argument("--reference", help="reference CSV "
                   "(columns R_angstrom,Z_angstrom,E_eV)")
    p.add_argument("--synthetic-reference", metavar="PATH",
                   help="generate a synthetic reference table to PATH "
                   "and fit against it")
    p.add_argument("--gamma-bounds", default="0,8",
                   help="search interval LO,HI in eV (default 0,8)")
    p.add_argument("--band-sizes", default="50,100,200",
                   help="band sizes for the convergence table")
    p.add_argument("--out", help="fit report path (default MODEL.fit.json)")
    p.add_argument("--write-model", metavar="PATH",
                   help="write the refitted model YAML here")
    p.add_argument("--seed", type=int, help="unused; accepted for symmetry")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("wigner", help="tabulate one vibrational state")
    p.add_argument("--model", default="default")
    p.add_argument("--nu", type=int, required=True,
                   help="vibrational quantum number")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--r-min", type=float, default=0.9)
    p.add_argument("--r-max", type=float, default=2.4)
    p.add_argument("--points", type=int, default=75)
    p.add_argument("--seed", type=int, help="unused; accepted for symmetry")
    p.set_defaults(func=cmd_wigner)

    p = sub.add_parser("sample-check", help="sampling diagnostics")
    p.add_argument("--model", default="default")
    p.add_argument("--nu", type=int, default=3)
    p.add_argument("--energy", type=float, default=0.5,
                   help="incident energy in eV")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(func=cmd_sample_check)

    p = sub.add_parser("run", help="run a trajectory-ensemble sweep")
    p.add_argument("--config", required=True, help="run YAML")
    p.add_argument("--resume", action="store_true",
                   help="reuse checkpoints / skip finished cells")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="override worker count")
    p.add_argument("--output", help="override output directory")
    p.add_argument("--max-batches", type=int,
                   help="stop after this many new batches (resumable)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("converge", help="convergence study")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True,
                   choices=["N", "n_trajectories", "dt"])
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("analyze", help="export plot-ready CSVs")
    p.add_argument("--output-dir", required=True,
                   help="directory of a finished run")
    p.add_argument("--figures-data",
                   help="destination (default OUTPUT_DIR/figures_data)")
    p.add_argument("--seed", type=int, help="unused; accepted for symmetry")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ModelError, RunError, DvrError, WignerError,
            AnalysisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except KeyboardInterrupt:
        return RUNTIME_ERROR
    except Exception as exc:  # runtime failures
        print(f"failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
