"""Command-line pipeline: offline training, online solves, comparisons.

Six subcommands cover the full workflow: ``make-reference`` emits the
built-in rotor-in-housing scenario, ``train`` builds a component library
from a manifest, ``solve`` and ``oracle`` produce reduced-order and
monolithic solutions of a system at one angle, ``compare`` scores two
solution directories against each other, and ``sweep`` runs the whole
solve/oracle/compare loop over an angle list with a timing summary.

Angles are degrees everywhere and are normalized into [-180, 180] (with a
warning) when given outside that range.  Exit codes: 0 success, 2 invalid
input, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import NumericalError, TrainingError, ValidationError
from .fem import von_mises
from .library import load_library, load_training_manifest, save_library, train_library
from .oracle import oracle_solve, re_max, rrmse
from .reference import make_reference
from .synthesis import SystemSolver, load_system_config
from .vtkio import read_vtk, write_vtk

log = logging.getLogger("apcms")

METRICS_HEADER = ("theta", "rrmse", "re_max", "n_sc", "fe_dofs",
                  "buffer_s", "bubble_s", "solve_s", "total_s")
SUMMARY_HEADER = ("points", "rom_total_mean_s", "oracle_total_mean_s",
                  "speedup", "rrmse_worst", "re_max_worst", "n_sc", "fe_dofs")
SOLUTION_FILE = "solution.vtk"
METRICS_FILE = "metrics.csv"


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def normalize_theta(theta: float) -> float:
    """Map an angle into [-180, 180] degrees, warning when it moves."""
    theta = float(theta)
    if -180.0 <= theta <= 180.0:
        return theta
    wrapped = (theta + 180.0) % 360.0 - 180.0
    log.warning("theta %g is outside [-180, 180]; using %g", theta, wrapped)
    return wrapped


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def _write_csv(path: Path, header: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row.get(key)) for key in header])


def _read_metrics(path: Path) -> dict:
    """First data row of a metrics file ({} when the file is absent)."""
    if not path.is_file():
        return {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            return {k: v for k, v in row.items() if v not in (None, "")}
    return {}


def _write_solution(out_dir: Path, mesh, displacement, materials, row: dict,
                    title: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    vm = von_mises(mesh, displacement, materials)
    write_vtk(out_dir / SOLUTION_FILE, mesh, displacement, vm, title=title)
    _write_csv(out_dir / METRICS_FILE, METRICS_HEADER, [row])


def _compare_fields(a: dict, b: dict) -> tuple[float, float]:
    """Von Mises RRMSE and peak error of A against reference B.

    Both solutions must live on the identical merged mesh; element-wise
    comparison is only meaningful cell for cell.
    """
    if a["triangles"].shape != b["triangles"].shape or not np.array_equal(
        a["triangles"], b["triangles"]
    ):
        raise ValidationError("solutions use different meshes (triangles differ)")
    if np.abs(a["nodes"] - b["nodes"]).max() > 1e-9:
        raise ValidationError("solutions use different meshes (nodes differ)")
    return rrmse(a["von_mises"], b["von_mises"]), re_max(a["von_mises"], b["von_mises"])


def _merge_rows(primary: dict, secondary: dict) -> dict:
    """Combine two metrics rows, the primary one winning where both fill."""
    out = dict(secondary)
    out.update({k: v for k, v in primary.items() if v not in (None, "")})
    return out


def _port_modes_arg(value: str):
    if value == "full":
        return None
    try:
        count = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--port-modes must be 'full' or a positive integer, got {value!r}"
        ) from None
    if count < 1:
        raise argparse.ArgumentTypeError("--port-modes must be >= 1")
    return count


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = load_training_manifest(args.manifest)
    if args.seed is not None:
        log.info("seed %d noted; the training pipeline is deterministic", args.seed)
    t0 = time.perf_counter()
    library = train_library(
        manifest, rb_tol=args.rb_tol, rb_nmax=args.rb_nmax, skip_rb=args.skip_rb
    )
    save_library(library, args.out)
    print(f"trained {len(library)} archetypes in {time.perf_counter() - t0:.1f}s "
          f"-> {args.out}")
    return 0


def cmd_solve(args) -> int:
    library = load_library(args.library)
    config = load_system_config(args.system)
    theta = normalize_theta(args.theta)
    solver = SystemSolver(
        library, config, port_modes=args.port_modes, bubbles=args.bubbles
    )
    solution = solver.solve(theta)
    row = {
        "theta": theta,
        "n_sc": solution.n_sc,
        "fe_dofs": solution.mesh.num_dofs,
        **solution.timings,
    }
    _write_solution(Path(args.out), solution.mesh, solution.displacement,
                    solution.materials, row, title=f"rom theta={theta:g}")
    print(f"theta {theta:g}: n_sc={solution.n_sc} fe_dofs={solution.mesh.num_dofs} "
          f"total={solution.timings['total_s']:.3f}s -> {args.out}/{SOLUTION_FILE}")
    return 0


def cmd_oracle(args) -> int:
    library = load_library(args.library)
    config = load_system_config(args.system)
    theta = normalize_theta(args.theta)
    oracle = oracle_solve(library, config, theta)
    row = {
        "theta": theta,
        "fe_dofs": oracle.n_dofs,
        "solve_s": oracle.timings["solve_s"],
        "total_s": oracle.timings["total_s"],
    }
    _write_solution(Path(args.out), oracle.mesh, oracle.displacement,
                    oracle.materials, row, title=f"oracle theta={theta:g}")
    print(f"theta {theta:g}: fe_dofs={oracle.n_dofs} "
          f"total={oracle.timings['total_s']:.3f}s -> {args.out}/{SOLUTION_FILE}")
    return 0


def cmd_compare(args) -> int:
    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    a = read_vtk(dir_a / SOLUTION_FILE)
    b = read_vtk(dir_b / SOLUTION_FILE)
    err_rms, err_peak = _compare_fields(a, b)
    row = _merge_rows(_read_metrics(dir_a / METRICS_FILE),
                      _read_metrics(dir_b / METRICS_FILE))
    row["rrmse"] = err_rms
    row["re_max"] = err_peak
    if args.out is not None:
        out = Path(args.out)
        if out.suffix != ".csv":
            out.mkdir(parents=True, exist_ok=True)
            out = out / METRICS_FILE
        _write_csv(out, METRICS_HEADER, [row])
    print(f"rrmse={err_rms:.6e} re_max={err_peak:.6e}")
    return 0


def cmd_sweep(args) -> int:
    library = load_library(args.library)
    config = load_system_config(args.system)
    try:
        thetas = [normalize_theta(float(t))
                  for t in args.theta_list.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(
            f"--theta-list must be comma-separated angles, got {args.theta_list!r}"
        ) from None
    if not thetas:
        raise ValidationError("--theta-list names no angles")
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)

    def run_point(theta: float) -> dict:
        sub = root / f"theta_{theta:g}"
        solver = SystemSolver(
            library, config, port_modes=args.port_modes, bubbles=args.bubbles
        )
        solution = solver.solve(theta)
        rom_row = {
            "theta": theta,
            "n_sc": solution.n_sc,
            "fe_dofs": solution.mesh.num_dofs,
            **solution.timings,
        }
        vm_rom = von_mises(solution.mesh, solution.displacement, solution.materials)
        _write_solution(sub / "rom", solution.mesh, solution.displacement,
                        solution.materials, rom_row, title=f"rom theta={theta:g}")

        oracle = oracle_solve(library, config, theta)
        oracle_row = {
            "theta": theta,
            "fe_dofs": oracle.n_dofs,
            "solve_s": oracle.timings["solve_s"],
            "total_s": oracle.timings["total_s"],
        }
        vm_ora = von_mises(oracle.mesh, oracle.displacement, oracle.materials)
        _write_solution(sub / "oracle", oracle.mesh, oracle.displacement,
                        oracle.materials, oracle_row, title=f"oracle theta={theta:g}")

        err_rms, err_peak = _compare_fields(
            {"nodes": solution.mesh.nodes, "triangles": solution.mesh.triangles,
             "von_mises": vm_rom},
            {"nodes": oracle.mesh.nodes, "triangles": oracle.mesh.triangles,
             "von_mises": vm_ora},
        )
        row = dict(rom_row)
        row["rrmse"] = err_rms
        row["re_max"] = err_peak
        row["oracle_total_s"] = oracle.timings["total_s"]
        _write_csv(sub / METRICS_FILE, METRICS_HEADER, [row])
        return row

    if args.jobs == 1:
        rows = [run_point(t) for t in thetas]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_point, thetas))

    _write_csv(root / METRICS_FILE, METRICS_HEADER, rows)
    rom_mean = float(np.mean([r["total_s"] for r in rows]))
    oracle_mean = float(np.mean([r["oracle_total_s"] for r in rows]))
    summary = {
        "points": len(rows),
        "rom_total_mean_s": rom_mean,
        "oracle_total_mean_s": oracle_mean,
        "speedup": oracle_mean / rom_mean,
        "rrmse_worst": max(r["rrmse"] for r in rows),
        "re_max_worst": max(r["re_max"] for r in rows),
        "n_sc": rows[0]["n_sc"],
        "fe_dofs": rows[0]["fe_dofs"],
    }
    _write_csv(root / "summary.csv", SUMMARY_HEADER, [summary])
    for row in rows:
        print(f"theta {row['theta']:g}: rrmse={row['rrmse']:.3e} "
              f"re_max={row['re_max']:.3e} rom={row['total_s']:.3f}s "
              f"oracle={row['oracle_total_s']:.3f}s")
    print(f"speed-up {summary['speedup']:.1f}x over {len(rows)} angles "
          f"-> {root / 'summary.csv'}")
    return 0


def cmd_make_reference(args) -> int:
    paths = make_reference(args.out, refine=args.refine)
    print(f"reference scenario (refine {args.refine}) -> {args.out}")
    for key in sorted(paths):
        print(f"  {key}: {paths[key]}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apcms",
        description="Component-based reduced-order solver for 2D elasticity "
                    "with rotating sub-assemblies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a component library from a manifest")
    train.add_argument("--manifest", required=True, help="training manifest JSON")
    train.add_argument("--out", required=True, help="library output directory")
    train.add_argument("--rb-tol", type=float, default=None,
                       help="greedy tolerance override for reduced bubbles")
    train.add_argument("--rb-nmax", type=int, default=None,
                       help="cap on reduced-basis size per target")
    train.add_argument("--skip-rb", action="store_true",
                       help="train port modes and extensions only")
    train.add_argument("--seed", type=int, default=None,
                       help="accepted for reproducibility; training is deterministic")
    train.set_defaults(func=cmd_train)

    def solver_flags(p, oracle=False):
        p.add_argument("--library", required=True, help="trained library directory")
        p.add_argument("--system", required=True, help="system configuration JSON")
        p.add_argument("--out", required=True, help="output directory")
        if not oracle:
            p.add_argument("--port-modes", type=_port_modes_arg, default=None,
                           metavar="full|N",
                           help="cap every port at its first N trained modes")
            p.add_argument("--bubbles", choices=("rb", "fe"), default="rb",
                           help="reduced-basis or full-order interior corrections")

    solve = sub.add_parser("solve", help="reduced-order solve at one angle")
    solver_flags(solve)
    solve.add_argument("--theta", type=float, required=True, help="angle in degrees")
    solve.set_defaults(func=cmd_solve)

    oracle = sub.add_parser("oracle", help="monolithic full-order solve at one angle")
    solver_flags(oracle, oracle=True)
    oracle.add_argument("--theta", type=float, required=True, help="angle in degrees")
    oracle.set_defaults(func=cmd_oracle)

    compare = sub.add_parser(
        "compare", help="score solution directory A against reference directory B"
    )
    compare.add_argument("dir_a", help="solution directory being scored")
    compare.add_argument("dir_b", help="reference solution directory")
    compare.add_argument("--out", default=None,
                         help="metrics CSV (file ending in .csv, or a directory)")
    compare.set_defaults(func=cmd_compare)

    sweep = sub.add_parser(
        "sweep", help="solve + oracle + compare over a list of angles"
    )
    solver_flags(sweep)
    sweep.add_argument("--theta-list", required=True,
                       help="comma-separated angles in degrees")
    sweep.add_argument("--jobs", type=int, default=1,
                       help="concurrent sweep points (timings are only "
                            "meaningful with --jobs 1)")
    sweep.set_defaults(func=cmd_sweep)

    ref = sub.add_parser(
        "make-reference", help="emit the built-in rotor-in-housing scenario"
    )
    ref.add_argument("--out", required=True, help="scenario output directory")
    ref.add_argument("--refine", type=int, default=1,
                     help="uniform refinement level of the reference meshes")
    ref.set_defaults(func=cmd_make_reference)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 2
    except (NumericalError, TrainingError) as exc:
        log.error("%s", exc)
        return 3
    except (OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
