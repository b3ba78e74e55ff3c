"""Command-line front end.

Exit codes: 0 success, 1 bad data or configuration, 2 usage error.
Diagnostics go to stderr; machine-readable output goes to the requested files
(or stdout where noted).

Plot-data formats (whitespace separated, one header line starting with ``#``):

``<prefix>_trajectory.dat``
    ``t true_x true_y true_z prop_x prop_y prop_z est_x est_y est_z``
``<prefix>_errors.dat``
    ``t est_dx est_dy est_dz est_dnorm est_droll est_dpitch est_dyaw
    prop_dx prop_dy prop_dz prop_dnorm prop_droll prop_dpitch prop_dyaw``

Positions are meters, angles degrees, errors are estimate minus truth.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import estimator as est
from . import flow
from . import sim
from .errors import ConfigurationError, TerranavError
from .terrain import TerrainSpec, generate_synthetic_dtm, save_ascii_grid

logger = logging.getLogger("terranav")

TRAJECTORY_HEADER = ["t", "true_x", "true_y", "true_z", "prop_x", "prop_y", "prop_z",
                     "est_x", "est_y", "est_z"]
ERROR_HEADER = (["t"] + [f"est_d{c}" for c in ("x", "y", "z", "norm", "roll", "pitch", "yaw")]
                + [f"prop_d{c}" for c in ("x", "y", "z", "norm", "roll", "pitch", "yaw")])


def _add_globals(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default,
                   help="override the seed of the terrain spec or scenario")
    p.add_argument("--verbose", "-v", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)
    p.add_argument("--output", "-o", default=default,
                   help="output file (or file prefix for simulate and plot-data)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terranav",
        description="Terrain-aided visual navigation: DTM, optical flow, pose estimation, simulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-terrain", help="write a synthetic DTM as an ESRI ASCII grid")
    _add_globals(g, suppress=True)
    g.add_argument("--spec", help="terrain spec JSON (fields as in TerrainSpec)")
    g.add_argument("--kind", choices=["flat", "ramp", "sinusoidal", "fractal"])
    g.add_argument("--amplitude", type=float)
    g.add_argument("--wavelength", type=float)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--cell-size", type=float)
    g.add_argument("--origin-x", type=float)
    g.add_argument("--origin-y", type=float)
    g.add_argument("--base", type=float)
    g.add_argument("--roughness", type=float)

    t = sub.add_parser("track", help="track features through two or more PGM frames")
    _add_globals(t, suppress=True)
    t.add_argument("images", nargs="+", help="PGM frames in time order")
    t.add_argument("--seeding", choices=["grid", "corners"], default="grid")
    t.add_argument("--grid", type=int, default=17, help="grid points per side")
    t.add_argument("--margin", type=float, default=None,
                   help="grid margin in pixels (default: window radius + 2)")
    t.add_argument("--max-corners", type=int, default=300)
    t.add_argument("--min-score", type=float, default=1e-6)
    t.add_argument("--min-spacing", type=float, default=10.0)
    t.add_argument("--levels", type=int, default=4)
    t.add_argument("--radius", type=int, default=7)
    t.add_argument("--window", choices=["gaussian", "binary"], default="gaussian")
    t.add_argument("--sigma", type=float, default=3.5)
    t.add_argument("--max-iters", type=int, default=30)
    t.add_argument("--eps", type=float, default=0.01)

    e = sub.add_parser("estimate", help="estimate pose and ego-motion for one image pair")
    _add_globals(e, suppress=True)
    e.add_argument("flow_csv")
    e.add_argument("dtm")
    e.add_argument("problem_json")

    s = sub.add_parser("simulate", help="run closed-loop navigation on a scenario")
    _add_globals(s, suppress=True)
    s.add_argument("scenario")
    s.add_argument("--monte-carlo", type=int, default=0, metavar="N",
                   help="run N seeds starting at the scenario seed (or --seed)")
    s.add_argument("--propagation", choices=["ins", "constant-velocity"])
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--export-problem", type=int, metavar="EPOCH",
                   help="also export the estimation problem of this epoch")

    pd = sub.add_parser("plot-data", help="emit plot-ready trajectory and error series")
    _add_globals(pd, suppress=True)
    pd.add_argument("report_csv")
    return parser


def _out(args, default=None):
    return args.output if args.output is not None else default


# -- generate-terrain ---------------------------------------------------------

def cmd_generate_terrain(args) -> int:
    fields = {}
    if args.spec:
        try:
            fields.update(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read terrain spec {args.spec}: {exc}") from exc
    for name in ("kind", "amplitude", "wavelength", "width", "height", "cell_size",
                 "origin_x", "origin_y", "base", "roughness"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    if args.seed is not None:
        fields["seed"] = args.seed
    spec = TerrainSpec.from_dict(fields)
    out = _out(args)
    if out is None:
        raise ConfigurationError("generate-terrain needs --output")
    dtm = generate_synthetic_dtm(spec)
    save_ascii_grid(dtm, out)
    z = dtm.elevations
    print(f"{out}: {dtm.width}x{dtm.height} cells of {dtm.cell_size:g} m, "
          f"elevation {z.min():.3f} .. {z.max():.3f} m")
    return 0


# -- track --------------------------------------------------------------------

def cmd_track(args) -> int:
    if len(args.images) < 2:
        raise ConfigurationError("track needs at least two images")
    frames = [flow.read_pgm(p) for p in args.images]
    shape = frames[0].shape
    for path, f in zip(args.images, frames):
        if f.shape != shape:
            raise ConfigurationError(
                f"{path} is {f.shape[1]}x{f.shape[0]}, expected {shape[1]}x{shape[0]}")
    window = flow.KernelWindow(args.radius, args.window, args.sigma)
    config = flow.TrackerConfig(levels=args.levels, window=window,
                                max_iters=args.max_iters, eps=args.eps)
    h, w = shape
    if args.seeding == "grid":
        margin = args.margin if args.margin is not None else args.radius + 2
        seeds = flow.seed_regular_grid(w, h, args.grid, margin)
    else:
        seeds = flow.detect_corners(frames[0], window, args.max_corners, args.min_score,
                                    args.min_spacing)
        if len(seeds) == 0:
            raise ConfigurationError("no corners above --min-score")
    feats = flow.chain_tracks(frames, seeds, config)
    n_ok = sum(f.tracked for f in feats)
    out = _out(args)
    if out is None:
        flow.write_flow_csv(sys.stdout, feats)
        print(f"tracked {n_ok}, lost {len(feats) - n_ok}", file=sys.stderr)
    else:
        flow.write_flow_csv(out, feats)
        print(f"{out}: tracked {n_ok}, lost {len(feats) - n_ok}")
    return 0


# -- estimate -----------------------------------------------------------------

def cmd_estimate(args) -> int:
    problem, config, truth = est.load_problem(args.flow_csv, args.dtm, args.problem_json)
    result = est.solve(problem, config)
    doc = result.to_dict()
    doc["n_features"] = problem.n
    text = json.dumps(doc, indent=2) + "\n"
    out = _out(args)
    if out is None:
        sys.stdout.write(text)
        stream = sys.stderr
    else:
        Path(out).write_text(text)
        stream = sys.stdout
    th = result.theta
    print(f"converged={result.converged} method={result.method_used} "
          f"iterations={result.iterations} objective={result.objective:.6e}", file=stream)
    print("p1 = ({:.3f}, {:.3f}, {:.3f}) m  attitude1 = ({:.4f}, {:.4f}, {:.4f}) deg".format(
        *th[0:3], *np.degrees(th[3:6])), file=stream)
    print("p12 = ({:.3f}, {:.3f}, {:.3f}) m  attitude12 = ({:.4f}, {:.4f}, {:.4f}) deg".format(
        *th[6:9], *np.degrees(th[9:12])), file=stream)
    if truth is not None:
        dp = max(np.linalg.norm(th[0:3] - truth[0:3]), np.linalg.norm(th[6:9] - truth[6:9]))
        da = np.degrees(np.max(np.abs(th[est.ANGLE_IDX] - truth[est.ANGLE_IDX])))
        print(f"vs embedded truth: position {dp:.4f} m, angle {da:.5f} deg", file=stream)
    return 0


# -- simulate -----------------------------------------------------------------

def _run_one(config, prefix, export_epoch=None):
    exported = {}

    def on_epoch(n, problem, truth):
        if n == export_epoch:
            exported["problem"] = (problem, truth)

    report = sim.run_closed_loop(config, on_epoch=on_epoch if export_epoch is not None else None)
    sim.write_report_csv(report, f"{prefix}_report.csv")
    sim.write_tracks_csv(report, f"{prefix}_tracks.csv")
    summary = report.summary()
    summary["seed"] = config.seed
    Path(f"{prefix}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if export_epoch is not None:
        if "problem" not in exported:
            raise ConfigurationError(f"epoch {export_epoch} was not reached")
        problem, truth = exported["problem"]
        _export_problem(problem, truth, config, f"{prefix}_epoch{export_epoch}")
    return summary


def _export_problem(problem, truth, config, stem):
    flow.write_flow_csv(f"{stem}_flow.csv", problem.features)
    save_ascii_grid(problem.dtm, f"{stem}_dtm.asc")
    est.write_problem_json(f"{stem}_problem.json", problem.intrinsics, problem.initial_guess,
                           config.solver, truth)


def _run_seed(job):
    config, prefix = job
    return _run_one(config, prefix)


def _aggregate(summaries):
    out = {"n_seeds": len(summaries), "seeds": [s["seed"] for s in summaries],
           "n_nonconverged_epochs": int(sum(s["n_epochs"] - s["n_converged"] for s in summaries))}
    for key in ("vision_max_position_error_m", "vision_max_angle_error_deg",
                "propagated_max_position_error_m", "propagated_max_angle_error_deg"):
        vals = np.array([s[key] for s in summaries])
        out[key] = {"median": float(np.median(vals)), "p95": float(np.percentile(vals, 95)),
                    "max": float(vals.max())}
    return out


def cmd_simulate(args) -> int:
    config = sim.load_scenario(args.scenario)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.propagation:
        config = config.replace(propagation=args.propagation)
    prefix = _out(args, Path(args.scenario).with_suffix("").name)
    if args.monte_carlo < 0:
        raise ConfigurationError("--monte-carlo must be >= 0")
    if args.monte_carlo == 0:
        summary = _run_one(config, prefix, args.export_problem)
        print(json.dumps(summary, indent=2))
        return 0
    jobs = [(config.replace(seed=config.seed + k), f"{prefix}_seed{config.seed + k:04d}")
            for k in range(args.monte_carlo)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_run_seed, jobs))
    else:
        summaries = [_run_seed(j) for j in jobs]
    agg = _aggregate(summaries)
    agg["propagation"] = config.propagation
    Path(f"{prefix}_aggregate.json").write_text(json.dumps(agg, indent=2) + "\n")
    print(json.dumps(agg, indent=2))
    return 0


# -- plot-data ----------------------------------------------------------------

def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def cmd_plot_data(args) -> int:
    report = sim.read_report_csv(args.report_csv)
    prefix = _out(args, str(Path(args.report_csv).with_suffix("")))
    traj, errs = [], []
    for e in report.epochs:
        traj.append([e.t, *e.true_pose[:3], *e.propagated_pose[:3], *e.estimated_pose[:3]])
        edp, en, eda = e.estimated_errors
        pdp, pn, pda = e.propagated_errors
        errs.append([e.t, *edp, en, *eda, *pdp, pn, *pda])
    _write_table(f"{prefix}_trajectory.dat", TRAJECTORY_HEADER, traj)
    _write_table(f"{prefix}_errors.dat", ERROR_HEADER, errs)
    print(f"{prefix}_trajectory.dat, {prefix}_errors.dat: {len(report.epochs)} epochs")
    return 0


COMMANDS = {
    "generate-terrain": cmd_generate_terrain,
    "track": cmd_track,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TerranavError, ValueError, OSError) as exc:
        print(f"terranav {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
