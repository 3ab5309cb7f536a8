"""Config-driven command line: committor, sample, exact, mfpt, validate.

Exit codes: 0 success, 1 usage or config error, 2 numerical or input
failure, 3 validation failure. Reports are deterministic JSON (same config
and seed give byte-identical files); wall-clock metadata goes to
run_meta.json next to them.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .acceptance import AcceptanceContext, run_all
from .committor import analytic_q, milestone_density
from .config import ConfigError, ExperimentConfig, dump_report, dump_run_meta
from .estimate import estimate_cells, estimate_kernel, estimate_long, hit_histogram
from .mfpt import mfpt_empirical, mfpt_quadrature_1d, solve_exact, solve_optimal
from .rng import RngStream

USAGE_ERROR, NUMERICAL_ERROR, VALIDATION_ERROR = 1, 2, 3


def _out_dir(cfg: ExperimentConfig, args) -> str:
    out = args.out or cfg.raw.get("output", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    if args.seed is not None:
        cfg.raw.setdefault("sampling", {})["seed"] = int(args.seed)
    if args.workers is not None:
        cfg.raw.setdefault("sampling", {})["workers"] = int(args.workers)


def _sample_stats(cfg: ExperimentConfig, mset, rng):
    sampling = cfg.raw["sampling"]
    mode = sampling.get("mode", "long")
    model = cfg.model()
    if mode == "long":
        total_time = float(sampling.get("total_time", 1000.0))
        initial = sampling.get("initial")
        return estimate_long(model, mset, total_time=total_time, dt=cfg.dt,
                             rng=rng, initial=initial)
    if mode == "cells":
        per_cell = int(sampling.get("per_cell_transitions", 1000))
        return estimate_cells(model, mset, per_cell_transitions=per_cell,
                              dt=cfg.dt, rng=rng,
                              burn_in_events=int(sampling.get("burn_in_events", 100)),
                              workers=cfg.workers)
    raise ConfigError(f"unknown sampling mode '{mode}'")


def _write_hits(out, stats, mset, meshes):
    for i in range(mset.n):
        pos = np.atleast_2d(stats.hit_positions[i])
        if len(pos) == 0:
            continue
        if meshes is not None and meshes[i].dim == 2:
            arcs = meshes[i].project_arc(pos)
        else:
            arcs = np.zeros(len(pos))
        w = np.full(len(pos), 1.0 / len(pos))
        np.savetxt(os.path.join(out, f"hits_{i}.csv"),
                   np.column_stack([arcs, w]), delimiter=",",
                   header="arclength,weight", comments="")


def cmd_committor(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    mset, meshes, fld = cfg.milestones()
    if fld is None:
        raise ConfigError("the committor command needs milestones.source = 'committor'")
    model = cfg.model()
    rho = fld.rho
    fld.to_binary(os.path.join(out, "q_minus.bin"))
    fld.to_csv(os.path.join(out, "q_minus.csv"))
    from .committor import surface_integral_Z

    z_rows = []
    for i, mesh in enumerate(meshes):
        z_rows.append((mset.levels[i], surface_integral_Z(model, rho, fld, mesh)))
        dens = milestone_density(model, rho, fld, mesh)
        np.savetxt(os.path.join(out, f"rho_{i}.csv"),
                   np.column_stack([mesh.arclength, dens.values]),
                   delimiter=",", header="arclength,density", comments="")
        np.savetxt(os.path.join(out, f"mesh_{i}.csv"),
                   np.column_stack([mesh.points, mesh.normals]), delimiter=",",
                   header=",".join([f"x{k+1}" for k in range(mesh.dim)]
                                   + [f"n{k+1}" for k in range(mesh.dim)]),
                   comments="")
    np.savetxt(os.path.join(out, "Z.csv"), np.asarray(z_rows), delimiter=",",
               header="level,Z", comments="")
    dump_report(os.path.join(out, "committor_report.json"),
                {"residual": fld.residual, "overshoot": fld.overshoot,
                 "levels": [float(z) for z in mset.levels],
                 "Z": [z for _, z in z_rows],
                 "seed": cfg.seed},
                cfg.raw)
    dump_run_meta(os.path.join(out, "run_meta.json"))
    return 0


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    mset, meshes, _ = cfg.milestones()
    rng = RngStream(cfg.seed, 0)
    stats = _sample_stats(cfg, mset, rng)
    floor = int(cfg.raw["sampling"].get("min_transitions", 100))
    low = np.nonzero(stats.departures < floor)[0]
    dump_report(os.path.join(out, "stats.json"),
                {"stats": stats.to_dict(), "seed": cfg.seed, "dt": cfg.dt},
                cfg.raw)
    _write_hits(out, stats, mset, meshes)
    dump_run_meta(os.path.join(out, "run_meta.json"))
    if low.size and not args.force:
        print(f"undersampled milestones {low.tolist()}: fewer than {floor} "
              f"transitions (use --force to accept)", file=sys.stderr)
        return NUMERICAL_ERROR
    return 0


def cmd_exact(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    mset, meshes, _ = cfg.milestones()
    if meshes is None:
        raise ConfigError("exact milestoning needs milestones.source = 'committor'")
    model = cfg.model()
    kcfg = cfg.raw.get("kernel", {})
    rng = RngStream(cfg.seed, 0)
    kern = estimate_kernel(model, mset, meshes,
                           samples_per_bin=int(kcfg.get("samples_per_bin", 300)),
                           dt=cfg.dt, rng=rng,
                           bins=kcfg.get("bins"),
                           max_time=float(kcfg.get("max_time", np.inf)))
    target = int(cfg.raw.get("target", {}).get("j", mset.n - 1))
    fld, sol = solve_exact(kern, target)
    offsets = kern.global_offsets()
    for i in range(mset.n):
        rows = []
        nb = kern.bins_per_milestone[i]
        for b in range(nb):
            for col in np.nonzero(kern.nu[i][b] > 0)[0]:
                j = int(np.searchsorted(offsets, col, side="right") - 1)
                rows.append((b, j, int(col - offsets[j]), kern.nu[i][b, col],
                             kern.tau[i][b]))
        if rows:
            np.savetxt(os.path.join(out, f"kernel_{i}.csv"), np.asarray(rows),
                       delimiter=",",
                       header="bin,target_index,target_bin,probability,mean_time",
                       comments="")
    dump_report(os.path.join(out, "exact_report.json"),
                {"target": target,
                 "values": [float(v) for v in sol.values],
                 "residual": sol.residual,
                 "censored_fraction": kern.censored_fraction,
                 "field": {str(i): [float(v) for v in fld.values[i]]
                           for i in range(mset.n)},
                 "seed": cfg.seed, "dt": cfg.dt},
                cfg.raw)
    dump_run_meta(os.path.join(out, "run_meta.json"))
    return 0


def cmd_mfpt(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    mset, meshes, fld = cfg.milestones()
    model = cfg.model()
    target_cfg = cfg.raw.get("target", {})
    i = int(target_cfg.get("i", 0))
    j = int(target_cfg.get("j", mset.n - 1))
    mcfg = cfg.raw.get("mfpt", {})
    methods = mcfg.get("methods", ["optimal"])
    report = {"source": i, "target": j, "seed": cfg.seed, "dt": cfg.dt,
              "methods": {}}
    rng = RngStream(cfg.seed, 0)
    for method in methods:
        if method == "optimal":
            stats = _sample_stats(cfg, mset, rng)
            p = analytic_q(mset.levels) if mcfg.get("use_analytic_q") \
                else stats.p_hat()
            sol = solve_optimal(p, stats.t_hat(), j,
                                t_stderr=stats.t_stderr())
            entry = {"value": float(sol.values[i]),
                     "stderr": float(sol.stderr[i]) if sol.stderr is not None else None}
        elif method == "exact":
            if meshes is None:
                print("method 'exact' needs committor milestones", file=sys.stderr)
                return NUMERICAL_ERROR
            kcfg = cfg.raw.get("kernel", {})
            kern = estimate_kernel(model, mset, meshes,
                                   samples_per_bin=int(kcfg.get("samples_per_bin", 300)),
                                   dt=cfg.dt, rng=rng, bins=kcfg.get("bins"))
            _, sol = solve_exact(kern, j)
            entry = {"value": float(sol.values[i]), "stderr": None}
        elif method == "empirical":
            pair = mset.restrict([min(i, j), max(i, j)])
            emp = mfpt_empirical(model, pair,
                                 n_transitions=int(mcfg.get("n_transitions", 2000)),
                                 dt=cfg.dt, rng=rng,
                                 source=0 if i < j else 1)
            entry = {"value": emp.value, "stderr": emp.stderr}
        elif method == "oracle":
            if model.dim != 1 or not model.reversible:
                print("method 'oracle' needs a 1D reversible model",
                      file=sys.stderr)
                return NUMERICAL_ERROR
            xi = float(mset.point_on(i)[0])
            xj = float(mset.point_on(j)[0])
            entry = {"value": mfpt_quadrature_1d(model, xi, xj), "stderr": None}
        else:
            raise ConfigError(f"unknown mfpt method '{method}'")
        report["methods"][method] = entry
    names = list(report["methods"])
    zs = {}
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            ma, mb = report["methods"][names[a]], report["methods"][names[b]]
            se = np.hypot(ma["stderr"] or 0.0, mb["stderr"] or 0.0)
            zs[f"{names[a]}_vs_{names[b]}"] = \
                float((ma["value"] - mb["value"]) / se) if se > 0 else None
    report["z_scores"] = zs
    dump_report(os.path.join(out, "mfpt_report.json"), report, cfg.raw)
    dump_run_meta(os.path.join(out, "run_meta.json"))
    return 0


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    vcfg = cfg.raw.get("validate", {})
    ctx = AcceptanceContext(seed=cfg.seed, scale=float(vcfg.get("scale", 1.0)),
                            workers=cfg.workers)
    results = run_all(ctx, cids=vcfg.get("criteria"))
    dump_report(os.path.join(out, "validate_report.json"),
                {"results": {r.cid: {"passed": r.passed, "title": r.title,
                                     "details": r.details}
                             for r in results},
                 "seed": cfg.seed},
                cfg.raw)
    dump_run_meta(os.path.join(out, "run_meta.json"))
    failed = [r.cid for r in results if not r.passed]
    if failed:
        print(f"failed criteria: {', '.join(failed)}", file=sys.stderr)
        return VALIDATION_ERROR
    return 0


COMMANDS = {"committor": cmd_committor, "sample": cmd_sample,
            "exact": cmd_exact, "mfpt": cmd_mfpt, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milestone-kit",
        description="Milestoning for elliptic diffusions: committor-based "
                    "milestones, kinetics estimators, and exact passage times.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("committor", "solve the committor problem and export milestones"),
            ("sample", "estimate transition statistics (long or cells mode)"),
            ("exact", "estimate the hit kernel and solve the exact equation"),
            ("mfpt", "compute passage times by the configured methods"),
            ("validate", "run the acceptance criteria")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("-c", "--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override sampling.seed")
        p.add_argument("--workers", type=int, default=None, help="worker pool size")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="accept undersampled estimates")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        cfg = ExperimentConfig.from_file(args.config)
        _apply_overrides(cfg, args)
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
