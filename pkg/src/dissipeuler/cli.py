"""Command-line entry point: experiment orchestration and reporting.

Subcommands mirror the experiment kinds::

    dissipeuler simulate   --config cfg.json --out DIR [--seed N] [--threads N]
    dissipeuler vanish     --config cfg.json --out DIR ...
    dissipeuler ym         --config cfg.json --out DIR ...
    dissipeuler martingale --config cfg.json --out DIR ...
    dissipeuler weakstrong --config cfg.json --out DIR ...
    dissipeuler report     --dir  DIR

Every run writes an append-only artifact directory (echoed config, CSV
traces, JSON reports, field snapshots) sealed by a SHA-256 manifest.  Jobs
for distinct (viscosity, path) pairs run on a thread pool; results are
reduced in fixed key order so the artifact bytes never depend on the
worker count.  Exit status is 0 iff every enabled audit passed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .forcing import WienerPath
from .limits import (
    MartingaleStat,
    ViscosityLadder,
    energy_inequality_limit,
    linear_model_functionals_multi,
    martingale_test,
    momentum_residual,
    run_ladder,
    solver_functionals_multi,
)
from .manifest import RunDirectory
from .reporting import all_passed, audit_row, render_report
from .solver import BlowUpError, apriori_moment_report, run_path
from .spectral import SpectralField, TorusGrid, kinetic_energy, write_field
from .weakstrong import weak_strong_ladder
from .young import (
    CellPartition,
    TestIntegrand,
    barycenter,
    dirac_embed,
    measure_to_dict,
    pairing,
)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        try:
            text = render_report(args.dir)
        except Exception as err:  # missing manifest or artifacts
            print(f"error: {err}", file=sys.stderr)
            return 2
        print(text)
        return 0 if text.endswith("overall: PASS") else 1
    try:
        cfg = load_config(args.config, args.command)
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = _override_seed(cfg, args.seed)
    out_dir = args.out if args.out is not None else f"runs/{args.command}"
    try:
        out = RunDirectory(out_dir)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    from pathlib import Path
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw.setdefault("ensemble", {})["seed"] = args.seed
    out.write_text("config.echo.json", json.dumps(raw, sort_keys=True, indent=2) + "\n")

    runner = {
        "simulate": _run_simulate,
        "vanish": _run_vanish,
        "ym": _run_ym,
        "martingale": _run_martingale,
        "weakstrong": _run_weakstrong,
    }[args.command]
    rows = runner(cfg, out, max(1, args.threads))
    out.finalize()
    print(render_report(out.root))
    return 0 if all_passed(rows) else 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dissipeuler",
        description="spectral experiments for stochastically forced "
                    "incompressible flow on the torus")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "vanish", "ym", "martingale", "weakstrong"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None,
                       help="artifact directory (default runs/<experiment>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
    rep = sub.add_parser("report")
    rep.add_argument("--dir", required=True)
    return parser


def _override_seed(cfg: RunConfig, seed: int) -> RunConfig:
    from dataclasses import replace
    return replace(cfg, seed=seed)


def _run_jobs(jobs, threads):
    """jobs: list of (key, fn); returns {key: fn()} reduced in key order."""
    if threads <= 1:
        return {key: fn() for key, fn in jobs}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [(key, pool.submit(fn)) for key, fn in jobs]
        return {key: fut.result() for key, fut in futures}


def _snapshot_times(cfg: RunConfig):
    # mid-slab samples for the measure plus both endpoints for drift terms
    part_dur = cfg.horizon / cfg.young.time_cells
    out = {0.0, round(cfg.horizon / cfg.dt) * cfg.dt}
    for s in range(cfg.young.time_cells):
        lo = s * part_dur
        for j in range(cfg.young.snapshots_per_slab):
            frac = (j + 0.5) / cfg.young.snapshots_per_slab
            out.add(round((lo + frac * part_dur) / cfg.dt) * cfg.dt)
    return sorted(out)


def _partition(cfg: RunConfig) -> CellPartition:
    return CellPartition(cfg.grid.dim, cfg.grid.n, cfg.young.time_cells,
                         cfg.young.space_cells, 0.0, cfg.horizon)


def _test_fields(grid):
    """Two fixed divergence-free low-mode test functions.

    Parities are chosen to overlap the default forcing modes so the
    stochastic pairings <Phi e_k, phi> are nontrivial.
    """
    d1 = np.zeros(grid.dim, dtype=complex)
    d1[0] = 0.5 / 1j          # sin(k1 . x) e_1
    d2 = np.zeros(grid.dim, dtype=complex)
    d2[1] = 0.5               # cos(k2 . x) e_2
    k1 = (0, 1) if grid.dim == 2 else (0, 1, 0)
    k2 = (1, 0) if grid.dim == 2 else (1, 0, 0)
    return [("phi1", SpectralField.from_modes(grid, {k1: d1})),
            ("phi2", SpectralField.from_modes(grid, {k2: d2}))]


# -- simulate ----------------------------------------------------------------


def _run_simulate(cfg: RunConfig, out: RunDirectory, threads: int):
    eps = cfg.eps_values[0]
    scfg = cfg.solver_config(eps)

    def one(pid):
        try:
            return run_path(scfg, cfg.seed, pid, snapshot_times=[]), None
        except BlowUpError as err:
            return None, err

    results = _run_jobs([(pid, lambda pid=pid: one(pid))
                         for pid in range(cfg.paths)], threads)
    rows = []
    for pid in sorted(results):
        run, err = results[pid]
        tag = f"eps{eps:g}_path{pid:04d}"
        if err is not None:
            if err.partial is not None:
                err.partial.write_csv(out.path(f"traces/{tag}.csv"))
            rows.append(audit_row(
                f"energy_defect_{tag}", "ns_solver.energy_audit", False,
                float("inf"), 0.0, f"blow-up: {err}"))
            continue
        run.trace.write_csv(out.path(f"traces/{tag}.csv"))
        write_field(out.path(f"fields/final_{tag}.field"), run.final,
                    cfg.horizon)
        tol = run.trace.tolerance(cfg.tolerances.energy_defect_c)
        val = run.trace.max_positive_defect()
        rows.append(audit_row(f"energy_defect_{tag}", "ns_solver.energy_audit",
                              val <= tol, val, tol))
    out.write_json("reports/simulate.json",
                   {"experiment": "simulate", "seed": cfg.seed, "rows": rows})
    return rows


# -- vanish ------------------------------------------------------------------


def _run_vanish(cfg: RunConfig, out: RunDirectory, threads: int):
    part = _partition(cfg)
    snaps = _snapshot_times(cfg)
    base = cfg.solver_config(cfg.eps_values[0])
    ladder = ViscosityLadder(cfg.eps_values, base, cfg.seed,
                             tuple(range(cfg.paths)))

    res = run_ladder(ladder, part, cfg.young.radius, snapshot_times=snaps,
                     bins_per_axis=cfg.young.bins_per_axis,
                     sphere_bins=cfg.young.sphere_bins, threads=threads)

    rows = []
    for eps in cfg.eps_values:
        for pid, run in enumerate(res.runs.get(eps, [])):
            run.trace.write_csv(out.path(f"traces/eps{eps:g}_path{pid:04d}.csv"))

    for eps, V in res.measures.items():
        out.write_json(f"measures/eps{eps:g}.json", measure_to_dict(V))
    out.write_json("measures/family.json", measure_to_dict(res.family))

    d = res.cauchy_distances
    worst_rise = max((b - a for a, b in zip(d, d[1:])), default=-min(d) if d else 0.0)
    rows.append(audit_row(
        "cauchy_distance_decreasing", "limit_verifier.run_ladder",
        worst_rise <= 0.0 if cfg.tolerances.cauchy_strict else True,
        worst_rise, 0.0, f"distances={['%.5g' % x for x in d]}"))

    usable = [eps for eps in cfg.eps_values if eps in res.measures]
    tail = usable[len(usable) // 2:]
    traces = [r.trace for eps in tail for r in res.runs[eps]]
    finest = res.runs[usable[-1]][0]
    tol = finest.trace.tolerance(cfg.tolerances.energy_defect_c)
    limit_rep = energy_inequality_limit(res.family, traces, cfg.forcing, tol)
    out.write_json("details/energy_limit.json", limit_rep)
    rows.append(audit_row("energy_inequality_family",
                          "limit_verifier.energy_inequality_limit",
                          limit_rep["passed"], limit_rep["max_defect"], tol))
    rows.append(audit_row("no_positive_jumps",
                          "limit_verifier.energy_inequality_limit",
                          limit_rep["max_positive_jump"] <= tol,
                          limit_rep["max_positive_jump"], tol))

    traces_by_eps = {eps: [r.trace for r in res.runs[eps]] for eps in usable}
    moment = apriori_moment_report(traces_by_eps, p=3.0)
    worst = 0.0
    for a, b in zip(moment["rows"], moment["rows"][1:]):
        slack = float(np.hypot(a["ci_half"], b["ci_half"]))
        worst = max(worst, b["moment"] - a["moment"] - slack)
    rows.append(audit_row("apriori_moment_uniform",
                          "ns_solver.apriori_monitor",
                          moment["uniform_in_eps"], worst, 0.0,
                          f"moments={['%.5g' % r['moment'] for r in moment['rows']]}"))

    phi = _test_fields(cfg.grid)[0][1]
    finest_eps = usable[-1]
    V_f = res.measures[finest_eps]
    path = WienerPath.sample(cfg.seed, 0, base.rank, cfg.dt, base.steps) \
        if cfg.forcing is not None else None
    mom = momentum_residual(dirac_embed(finest.trajectory(), part,
                                        cfg.young.radius,
                                        cfg.young.bins_per_axis),
                            finest.trajectory(), cfg.forcing, path, phi,
                            t=cfg.horizon, eps=finest_eps)
    sample_gap = part.slab_duration / cfg.young.snapshots_per_slab
    mom_tol = cfg.tolerances.energy_defect_c * sample_gap \
        * (1.0 + finest.trace.initial_energy)
    rows.append(audit_row("momentum_residual_finest",
                          "limit_verifier.momentum_residual",
                          mom["residual"] <= mom_tol, mom["residual"], mom_tol))

    for eps, failures in res.blowups.items():
        for pid, msg in failures:
            rows.append(audit_row(f"blowup_eps{eps:g}_path{pid}",
                                  "ns_solver.run_path", False, float("inf"),
                                  0.0, msg))
    out.write_json("reports/vanish.json",
                   {"experiment": "vanish", "seed": cfg.seed, "rows": rows})
    return rows


# -- ym ----------------------------------------------------------------------


def _run_ym(cfg: RunConfig, out: RunDirectory, threads: int):
    eps = cfg.eps_values[0]
    part = _partition(cfg)
    snaps = _snapshot_times(cfg)
    run = run_path(cfg.solver_config(eps), cfg.seed, 0, snapshot_times=snaps)
    traj = run.trajectory()
    V = dirac_embed(traj, part, cfg.young.radius,
                    bins_per_axis=cfg.young.bins_per_axis,
                    sphere_bins=cfg.young.sphere_bins)
    out.write_json("measures/run.json", measure_to_dict(V))
    run.trace.write_csv(out.path(f"traces/eps{eps:g}_path0000.csv"))

    rows = []
    dim = cfg.grid.dim
    energy_f = TestIntegrand("speed2", quad=(np.eye(dim), np.zeros(dim), 0.0))
    got = pairing(V, energy_f)
    want = float(np.mean([2.0 * kinetic_energy(s) for s in run.snapshots])
                 * cfg.horizon)
    err = abs(got - want) / max(abs(want), 1e-300)
    rows.append(audit_row("pairing_vs_quadrature", "young_measure.pairing",
                          err <= 0.02, err, 0.02,
                          f"pairing={got:.6g} quadrature={want:.6g}"))

    mass_err = float(np.max(np.abs(V.nu_mass.sum(axis=1) - 1.0)))
    rows.append(audit_row("histogram_normalization",
                          "young_measure.dirac_embed", mass_err <= 1e-12,
                          mass_err, 1e-12))
    rows.append(audit_row("clipping_fraction", "young_measure.dirac_embed",
                          V.clipped_fraction == 0.0, V.clipped_fraction, 0.0,
                          "values escaping the truncation ball"))
    bary_norm = float(np.max(np.abs(barycenter(V))))
    rows.append(audit_row("barycenter_bounded", "young_measure.barycenter",
                          bary_norm <= cfg.young.radius, bary_norm,
                          cfg.young.radius))
    out.write_json("reports/ym.json",
                   {"experiment": "ym", "seed": cfg.seed, "rows": rows})
    return rows


# -- martingale ---------------------------------------------------------------


def _run_martingale(cfg: RunConfig, out: RunDirectory, threads: int):
    if cfg.forcing is None:
        raise ConfigError("forcing", "martingale experiment needs forcing")
    fields = _test_fields(cfg.grid)
    pairs = cfg.martingale.pairs
    hists = cfg.martingale.histories
    rank = cfg.forcing.rank
    n_tests = len(fields) * len(pairs) * len(hists) * (2 + rank)

    rows = []
    for phi_name, phi in fields:
        if cfg.transport:
            by_pair, c = solver_functionals_multi(
                cfg.solver_config(cfg.eps_values[0]), phi, cfg.seed,
                range(cfg.paths), pairs)
        else:
            by_pair, c = linear_model_functionals_multi(
                cfg.forcing, phi, cfg.seed,
                range(cfg.martingale.linear_paths), cfg.dt,
                int(round(cfg.horizon / cfg.dt)), pairs)
        for (s, t) in pairs:
            for hist in hists:
                stat = MartingaleStat(phi_name, s, t, history=hist)
                rep = martingale_test(stat, by_pair[(s, t)], c,
                                      n_tests=n_tests,
                                      alpha=cfg.tolerances.martingale_alpha)
                for r in rep["rows"]:
                    rows.append(audit_row(
                        f"martingale_{phi_name}_s{s:g}_t{t:g}_{hist}_{r['name']}",
                        "limit_verifier.martingale_test", r["passed"],
                        abs(r["mean"]), r["ci_half"],
                        f"se={r['se']:.3e}"))
    out.write_json("reports/martingale.json",
                   {"experiment": "martingale", "seed": cfg.seed, "rows": rows,
                    "n_tests": n_tests})
    return rows


# -- weakstrong ----------------------------------------------------------------


def _run_weakstrong(cfg: RunConfig, out: RunDirectory, threads: int):
    from dataclasses import replace

    part = _partition(cfg)
    snaps = _snapshot_times(cfg)
    weak_base = cfg.solver_config(cfg.eps_values[0])
    ref_grid = TorusGrid(cfg.grid.dim, cfg.reference.n)
    ref_cfg = replace(weak_base, grid=ref_grid, eps=0.0,
                      dt=cfg.dt / cfg.reference.dt_factor)

    rep = weak_strong_ladder(
        cfg.eps_values, weak_base, ref_cfg, cfg.seed, range(cfg.paths),
        part, cfg.young.radius, snaps, level=cfg.reference.level,
        slack=cfg.tolerances.gronwall_slack,
        bins_per_axis=cfg.young.bins_per_axis,
        tail_tol=cfg.reference.tail_tol)

    rows = []
    f0_max = max(float(np.max(rep["per_eps"][e]["f0"])) for e in cfg.eps_values)
    rows.append(audit_row("initial_relative_energy", "weak_strong.relative_energy",
                          f0_max <= 1e-12, f0_max, 1e-12,
                          "identical data and noise force F(0) = 0"))
    f_min = min(float(np.min(rep["per_eps"][e]["f_matrix"]))
                for e in cfg.eps_values)
    rows.append(audit_row("relative_energy_nonnegative",
                          "weak_strong.relative_energy", f_min >= -1e-12,
                          -f_min, 1e-12))
    gap = max(rep["per_eps"][e]["max_forms_gap_rel"] for e in cfg.eps_values)
    rows.append(audit_row("two_forms_agree", "weak_strong.relative_energy",
                          gap <= 0.02, gap, 0.02))
    mono = rep["monotone"]
    worst = max((-r["mean_drop"] - 1.96 * r["se"] for r in mono["rows"]),
                default=0.0)
    rows.append(audit_row("sup_F_monotone_along_ladder",
                          "weak_strong.gronwall_audit", mono["passed"], worst,
                          0.0, f"sup_by_eps={mono['sup_by_eps']}"))
    for eps in cfg.eps_values:
        audit = rep["per_eps"][eps]["gronwall"]
        rows.append(audit_row(f"gronwall_envelope_eps{eps:g}",
                              "weak_strong.gronwall_audit", audit["passed"],
                              -audit["min_margin"], 0.0,
                              f"slack={audit['slack']} level={audit['level']:.3g}"))

    out.write_json("reports/weakstrong.json",
                   {"experiment": "weakstrong", "seed": cfg.seed, "rows": rows,
                    "stopping_times": [float(x) for x in rep["stopping_times"]],
                    "sup_by_eps": mono["sup_by_eps"],
                    "relative_energy": {
                        f"{eps:g}": rep["per_eps"][eps]["gronwall"]
                        for eps in cfg.eps_values}})
    return rows


if __name__ == "__main__":
    sys.exit(main())
